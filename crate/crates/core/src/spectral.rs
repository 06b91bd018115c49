//! Orthonormal type-II DCT along the time axis, low-frequency truncation and
//! energy-spectrum analysis.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use crate::diffkernel::kernels::gemm;
use crate::diffkernel::Tensor;
use crate::error::{Error, Result};
use crate::motiondata::MotionClip;

/// Row-major `n x n` DCT-II matrix, `M[k][j] = A(k) cos(pi (2j+1) k / 2n)`.
pub fn dct_matrix(n: usize) -> Arc<Vec<f64>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Vec<f64>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(m) = cache.lock().expect("dct cache poisoned").get(&n) {
        return m.clone();
    }
    let nf = n as f64;
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for j in 0..n {
            m[k * n + j] = a * (PI * (2 * j + 1) as f64 * k as f64 / (2.0 * nf)).cos();
        }
    }
    let m = Arc::new(m);
    cache.lock().expect("dct cache poisoned").insert(n, m.clone());
    m
}

pub fn dct2_forward(signal: &[f64]) -> Result<Vec<f64>> {
    let n = signal.len();
    if n == 0 {
        return Err(Error::invalid("dct of an empty signal"));
    }
    let m = dct_matrix(n);
    Ok(m.chunks_exact(n).map(|row| row.iter().zip(signal).map(|(a, b)| a * b).sum()).collect())
}

pub fn dct2_inverse(coeffs: &[f64]) -> Result<Vec<f64>> {
    let n = coeffs.len();
    if n == 0 {
        return Err(Error::invalid("inverse dct of an empty sequence"));
    }
    let m = dct_matrix(n);
    let mut out = vec![0.0; n];
    for (k, &c) in coeffs.iter().enumerate() {
        for (o, &mk) in out.iter_mut().zip(&m[k * n..(k + 1) * n]) {
            *o += c * mk;
        }
    }
    Ok(out)
}

/// Applies the first `rows` DCT rows of length `n` to a row-major `n x d` block.
fn transform_columns(values: &[f64], n: usize, d: usize, rows: usize) -> Vec<f64> {
    let m = dct_matrix(n);
    let mut out = vec![0.0; rows * d];
    gemm(rows, n, d, &m, n as isize, 1, values, d as isize, 1, 0.0, &mut out);
    out
}

/// `K x d` coefficients of a clip, frequency along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub coefficients: Tensor,
    /// Length of the transform (the clip length, or `k` when the clip was padded).
    pub source_length: usize,
}

impl Spectrum {
    pub fn k(&self) -> usize {
        self.coefficients.shape()[0]
    }

    /// Inverse transform with the dropped coefficients set to zero, cropped to `frames`.
    pub fn reconstruct(&self, frames: usize) -> Result<Tensor> {
        let (k, d) = (self.k(), self.coefficients.shape()[1]);
        let n = self.source_length;
        if frames > n {
            return Err(Error::invalid(format!("cannot reconstruct {frames} frames from a length-{n} transform")));
        }
        let m = dct_matrix(n);
        let mut out = vec![0.0; frames * d];
        // M^T restricted to the first k rows and `frames` columns
        gemm(frames, k, d, &m, 1, n as isize, self.coefficients.data(), d as isize, 1, 0.0, &mut out);
        Tensor::new(&[frames, d], out)
    }
}

/// First `k` DCT coefficients of every feature column. Clips shorter than `k`
/// are zero-padded in time to `k` frames before the transform.
pub fn dct_truncate(clip: &MotionClip, k: usize) -> Result<Spectrum> {
    dct_truncate_values(clip.values(), clip.frames(), clip.dims(), k)
}

pub fn dct_truncate_values(values: &[f64], frames: usize, dims: usize, k: usize) -> Result<Spectrum> {
    if k == 0 {
        return Err(Error::invalid("dct truncation needs k >= 1"));
    }
    if values.len() != frames * dims || frames == 0 {
        return Err(Error::Shape { op: "dct_truncate", detail: format!("{} values for {frames}x{dims}", values.len()) });
    }
    let (n, coeffs) = if frames >= k {
        (frames, transform_columns(values, frames, dims, k))
    } else {
        let mut padded = values.to_vec();
        padded.resize(k * dims, 0.0);
        (k, transform_columns(&padded, k, dims, k))
    };
    Ok(Spectrum { coefficients: Tensor::new(&[k, dims], coeffs)?, source_length: n })
}

/// Corpus-level energy distribution over DCT indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergySpectrum {
    pub k: usize,
    /// Energy fraction carried by indices `< k`.
    pub retained_ratio: f64,
    /// Mean `|v_f[j]|` over every clip long enough to have index `j` and every feature column.
    pub mean_abs: Vec<f64>,
    /// Cumulative energy fraction through index `j`.
    pub cum_energy: Vec<f64>,
}

/// Each clip is transformed at its native length; energies are pooled per index.
pub fn energy_spectrum(clips: &[MotionClip], k: usize) -> Result<EnergySpectrum> {
    if clips.is_empty() {
        return Err(Error::invalid("energy spectrum of an empty corpus"));
    }
    let longest = clips.iter().map(|c| c.frames()).max().unwrap_or(0);
    let mut energy = vec![0.0; longest];
    let mut abs_sum = vec![0.0; longest];
    let mut counts = vec![0usize; longest];
    for c in clips {
        let (n, d) = (c.frames(), c.dims());
        let coeffs = transform_columns(c.values(), n, d, n);
        for (j, row) in coeffs.chunks_exact(d).enumerate() {
            energy[j] += row.iter().map(|v| v * v).sum::<f64>();
            abs_sum[j] += row.iter().map(|v| v.abs()).sum::<f64>();
            counts[j] += d;
        }
    }
    let total: f64 = energy.iter().sum();
    let mut cum = 0.0;
    let cum_energy: Vec<f64> = energy
        .iter()
        .map(|e| {
            cum += e;
            if total > 0.0 { cum / total } else { 1.0 }
        })
        .collect();
    let retained_ratio = if k == 0 { 0.0 } else { cum_energy[k.min(longest) - 1] };
    let mean_abs = abs_sum.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    Ok(EnergySpectrum { k, retained_ratio, mean_abs, cum_energy })
}

impl EnergySpectrum {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("freq_index,mean_abs_coeff,cum_energy_ratio\n");
        for (j, (a, c)) in self.mean_abs.iter().zip(&self.cum_energy).enumerate() {
            out.push_str(&format!("{j},{a},{c}\n"));
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Energy-weighted mean DCT index divided by clip length, averaged over the
/// chosen columns (all columns when `columns` is `None`). Columns with no
/// energy are skipped.
pub fn spectral_centroid(clip: &MotionClip, columns: Option<&[usize]>) -> f64 {
    let (n, d) = (clip.frames(), clip.dims());
    let coeffs = transform_columns(clip.values(), n, d, n);
    let all: Vec<usize> = (0..d).collect();
    let cols = columns.unwrap_or(&all);
    let mut acc = 0.0;
    let mut used = 0;
    for &c in cols {
        let (mut e, mut we) = (0.0, 0.0);
        for j in 0..n {
            let v = coeffs[j * d + c];
            e += v * v;
            we += j as f64 * v * v;
        }
        if e > 0.0 {
            acc += we / (e * n as f64);
            used += 1;
        }
    }
    if used == 0 { 0.0 } else { acc / used as f64 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn constant_maps_to_dc() {
        let v = dct2_forward(&[1.0; 4]).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-15);
        assert!(v[1..].iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn delta_of_length_two() {
        // direct sum: A(0)cos 0 = sqrt(1/2), A(1)cos(pi/4) = sqrt(2/2)*sqrt(2)/2
        let v = dct2_forward(&[1.0, 0.0]).unwrap();
        assert!((v[0] - 0.70710678).abs() < 1e-8);
        assert!((v[1] - 0.70710678).abs() < 1e-8);
    }

    #[test]
    fn inverse_of_dc_basis_is_flat() {
        let s = dct2_inverse(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(s.iter().all(|x| (x - 0.5).abs() < 1e-15));
        assert_eq!(dct2_inverse(&[0.0; 5]).unwrap(), vec![0.0; 5]);
        assert!(dct2_forward(&[]).is_err());
    }

    #[test]
    fn round_trip_parseval_and_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..128).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..128).map(|_| rng.sample(StandardNormal)).collect();
        let fx = dct2_forward(&x).unwrap();
        let back = dct2_inverse(&fx).unwrap();
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-9));
        let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nf: f64 = fx.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((nx - nf).abs() < 1e-9);
        let fy = dct2_forward(&y).unwrap();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let fm = dct2_forward(&mix).unwrap();
        for i in 0..128 {
            assert!((fm[i] - (2.0 * fx[i] - 0.5 * fy[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn truncation_of_a_basis_column() {
        let n = 16;
        let m = dct_matrix(n);
        // column 0 is the index-3 basis vector, column 1 is constant
        let mut data = Vec::new();
        for j in 0..n {
            data.extend([m[3 * n + j], 1.0]);
        }
        let clip = MotionClip::new("b", 20.0, n, 2, data).unwrap();
        let s3 = dct_truncate(&clip, 3).unwrap();
        assert!((0..3).all(|j| s3.coefficients.data()[j * 2].abs() < 1e-12));
        let s4 = dct_truncate(&clip, 4).unwrap();
        assert!((s4.coefficients.data()[6] - 1.0).abs() < 1e-12);
        let s1 = dct_truncate(&clip, 1).unwrap().reconstruct(n).unwrap();
        assert!((0..n).all(|j| (s1.data()[j * 2 + 1] - 1.0).abs() < 1e-12));
        let full = dct_truncate(&clip, n).unwrap().reconstruct(n).unwrap();
        assert!(full.max_abs_diff(clip.data()) < 1e-12);
    }

    #[test]
    fn short_clips_are_padded() {
        let clip = MotionClip::new("s", 20.0, 3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let s = dct_truncate(&clip, 8).unwrap();
        assert_eq!(s.coefficients.shape(), &[8, 1]);
        assert_eq!(s.source_length, 8);
        let back = s.reconstruct(3).unwrap();
        assert!(back.max_abs_diff(clip.data()) < 1e-12);
        assert!(dct_truncate(&clip, 0).is_err());
    }

    #[test]
    fn energy_ratio_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let clips: Vec<MotionClip> = (0..5)
            .map(|i| {
                let n = 10 + i;
                let data = (0..n * 3).map(|_| rng.sample(StandardNormal)).collect();
                MotionClip::new("r", 20.0, n, 3, data).unwrap()
            })
            .collect();
        let e = energy_spectrum(&clips, 14).unwrap();
        assert!(e.cum_energy.windows(2).all(|w| w[1] >= w[0] - 1e-15));
        assert!((e.retained_ratio - 1.0).abs() < 1e-12);
        let constant = vec![MotionClip::new("c", 20.0, 6, 2, vec![3.0; 12]).unwrap()];
        assert!((energy_spectrum(&constant, 1).unwrap().retained_ratio - 1.0).abs() < 1e-12);
    }
}
