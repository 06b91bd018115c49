//! Feature-space generation metrics and the per-layer gradient probe.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffkernel::{LayerPath, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Added to each covariance diagonal when a side has fewer than `d + 1` samples.
pub const COV_SHRINK: f64 = 1e-6;

fn rows(x: &Tensor, what: &str) -> Result<(usize, usize)> {
    if x.rank() != 2 {
        return Err(Error::Shape { op: "metric", detail: format!("{what} features {:?}, expected [n, d]", x.shape()) });
    }
    if !x.all_finite() {
        return Err(Error::NonFinite { what: format!("{what} features") });
    }
    Ok((x.shape()[0], x.shape()[1]))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean and unbiased covariance of the rows of `x`.
pub fn moments(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, d) = rows(x, "moment")?;
    if n == 0 {
        return Err(Error::invalid("moments of an empty feature set"));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mu = DVector::from_iterator(d, (0..d).map(|j| m.column(j).mean()));
    let mut centered = m;
    for mut r in centered.row_iter_mut() {
        r -= mu.transpose();
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let mut cov = centered.transpose() * &centered / denom;
    if n < d + 1 {
        for i in 0..d {
            cov[(i, i)] += COV_SHRINK;
        }
    }
    Ok((mu, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians; the cross term is
/// `Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn fid_from_moments(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Shape { op: "fid", detail: format!("dimensions {d}, {}, {:?}, {:?}", mu2.len(), s1.shape(), s2.shape()) });
    }
    let r = sym_sqrt(s1);
    let inner = &r * s2 * &r;
    let e = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let cross: f64 = e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = mu1 - mu2;
    Ok(diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * cross)
}

pub fn fid(real: &Tensor, generated: &Tensor) -> Result<f64> {
    let (_, d1) = rows(real, "real")?;
    let (_, d2) = rows(generated, "generated")?;
    if d1 != d2 {
        return Err(Error::Shape { op: "fid", detail: format!("feature widths {d1} and {d2}") });
    }
    let (m1, s1) = moments(real)?;
    let (m2, s2) = moments(generated)?;
    fid_from_moments(&m1, &s1, &m2, &s2)
}

/// Top-1/2/3 retrieval rates. Motion `i` is paired with caption row
/// `truth[i]`; its pool adds `pool - 1` other captions whose `labels` differ
/// from the true one (any other caption when `labels` is `None`). Ranking is
/// by Euclidean distance, ties broken toward the true caption losing.
pub fn r_precision<R: Rng, L: PartialEq>(
    motion: &Tensor,
    captions: &Tensor,
    truth: &[usize],
    labels: Option<&[L]>,
    pool: usize,
    rng: &mut R,
) -> Result<[f64; 3]> {
    let (p, d) = rows(motion, "motion")?;
    let (q, dc) = rows(captions, "caption")?;
    if d != dc || truth.len() != p || labels.is_some_and(|l| l.len() != q) || truth.iter().any(|&t| t >= q) {
        return Err(Error::Shape {
            op: "r_precision",
            detail: format!("{p}x{d} motions, {q}x{dc} captions, {} truth indices", truth.len()),
        });
    }
    if pool < 1 || pool > q {
        return Err(Error::invalid(format!("pool of {pool} exceeds the {q} available captions")));
    }
    if p == 0 {
        return Err(Error::invalid("r_precision over zero motions"));
    }
    let mut hits = [0usize; 3];
    for (i, &ti) in truth.iter().enumerate() {
        let eligible: Vec<usize> = (0..q)
            .filter(|&j| j != ti && labels.is_none_or(|l| l[j] != l[ti]))
            .collect();
        if eligible.len() < pool - 1 {
            return Err(Error::invalid(format!(
                "motion {i}: only {} mismatched captions for a pool of {pool}",
                eligible.len()
            )));
        }
        let m = motion.row(i);
        let d_true = dist(m, captions.row(ti));
        let closer = sample(rng, eligible.len(), pool - 1)
            .into_iter()
            .filter(|&k| dist(m, captions.row(eligible[k])) <= d_true)
            .count();
        for (k, h) in hits.iter_mut().enumerate() {
            if closer <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / p as f64))
}

/// Mean distance over `pairs` seeded pairs of distinct rows.
pub fn diversity<R: Rng>(features: &Tensor, pairs: usize, rng: &mut R) -> Result<f64> {
    let (n, _) = rows(features, "generated")?;
    if n < 2 || pairs == 0 {
        return Err(Error::invalid(format!("diversity needs >= 2 features and >= 1 pair, got {n} and {pairs}")));
    }
    let total: f64 = (0..pairs)
        .map(|_| {
            let ij = sample(rng, n, 2);
            dist(features.row(ij.index(0)), features.row(ij.index(1)))
        })
        .sum();
    Ok(total / pairs as f64)
}

/// Mean distance between each motion feature and its paired caption feature.
pub fn mm_dist(motion: &Tensor, captions: &Tensor) -> Result<f64> {
    let (n, _) = rows(motion, "motion")?;
    rows(captions, "caption")?;
    if motion.shape() != captions.shape() || n == 0 {
        return Err(Error::Shape { op: "mm_dist", detail: format!("{:?} vs {:?}", motion.shape(), captions.shape()) });
    }
    Ok((0..n).map(|i| dist(motion.row(i), captions.row(i))).sum::<f64>() / n as f64)
}

/// Generations per prompt for [`multimodality`].
pub const MULTIMODALITY_SAMPLES: usize = 20;

/// For each prompt, pairs generations (1,2), (3,4), … and averages the ten
/// distances; the result averages over prompts.
pub fn multimodality(per_prompt: &[Tensor]) -> Result<f64> {
    if per_prompt.is_empty() {
        return Err(Error::invalid("multimodality needs at least one prompt"));
    }
    let mut total = 0.0;
    for (p, f) in per_prompt.iter().enumerate() {
        let (n, _) = rows(f, "generated")?;
        if n != MULTIMODALITY_SAMPLES {
            return Err(Error::invalid(format!("prompt {p} has {n} generations, need exactly {MULTIMODALITY_SAMPLES}")));
        }
        total += (0..n / 2).map(|k| dist(f.row(2 * k), f.row(2 * k + 1))).sum::<f64>() / (n / 2) as f64;
    }
    Ok(total / per_prompt.len() as f64)
}

/// One eval run's metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub r_precision: [f64; 3],
    pub diversity: f64,
    pub mm_dist: f64,
    pub multimodality: Option<f64>,
    pub real_count: usize,
    pub generated_count: usize,
    pub multimodality_prompts: usize,
    pub seed: u64,
    pub checkpoint_hash: String,
    pub config_hash: String,
}

/// Timestep bucket edges; a step falls in the bucket of the largest edge
/// below `t`, so `t = 1000` lands in 750.
pub const BUCKET_EDGES: [usize; 5] = [0, 250, 500, 750, 1000];

pub fn t_bucket(t: usize) -> usize {
    let last = BUCKET_EDGES.len() - 2;
    BUCKET_EDGES[..=last].iter().rev().copied().find(|&e| t > e).unwrap_or(0)
}

/// Share of the per-step mean below which a layer counts as vanishing.
pub const VANISHING_FRACTION: f64 = 0.01;

/// Flags entries below `VANISHING_FRACTION` of their mean.
pub fn vanishing_flags(norms: &[f64]) -> Vec<bool> {
    if norms.is_empty() {
        return Vec::new();
    }
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    norms.iter().map(|&n| n < VANISHING_FRACTION * mean).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub step: u64,
    pub t_bucket: usize,
    pub layer: String,
    pub path: LayerPath,
    pub block: usize,
    pub grad_l2: f64,
    pub param_count: usize,
    pub vanishing: bool,
}

pub const PROBE_HEADER: &str = "step,t_bucket,layer,path,block,grad_l2,param_count,vanishing";

impl ProbeRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.t_bucket, self.layer, self.path, self.block, self.grad_l2, self.param_count, self.vanishing as u8
        )
    }
}

/// Records per-layer gradient norms of tagged parameters. Reads gradients
/// only; attach it through the trainer's post-backward observer.
#[derive(Debug, Default)]
pub struct GradProbe {
    pub rows: Vec<ProbeRow>,
    out: Option<(BufWriter<File>, PathBuf)>,
    flush_every: u64,
    pending: usize,
}

impl GradProbe {
    pub fn new() -> Self {
        GradProbe::default()
    }

    /// Streams rows to `path`, flushing every `flush_every` recorded steps.
    pub fn to_csv(path: &Path, flush_every: u64) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "{PROBE_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(GradProbe { rows: Vec::new(), out: Some((w, path.to_path_buf())), flush_every: flush_every.max(1), pending: 0 })
    }

    /// Groups tagged parameters by layer, in registry order.
    pub fn layer_norms(store: &ParamStore) -> Vec<(String, LayerPath, usize, f64, usize)> {
        let mut order: Vec<String> = Vec::new();
        let mut acc: BTreeMap<String, (LayerPath, usize, f64, usize)> = BTreeMap::new();
        for (_, p) in store.iter() {
            let Some(tag) = &p.tag else { continue };
            let e = acc.entry(tag.layer.clone()).or_insert_with(|| {
                order.push(tag.layer.clone());
                (tag.path, tag.block, 0.0, 0)
            });
            e.2 += p.grad.sq_norm();
            e.3 += p.value.len();
        }
        order
            .into_iter()
            .map(|l| {
                let (path, block, sq, n) = acc[&l];
                (l, path, block, sq.sqrt(), n)
            })
            .collect()
    }

    pub fn record(&mut self, step: u64, t: usize, store: &ParamStore) -> Result<()> {
        let layers = GradProbe::layer_norms(store);
        let flags = vanishing_flags(&layers.iter().map(|l| l.3).collect::<Vec<_>>());
        let bucket = t_bucket(t);
        let start = self.rows.len();
        for ((layer, path, block, grad_l2, param_count), vanishing) in layers.into_iter().zip(flags) {
            self.rows.push(ProbeRow { step, t_bucket: bucket, layer, path, block, grad_l2, param_count, vanishing });
        }
        if let Some((w, path)) = &mut self.out {
            let io = |e| Error::io(&*path, e);
            for r in &self.rows[start..] {
                writeln!(w, "{}", r.csv_row()).map_err(io)?;
            }
            self.pending += 1;
            if self.pending as u64 >= self.flush_every {
                w.flush().map_err(io)?;
                self.pending = 0;
            }
        }
        Ok(())
    }

    pub fn finish(&mut self) -> Result<()> {
        if let Some((w, path)) = &mut self.out {
            w.flush().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }
}

/// Per-layer mean over steps of `grad_l2 / mean over layers at that step`.
pub fn mean_relative_norms(rows: &[ProbeRow]) -> Vec<(String, LayerPath, f64)> {
    let mut by_step: BTreeMap<u64, Vec<&ProbeRow>> = BTreeMap::new();
    for r in rows {
        by_step.entry(r.step).or_default().push(r);
    }
    let mut order: Vec<(String, LayerPath)> = Vec::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for rs in by_step.values() {
        let mean = rs.iter().map(|r| r.grad_l2).sum::<f64>() / rs.len() as f64;
        for r in rs {
            let e = sums.entry(r.layer.clone()).or_insert_with(|| {
                order.push((r.layer.clone(), r.path));
                (0.0, 0)
            });
            e.0 += if mean > 0.0 { r.grad_l2 / mean } else { 0.0 };
            e.1 += 1;
        }
    }
    order
        .into_iter()
        .map(|(l, p)| {
            let (s, n) = sums[&l];
            (l, p, s / n as f64)
        })
        .collect()
}

/// Smallest mean relative norm among down-path layers.
pub fn min_down_ratio(rows: &[ProbeRow]) -> Option<f64> {
    mean_relative_norms(rows)
        .into_iter()
        .filter(|(_, p, _)| *p == LayerPath::Down)
        .map(|(_, _, r)| r)
        .min_by(f64::total_cmp)
}

/// Per-layer summary written by `gradprobe-report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: String,
    pub path: LayerPath,
    pub mean_grad_l2: f64,
    pub mean_relative: f64,
    pub vanishing_steps: usize,
    pub steps: usize,
}

pub fn summarize(rows: &[ProbeRow]) -> Vec<LayerSummary> {
    let rel = mean_relative_norms(rows);
    rel.into_iter()
        .map(|(layer, path, mean_relative)| {
            let mine: Vec<&ProbeRow> = rows.iter().filter(|r| r.layer == layer).collect();
            LayerSummary {
                mean_grad_l2: mine.iter().map(|r| r.grad_l2).sum::<f64>() / mine.len() as f64,
                vanishing_steps: mine.iter().filter(|r| r.vanishing).count(),
                steps: mine.len(),
                layer,
                path,
                mean_relative,
            }
        })
        .collect()
}

/// Parses a probe CSV back into rows.
pub fn read_probe_csv(path: &Path) -> Result<Vec<ProbeRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, what: &str| Error::Format { format: "probe csv", path: path.to_path_buf(), detail: format!("line {line}: {what}") };
    let mut lines = text.lines();
    if lines.next() != Some(PROBE_HEADER) {
        return Err(bad(1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 8 {
                return Err(bad(i + 2, "expected 8 fields"));
            }
            let path = match f[3] {
                "down" => LayerPath::Down,
                "mid" => LayerPath::Mid,
                "up" => LayerPath::Up,
                _ => return Err(bad(i + 2, "unknown path")),
            };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 2, "bad number"));
            Ok(ProbeRow {
                step: num(f[0])? as u64,
                t_bucket: num(f[1])? as usize,
                layer: f[2].to_string(),
                path,
                block: num(f[4])? as usize,
                grad_l2: num(f[5])?,
                param_count: num(f[6])? as usize,
                vanishing: f[7] == "1",
            })
        })
        .collect()
}
