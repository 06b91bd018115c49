//! How much of the corpus energy the first k DCT coefficients keep.
//!
//! `cargo run --example dct_energy -- [out.csv]`

use anchordiff::motiondata::{generate_corpus, CorpusConfig, Vocabulary};
use anchordiff::spectral::{dct2_forward, dct2_inverse, dct_truncate, energy_spectrum};

fn main() -> anchordiff::Result<()> {
    let corpus = generate_corpus(&CorpusConfig::default(), &Vocabulary::default())?;
    let clips = corpus.normalized();
    for k in [4, 8, 16, 32, 64] {
        let spec = energy_spectrum(&clips, k)?;
        println!("k = {k:3}: retained energy {:.4}", spec.retained_ratio);
    }

    let signal: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
    let back = dct2_inverse(&dct2_forward(&signal)?)?;
    let err = signal.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("round trip error on a 12-sample sine: {err:.2e}");

    let spec = dct_truncate(&clips[0], 16)?;
    let approx = spec.reconstruct(clips[0].frames())?;
    let rms = (approx.data().iter().zip(clips[0].values()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        / approx.len() as f64)
        .sqrt();
    println!("clip {} rebuilt from 16 coefficients: rms error {rms:.4}", clips[0].id);

    if let Some(path) = std::env::args().nth(1) {
        energy_spectrum(&clips, 64)?.write_csv(path.as_ref())?;
        println!("wrote {path}");
    }
    Ok(())
}
