//! Generates the desk corpus and prints its splits, a few captions and the
//! mean spectral centroid of each single-action clip family.

use std::collections::BTreeMap;

use anchordiff::motiondata::{generate_corpus, ActionTemplate, CorpusConfig, Split, Vocabulary};
use anchordiff::spectral::spectral_centroid;

fn main() -> anchordiff::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let corpus = generate_corpus(&CorpusConfig { seed, ..Default::default() }, &Vocabulary::default())?;
    println!(
        "{} clips: train {} / val {} / test {}",
        corpus.len(),
        corpus.indices(Split::Train).len(),
        corpus.indices(Split::Val).len(),
        corpus.indices(Split::Test).len()
    );
    for i in 0..5 {
        let c = &corpus.clips[i];
        println!("  {} ({} frames): {}", c.id, c.frames(), corpus.vocab().decode_text(&corpus.caption(i)));
    }

    let mut centroids: BTreeMap<ActionTemplate, Vec<f64>> = BTreeMap::new();
    for i in 0..corpus.len() {
        if let [t] = corpus.templates(i) {
            centroids.entry(*t).or_default().push(spectral_centroid(&corpus.clips[i], None));
        }
    }
    println!("mean spectral centroid by action:");
    for (t, v) in centroids {
        println!("  {:6} {:.4}  ({} clips)", t.verb(), v.iter().sum::<f64>() / v.len() as f64, v.len());
    }
    Ok(())
}
