//! Per-layer gradient norms of the denoiser with the anchor loss on and off.
//!
//! `cargo run --release --example gradient_probe -- [steps]`

use std::sync::Arc;

use anchordiff::config::RunConfig;
use anchordiff::evalprobe::{min_down_ratio, summarize, GradProbe};
use anchordiff::pipeline::{generate, new_trainer, train, train_moclip, training_sets};

fn main() -> anchordiff::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let mut cfg = RunConfig::desk();
    cfg.moclip.stage1_steps = 30;
    cfg.moclip.stage2_steps = 10;
    cfg.train_steps = steps;
    let corpus = generate(&cfg)?;
    let moclip = Arc::new(train_moclip(&cfg, &corpus, |_| {})?.0);
    let train_set = Arc::new(training_sets(&corpus, &moclip)?.0);

    for dal in [false, true] {
        cfg.dal = dal;
        let mut trainer = new_trainer(&cfg, train_set.clone(), moclip.clone())?;
        let mut probe = GradProbe::new();
        train(&cfg, &mut trainer, Some(&mut probe), |_, _| Ok(()))?;
        println!("dal = {dal}: min down-path norm / mean = {:.4}", min_down_ratio(&probe.rows).unwrap_or(f64::NAN));
        for s in summarize(&probe.rows) {
            println!("  {:28} {:>5} mean |g| {:.3e}  relative {:.3}  vanishing {}/{}", s.layer, format!("{:?}", s.path), s.mean_grad_l2, s.mean_relative, s.vanishing_steps, s.steps);
        }
    }
    Ok(())
}
