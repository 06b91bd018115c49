//! Trains the motion-text dual encoder and reports held-out retrieval.
//!
//! `cargo run --release --example moclip_retrieval -- [steps]` (default 300, about a minute and a half)

use anchordiff::config::RunConfig;
use anchordiff::pipeline::{generate, moclip_retrieval, train_moclip};

fn main() -> anchordiff::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let mut cfg = RunConfig::desk();
    cfg.moclip.stage1_steps = steps * 2 / 3;
    cfg.moclip.stage2_steps = steps - steps * 2 / 3;
    let corpus = generate(&cfg)?;
    let (model, log) = train_moclip(&cfg, &corpus, |s| {
        if s.step % 50 == 0 {
            println!("stage {} step {:4}  loss {:.4}  tau {:.4}", s.stage, s.step, s.loss, s.tau);
        }
    })?;
    println!("final loss {:.4}", log.last().map_or(f64::NAN, |s| s.loss));
    let top = moclip_retrieval(&model, &corpus, 32, cfg.seed)?;
    println!("32-way retrieval: top1 {:.3}  top2 {:.3}  top3 {:.3}  (chance {:.3})", top[0], top[1], top[2], 1.0 / 32.0);
    Ok(())
}
