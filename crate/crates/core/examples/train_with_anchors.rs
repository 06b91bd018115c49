//! Trains the denoiser with and without the dual anchor loss from the same seed
//! and prints the loss components side by side.
//!
//! `cargo run --release --example train_with_anchors -- [steps]`

use std::sync::Arc;

use anchordiff::config::RunConfig;
use anchordiff::pipeline::{generate, new_trainer, train, train_moclip, training_sets};

fn main() -> anchordiff::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let mut cfg = RunConfig::desk();
    cfg.moclip.stage1_steps = 60;
    cfg.moclip.stage2_steps = 30;
    cfg.train_steps = steps;
    let corpus = generate(&cfg)?;
    let (moclip, _) = train_moclip(&cfg, &corpus, |_| {})?;
    let moclip = Arc::new(moclip);
    let (train_set, val_set) = training_sets(&corpus, &moclip)?;
    let train_set = Arc::new(train_set);

    for dal in [false, true] {
        cfg.dal = dal;
        let mut trainer = new_trainer(&cfg, train_set.clone(), moclip.clone())?;
        println!("dal = {dal}");
        train(&cfg, &mut trainer, None, |_, r| {
            if r.step % 50 == 0 {
                println!("  step {:4}  l_ddpm {:.4}  l_fre {:.4}  l_tem {:.4}  zeta {:.3}  total {:.4}", r.step, r.l_ddpm, r.l_fre, r.l_tem, r.zeta, r.total);
            }
            Ok(())
        })?;
        println!("  validation l_ddpm {:.4}", trainer.validation_loss(&val_set, 2, cfg.seed)?);
    }
    Ok(())
}
