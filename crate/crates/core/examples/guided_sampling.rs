//! Briefly trains a small model, then samples the same caption at several
//! guidance scales and writes the clips next to a JSON sidecar.
//!
//! `cargo run --release --example guided_sampling -- [out_dir]`

use std::sync::Arc;

use anchordiff::config::RunConfig;
use anchordiff::diffusion::{sample, sampling_timesteps, save_samples, SampleRequest, SampleSidecar};
use anchordiff::pipeline::{generate, new_trainer, train, train_moclip, training_sets};

fn main() -> anchordiff::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "guided_samples".into());
    let mut cfg = RunConfig::desk();
    cfg.moclip.stage1_steps = 60;
    cfg.moclip.stage2_steps = 30;
    cfg.train_steps = 150;
    let corpus = generate(&cfg)?;
    let moclip = Arc::new(train_moclip(&cfg, &corpus, |_| {})?.0);
    let train_set = Arc::new(training_sets(&corpus, &moclip)?.0);
    let mut trainer = new_trainer(&cfg, train_set, moclip.clone())?;
    train(&cfg, &mut trainer, None, |_, _| Ok(()))?;

    let caption = corpus.vocab().encode_text("a person waves, then jumps");
    let schedule = cfg.diffusion.schedule()?;
    for omega in [0.0, 1.0, 2.5] {
        let req = SampleRequest { frames: 48, fps: corpus.manifest.fps, omega, stride: 20, seed: 5 };
        let clips = sample(&trainer.model, &trainer.store, &moclip, &schedule, &[&caption], &req, corpus.stats())?;
        let energy: f64 = clips[0].values().iter().map(|v| v * v).sum::<f64>() / clips[0].values().len() as f64;
        println!("omega {omega}: {} frames, mean square value {energy:.4}", clips[0].frames());
        let sidecar = SampleSidecar {
            captions: vec![corpus.vocab().decode_text(&caption)],
            seed: req.seed,
            omega,
            steps: sampling_timesteps(schedule.steps(), req.stride)?.len(),
            stride: req.stride,
            frames: req.frames,
            checkpoint: String::new(),
        };
        save_samples(out.as_ref(), &format!("omega_{omega}"), &clips, &sidecar)?;
    }
    println!("wrote {out}/");
    Ok(())
}
