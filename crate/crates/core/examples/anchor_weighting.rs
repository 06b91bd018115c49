//! The three ways of weighting the anchor losses over a training run.

use anchordiff::anchors::{total_loss_value, zeta, WeightingStrategy};

fn main() -> anchordiff::Result<()> {
    let n_decay = 2000;
    let (l_ddpm, l_fre, l_tem) = (0.8, 0.5, 0.3);
    println!("{:>6} {:>7} {:>9} {:>9} {:>9}", "step", "zeta", "dynamic", "static", "learnable");
    for n in (0..=2400).step_by(300) {
        let row: Vec<f64> = [WeightingStrategy::DynamicCosine, WeightingStrategy::StaticFixed, WeightingStrategy::LearnableGlobal]
            .iter()
            .map(|&s| total_loss_value(l_ddpm, l_fre, l_tem, s, (0.1, 0.5), n, n_decay))
            .collect::<anchordiff::Result<_>>()?;
        println!("{n:>6} {:>7.4} {:>9.4} {:>9.4} {:>9.4}", zeta(n, n_decay)?, row[0], row[1], row[2]);
    }
    println!("learnable weights start at the static values and then follow their gradients");
    Ok(())
}
