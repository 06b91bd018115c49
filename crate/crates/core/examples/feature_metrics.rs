//! FID, R-Precision, Diversity and MM-Dist on toy feature sets with known answers.

use anchordiff::diffkernel::Tensor;
use anchordiff::evalprobe::{diversity, fid, mm_dist, r_precision};
use anchordiff::seed::rng_for;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "features");
    let data = (0..n * d).map(|_| shift + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    Tensor::new(&[n, d], data).expect("shape")
}

fn main() -> anchordiff::Result<()> {
    let real = gaussian(2000, 4, 0.0, 1);
    println!("fid(X, X)             = {:.2e}", fid(&real, &real)?);
    println!("fid(N(0,I), N(0,I))   = {:.4}", fid(&real, &gaussian(2000, 4, 0.0, 2))?);
    println!("fid(N(0,I), N(1,I))   = {:.4}  (mean shift alone gives 4)", fid(&real, &gaussian(2000, 4, 1.0, 3))?);
    println!("diversity of N(0,I)   = {:.4}  (E|x-y| = 2.6587 in 4-d)", diversity(&real, 300, &mut rng_for(4, "pairs"))?);

    let text = gaussian(64, 4, 0.0, 5);
    let near = Tensor::new(text.shape(), text.data().iter().map(|v| v + 0.05).collect())?;
    let truth: Vec<usize> = (0..64).collect();
    let rp = r_precision::<_, ()>(&near, &text, &truth, None, 32, &mut rng_for(6, "pool"))?;
    println!("paired features: R-Precision top1/2/3 = {rp:?}, MM-Dist = {:.4}", mm_dist(&near, &text)?);
    let random = gaussian(2000, 4, 0.0, 7);
    let truth: Vec<usize> = (0..2000).map(|i| i % 64).collect();
    let rp = r_precision::<_, ()>(&random, &text, &truth, None, 32, &mut rng_for(8, "pool"))?;
    println!("unrelated features: top1 = {:.3} (chance 1/32)", rp[0]);
    Ok(())
}
