//! Builds a small two-layer network on the autodiff graph and checks its
//! gradients against central differences.

use anchordiff::diffkernel::{grad_check, GradCheckOptions, ParamBuilder, ParamStore, Tensor};
use anchordiff::seed::rng_for;

fn main() -> anchordiff::Result<()> {
    let mut store = ParamStore::new();
    let mut rng = rng_for(3, "example");
    let (w1, w2) = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        (pb.kaiming("w1", &[5, 8], 5)?, pb.kaiming("w2", &[8, 1], 8)?)
    };
    let x = Tensor::new(&[4, 5], (0..20).map(|i| (i as f64 * 0.37).cos()).collect())?;
    let y = Tensor::new(&[4, 1], vec![0.5, -0.2, 0.1, 0.9])?;
    let opts = GradCheckOptions { eps: 1e-3, tol: 1e-4, ..Default::default() };
    let report = grad_check(&mut store, &opts, |g| {
        let xi = g.input(x.clone());
        let a = g.param(w1);
        let h = g.matmul(xi, a)?;
        let h = g.gelu(h);
        let b = g.param(w2);
        let out = g.matmul(h, b)?;
        let yt = g.constant(y.clone());
        let d = g.sub(out, yt)?;
        let sq = g.square(d);
        Ok(g.mean(sq))
    })?;
    println!(
        "checked {} entries, max relative error {:.2e} at {}[{}]: {}",
        report.checked,
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        if report.passed() { "ok" } else { "FAILED" }
    );
    Ok(())
}
