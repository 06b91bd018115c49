use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    /// Check at most this many entries (seeded subsample); `None` checks all.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { eps: 1e-4, tol: 1e-5, abs_floor: 1e-8, max_entries: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

fn eval(store: &ParamStore, loss_fn: &impl Fn(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::inference(store);
    let loss = loss_fn(&mut g)?;
    let v = g.scalar_value(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite { what: "grad_check loss".into() });
    }
    Ok(v)
}

/// Compares backward-pass gradients of every trainable parameter against
/// central differences `(f(w+eps) - f(w-eps)) / 2eps`.
pub fn grad_check(
    store: &mut ParamStore,
    opts: &GradCheckOptions,
    loss_fn: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<GradCheckReport> {
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        if !g.scalar_value(loss).is_finite() {
            return Err(Error::NonFinite { what: "grad_check loss".into() });
        }
        let grads = g.backward(loss)?;
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let v = grads.params().find(|(pid, _)| *pid == id).map(|(_, t)| t.data().to_vec());
                (id, v.unwrap_or_else(|| vec![0.0; p.value.len()]))
            })
            .collect()
    };

    let entries: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, g))| (0..g.len()).map(move |e| (pi, e)))
        .collect();
    let chosen: Vec<(usize, usize)> = match opts.max_entries {
        Some(k) if k < entries.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, entries.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| entries[i]).collect()
        }
        _ => entries,
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: chosen.len(),
        tol: opts.tol,
    };
    for (pi, e) in chosen {
        let (id, ref grad) = analytic[pi];
        let orig = store.get(id).value.data()[e];
        store.get_mut(id).value.data_mut()[e] = orig + opts.eps;
        let plus = eval(store, &loss_fn);
        store.get_mut(id).value.data_mut()[e] = orig - opts.eps;
        let minus = eval(store, &loss_fn);
        store.get_mut(id).value.data_mut()[e] = orig;
        let numeric = (plus? - minus?) / (2.0 * opts.eps);
        let a = grad[e];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
        if report.worst_param.is_empty() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_param = store.get(id).name.clone();
            report.worst_index = e;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffkernel::Tensor;

    #[test]
    fn quadratic_half_norm() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.1, 3.0, -0.7]).unwrap(), None)
            .unwrap();
        let report = grad_check(&mut store, &GradCheckOptions { tol: 1e-9, ..Default::default() }, |g| {
            let wv = g.param(w);
            let sq = g.square(wv);
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checked, 6);
    }

    #[test]
    fn detects_wrong_gradient() {
        // stop-gradient trick: loss uses w through a constant copy, so the
        // analytic gradient misses a term
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::new(&[1], vec![1.5]).unwrap(), None).unwrap();
        let report = grad_check(&mut store, &GradCheckOptions::default(), |g| {
            let wv = g.param(w);
            let frozen = g.constant(g.value(wv).clone());
            let p = g.mul(wv, frozen)?;
            g.sum_axis(p, 0)
        })
        .unwrap();
        assert!(!report.passed());
    }
}
