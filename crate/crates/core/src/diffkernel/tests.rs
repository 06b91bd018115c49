use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let data = (0..numel(shape)).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn rand_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// Checks `op` on parameters built from `shapes`, projecting the output onto
/// a fixed random tensor so every output element matters.
fn check_op(seed: u64, shapes: &[Vec<usize>], op: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("in{i}"), rand_tensor(&mut rng, s), None).unwrap())
        .collect();
    let probe_seed: u64 = rng.random();
    let opts = GradCheckOptions { eps: 1e-5, tol: 1e-5, ..Default::default() };
    let report = grad_check(&mut store, &opts, |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let out = op(g, &vars)?;
        let mut prng = ChaCha8Rng::seed_from_u64(probe_seed);
        let w = rand_tensor(&mut prng, g.shape(out));
        let w = g.constant(w);
        let p = g.mul(out, w)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.passed(), "seed {seed}, shapes {shapes:?}: {report:?}");
}

#[test]
fn matmul_identity_and_ones_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let a = store.add("a", rand_tensor(&mut rng, &[3, 3]), None).unwrap();
    let mut g = Graph::new(&store);
    let i3 = g.constant(Tensor::eye(3));
    let av = g.param(a);
    let out = g.matmul(i3, av).unwrap();
    assert_eq!(g.value(out), store.value(a));
    let s = g.sum(out);
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(av).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::detached();
    let x = g.constant(Tensor::zeros(&[3]));
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn scalar_chain_rule() {
    let mut g = Graph::detached();
    let x = g.input(Tensor::scalar(3.0));
    let two_x = g.scale(x, 2.0);
    let y = g.square(two_x);
    assert_eq!(g.scalar_value(y), 36.0);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), 24.0);
}

#[test]
fn shared_subexpression_sums() {
    let mut g = Graph::detached();
    let x = g.input(Tensor::scalar(0.7));
    let y = g.add(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(x).unwrap().item(), 2.0);
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::detached();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().contains("matmul"), "{err}");
    let c = g.constant(Tensor::zeros(&[4]));
    let err = g.add(a, c).unwrap_err();
    assert!(err.to_string().contains("broadcast"), "{err}");
}

#[test]
fn masked_softmax_zeroes_hidden_keys() {
    let mut g = Graph::detached();
    let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 0.5, 0.5, 9.0]).unwrap());
    let mask = KeyMask { keep: vec![true, true, false, true, true, false], groups: 2 };
    let y = g.masked_softmax(x, Some(&mask)).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[2], 0.0);
    assert_eq!(v[5], 0.0);
    assert!((v[3] - 0.5).abs() < 1e-15);
}

#[test]
fn inference_graph_records_nothing() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::full(&[2], 1.0), None).unwrap();
    let mut g = Graph::inference(&store);
    let wv = g.param(w);
    let s = g.sum(wv);
    assert!(!g.requires_grad(s));
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.params().count(), 0);
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("text.w", Tensor::full(&[2], 1.0), None).unwrap();
    let v = store.add("motion.w", Tensor::full(&[2], 2.0), None).unwrap();
    store.set_trainable("text.", false);
    let mut g = Graph::new(&store);
    let (a, b) = (g.param(w), g.param(v));
    let p = g.mul(a, b).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    let ids: Vec<ParamId> = grads.params().map(|(id, _)| id).collect();
    assert_eq!(ids, vec![v]);
}

#[test]
fn elementwise_ops_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..6 {
        let rank = rng.random_range(1..=4);
        let shape = rand_shape(&mut rng, rank);
        // suffix broadcast for the second operand
        let tail = shape[rng.random_range(0..rank)..].to_vec();
        let shapes = vec![shape.clone(), tail];
        check_op(trial, &shapes, |g, v| g.add(v[0], v[1]));
        check_op(trial, &shapes, |g, v| g.sub(v[0], v[1]));
        check_op(trial, &shapes, |g, v| g.mul(v[0], v[1]));
        check_op(trial, &shapes, |g, v| {
            let d = g.square(v[1]);
            let d = g.add_scalar(d, 0.5)?;
            g.div(v[0], d)
        });
        for kind in [Unary::Exp, Unary::Silu, Unary::Gelu, Unary::Softplus, Unary::Tanh, Unary::Square] {
            check_op(trial, &[shape.clone()], |g, v| Ok(g.unary(v[0], kind)));
        }
        check_op(trial, &[shape.clone()], |g, v| {
            let s = g.square(v[0]);
            let s = g.add_scalar(s, 0.3)?;
            let l = g.log(s);
            let r = g.sqrt(s);
            g.add(l, r)
        });
    }
}

#[test]
fn structural_ops_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..5 {
        let rank = rng.random_range(2..=4);
        let shape = rand_shape(&mut rng, rank);
        let axis = rng.random_range(0..rank);
        check_op(trial, &[shape.clone()], |g, v| g.sum_axis(v[0], axis));
        check_op(trial, &[shape.clone()], |g, v| g.mean_axis(v[0], axis));
        check_op(trial, &[shape.clone()], |g, v| Ok(g.mean(v[0])));
        check_op(trial, &[shape.clone()], |g, v| g.transpose_last2(v[0]));
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.rotate_left(1);
        check_op(trial, &[shape.clone()], |g, v| g.permute(v[0], &perm));
        let mut other = shape.clone();
        other[axis] = rng.random_range(1..=3);
        check_op(trial, &[shape.clone(), other], |g, v| g.concat(&[v[0], v[1], v[0]], axis));
        let len = shape[axis];
        let start = rng.random_range(0..len);
        check_op(trial, &[shape.clone()], |g, v| g.slice(v[0], axis, start, len - start));
        let total: usize = shape.iter().product();
        check_op(trial, &[shape.clone()], |g, v| g.reshape(v[0], &[total]));
        check_op(trial, &[shape.clone()], |g, v| g.layer_norm(v[0]));
        check_op(trial, &[shape.clone()], |g, v| g.softmax(v[0]));
        check_op(trial, &[shape.clone()], |g, v| g.log_softmax(v[0]));
    }
}

#[test]
fn linear_algebra_ops_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..5 {
        let (b, m, k, n) = (
            rng.random_range(1..=3),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        );
        check_op(trial, &[vec![m, k], vec![k, n]], |g, v| g.matmul(v[0], v[1]));
        check_op(trial, &[vec![b, m, k], vec![k, n]], |g, v| g.matmul(v[0], v[1]));
        check_op(trial, &[vec![b, 2, m, k], vec![b, 2, k, n]], |g, v| g.matmul(v[0], v[1]));
        let (t, cin, cout) = (rng.random_range(3..=7), rng.random_range(1..=3), rng.random_range(1..=3));
        for stride in [1, 2] {
            check_op(trial, &[vec![b, t, cin], vec![3, cin, cout]], |g, v| g.conv1d(v[0], v[1], stride, 1));
        }
        check_op(trial, &[vec![b, t, cin]], |g, v| g.upsample2(v[0]));
        check_op(trial, &[vec![5, cin]], |g, v| g.embedding(v[0], &[4, 0, 4, 2], &[2, 2]));
        let keep: Vec<bool> = (0..b * t).map(|i| i % t != 1 || t == 1).collect();
        let mask = KeyMask { keep, groups: b };
        check_op(trial, &[vec![b, 2, t]], |g, v| g.masked_softmax(v[0], Some(&mask)));
    }
}

#[test]
fn determinism_is_bitwise() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let w = store.add("w", rand_tensor(&mut rng, &[3, 4, 2]), None).unwrap();
        let x = rand_tensor(&mut rng, &[2, 9, 4]);
        let mut g = Graph::new(&store);
        let wv = g.param(w);
        let xv = g.constant(x);
        let y = g.conv1d(xv, wv, 2, 1).unwrap();
        let y = g.gelu(y);
        let s = g.mean(y);
        let grads = g.backward(s).unwrap();
        (g.value(y).clone(), grads.wrt(wv).unwrap().clone())
    };
    assert_eq!(run(), run());
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn broadcast_add_grad_sums_over_broadcast_axes(rows in 1usize..6, cols in 1usize..6) {
            let mut g = Graph::detached();
            let a = g.input(Tensor::zeros(&[rows, cols]));
            let b = g.input(Tensor::zeros(&[cols]));
            let y = g.add(a, b).unwrap();
            let s = g.sum(y);
            let grads = g.backward(s).unwrap();
            prop_assert!(grads.wrt(b).unwrap().data().iter().all(|&v| v == rows as f64));
            prop_assert!(grads.wrt(a).unwrap().data().iter().all(|&v| v == 1.0));
        }
    }
}
