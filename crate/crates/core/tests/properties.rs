use anchordiff::anchors::zeta;
use anchordiff::diffkernel::{Graph, ParamStore, Tensor};
use anchordiff::diffusion::{cfg_combine, forward_diffuse, make_schedule, sampling_timesteps};
use anchordiff::moclip::contrastive_loss;
use anchordiff::motiondata::{split, MotionClip, NormStats, SplitRatios};
use anchordiff::spectral::{dct2_forward, dct2_inverse, dct_truncate};
use proptest::prelude::*;

fn signal(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dct_round_trips_and_preserves_energy(x in signal(130)) {
        let c = dct2_forward(&x).unwrap();
        let back = dct2_inverse(&c).unwrap();
        let scale = x.iter().map(|v| v.abs()).fold(1.0, f64::max);
        for (a, b) in x.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9 * scale);
        }
        let e0: f64 = x.iter().map(|v| v * v).sum();
        let e1: f64 = c.iter().map(|v| v * v).sum();
        prop_assert!((e0 - e1).abs() < 1e-9 * e0.max(1.0));
    }

    #[test]
    fn full_length_truncation_is_lossless(frames in 1usize..40, dims in 1usize..5, seed in 0u64..1000) {
        let data: Vec<f64> = (0..frames * dims).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 100.0 - 5.0).collect();
        let clip = MotionClip::new("p", 20.0, frames, dims, data.clone()).unwrap();
        let rec = dct_truncate(&clip, frames).unwrap().reconstruct(frames).unwrap();
        for (a, b) in rec.data().iter().zip(&data) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_inverts(rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..30)) {
        let frames = rows.len();
        let clip = MotionClip::new("n", 20.0, frames, 3, rows.concat()).unwrap();
        let stats = NormStats::fit([&clip]).unwrap();
        let back = stats.denormalize(&stats.normalize(&clip));
        for (a, b) in back.values().iter().zip(clip.values()) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive(n in 4usize..500, seed in any::<u64>()) {
        let s = split(n, &SplitRatios::default(), seed).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert!((s.val.len() as f64 - 0.15 * n as f64).abs() <= 1.0);
        prop_assert!((s.test.len() as f64 - 0.05 * n as f64).abs() <= 1.0);
    }

    #[test]
    fn annealing_is_monotone(n_decay in 1u64..5000, a in 0u64..6000, b in 0u64..6000) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (z_lo, z_hi) = (zeta(lo, n_decay).unwrap(), zeta(hi, n_decay).unwrap());
        prop_assert!(z_hi <= z_lo);
        prop_assert!((0.0..=1.0).contains(&z_lo));
    }

    #[test]
    fn guidance_is_affine(u in signal(20), omega in -3.0f64..6.0) {
        let c: Vec<f64> = u.iter().map(|v| v * 0.5 + 1.0).collect();
        let out = cfg_combine(&u, &c, omega).unwrap();
        let at_one = cfg_combine(&u, &c, 1.0).unwrap();
        let at_zero = cfg_combine(&u, &c, 0.0).unwrap();
        for i in 0..u.len() {
            prop_assert!((at_one[i] - c[i]).abs() < 1e-12);
            prop_assert!((at_zero[i] - u[i]).abs() < 1e-12);
            prop_assert!((out[i] - (u[i] + omega * (c[i] - u[i]))).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_diffusion_scales_the_clean_sample(x in signal(20), t in 1usize..=1000) {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let out = forward_diffuse(&x, t, &vec![0.0; x.len()], &s).unwrap();
        let k = s.alpha_bar(t).sqrt();
        for (o, v) in out.iter().zip(&x) {
            prop_assert!((o - k * v).abs() < 1e-12);
        }
    }

    #[test]
    fn sampler_visits_a_decreasing_chain(t in 1usize..1200, stride in 1usize..60) {
        let ts = sampling_timesteps(t, stride).unwrap();
        prop_assert_eq!(ts[0], t);
        prop_assert_eq!(*ts.last().unwrap(), 1);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn contrastive_loss_is_symmetric(vals in prop::collection::vec(-1.0f64..1.0, 24), tau in 0.05f64..2.0) {
        let m = Tensor::new(&[4, 3], vals[..12].to_vec()).unwrap();
        let t = Tensor::new(&[4, 3], vals[12..].to_vec()).unwrap();
        let store = ParamStore::new();
        let loss = |a: &Tensor, b: &Tensor| {
            let mut g = Graph::inference(&store);
            let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
            let lt = g.scalar(tau.ln());
            let l = contrastive_loss(&mut g, a, b, lt).unwrap();
            g.scalar_value(l)
        };
        let (ab, ba) = (loss(&m, &t), loss(&t, &m));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(ab >= 0.0);
    }
}
