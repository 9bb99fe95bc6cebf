mod common;

use proptest::prelude::*;

use common::*;
use wavegan::eval::metrics::fid_from_embeddings;
use wavegan::losses::frequency_l1;
use wavegan::train::{lr_schedule, TrainConfig};
use wavegan::{haar_decompose, haar_reconstruct};

fn image() -> impl Strategy<Value = (Vec<usize>, Vec<f64>)> {
    (1usize..3, 1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(n, c, h, w)| {
        let dims = vec![n, c, 2 * h, 2 * w];
        let len = n * c * 4 * h * w;
        (Just(dims), prop::collection::vec(-4.0f64..4.0, len))
    })
}

fn pair() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    image().prop_flat_map(|(dims, a)| {
        let len = a.len();
        (
            Just(dims),
            Just(a),
            prop::collection::vec(-4.0f64..4.0, len),
            prop::collection::vec(-4.0f64..4.0, len),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decompose_matches_oracle_and_inverts((dims, x) in image()) {
        let t = tensor(x.clone(), &dims);
        let bands = haar_decompose(&t).unwrap();
        let oracle = haar_oracle(&x, dims[0], dims[1], dims[2], dims[3]);
        for (got, want) in [&bands.ll, &bands.lh, &bands.hl, &bands.hh].iter().zip(&oracle) {
            prop_assert!(max_abs_diff(&values(got), want) < 1e-12);
        }
        let back = values(&haar_reconstruct(&bands).unwrap());
        prop_assert!(max_abs_diff(&back, &x) < 1e-12);
        let ex: f64 = x.iter().map(|v| v * v).sum();
        let eb: f64 = oracle.iter().flatten().map(|v| v * v).sum();
        prop_assert!((ex - eb).abs() <= 1e-9 * ex.max(1.0));
    }

    #[test]
    fn decompose_is_linear((dims, a, b, _) in pair(), s in -3.0f64..3.0) {
        let mixed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| s * x + y).collect();
        let bm = haar_decompose(&tensor(mixed, &dims)).unwrap();
        let ba = haar_decompose(&tensor(a, &dims)).unwrap();
        let bb = haar_decompose(&tensor(b, &dims)).unwrap();
        for (m, (x, y)) in [&bm.ll, &bm.lh, &bm.hl, &bm.hh].iter().zip([&ba.ll, &ba.lh, &ba.hl, &ba.hh].iter().zip([&bb.ll, &bb.lh, &bb.hl, &bb.hh])) {
            let want: Vec<f64> = values(x).iter().zip(values(y)).map(|(p, q)| s * p + q).collect();
            prop_assert!(max_abs_diff(&values(m), &want) < 1e-10);
        }
    }

    #[test]
    fn frequency_l1_is_a_metric((dims, a, b, c) in pair()) {
        let d = |x: &[f64], y: &[f64]| {
            let v = frequency_l1(&tensor(x.to_vec(), &dims), &tensor(y.to_vec(), &dims)).unwrap();
            scalar(&v)
        };
        prop_assert!(d(&a, &a).abs() < 1e-12);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
    }

    #[test]
    fn fid_is_symmetric(seed in 0u64..1000) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Vec<f64>> = (0..12).map(|_| random_values(&mut rng, 4, 1.0)).collect();
        let b: Vec<Vec<f64>> = (0..12).map(|_| random_values(&mut rng, 4, 2.0)).collect();
        let ab = fid_from_embeddings(&a, &b, 1e-6).unwrap().fid;
        let ba = fid_from_embeddings(&b, &a, 1e-6).unwrap().fid;
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0));
    }

    #[test]
    fn lr_never_increases(iterations in 2usize..5000, frac in 0.0f64..1.0, lr in 1e-6f64..1e-2) {
        let cfg = TrainConfig {
            iterations,
            lr,
            decay_start_iteration: Some((frac * iterations as f64) as usize),
            ..Default::default()
        };
        let mut prev = f64::INFINITY;
        for step in 0..iterations {
            let now = lr_schedule(step, &cfg);
            prop_assert!(now <= prev && now >= 0.0 && now <= lr);
            prev = now;
        }
    }
}
