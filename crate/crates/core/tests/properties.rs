use proptest::prelude::*;

use gmcml::eval::{nn_classify, pca_project};
use gmcml::generative::{loss_enc, LatentGaussian};
use gmcml::losses::loss_softmax;
use gmcml::noise::corrupt_with;
use gmcml::tensor::{finite_diff_check_multi, Tensor};
use gmcml::trainer::checkpoint::Sections;

fn vec_of(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_non_negative(pairs in prop::collection::vec((-5.0f64..5.0, -8.0f64..8.0), 1..12)) {
        let g = LatentGaussian {
            mu: pairs.iter().map(|p| p.0).collect(),
            log_var: pairs.iter().map(|p| p.1).collect(),
        };
        prop_assert!(loss_enc(&g) >= -1e-12);
    }

    #[test]
    fn softmax_is_non_negative_and_shift_invariant(
        logits in vec_of(6, -30.0, 30.0),
        label in 0usize..6,
        shift in -100.0f64..100.0,
    ) {
        let a = loss_softmax(&logits, label).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let b = loss_softmax(&shifted, label).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn corruption_stays_in_range_and_hits_endpoints(
        x in vec_of(12, 0.0, 1.0),
        field in vec_of(12, 0.0, 1.0),
        ratio in 0.0f64..=1.0,
    ) {
        let xt = Tensor::new(vec![3, 2, 2], x).unwrap();
        let ft = Tensor::new(vec![3, 2, 2], field).unwrap();
        let out = corrupt_with(&xt, ratio, &ft).unwrap();
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(corrupt_with(&xt, 0.0, &ft).unwrap(), xt.clone());
        let full = corrupt_with(&xt, 1.0, &ft).unwrap();
        for (a, b) in full.data().iter().zip(ft.data()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nn_picks_a_nearest_gallery_entry(
        gallery in prop::collection::vec((vec_of(3, -2.0, 2.0), 0usize..4), 1..20),
        query in vec_of(3, -2.0, 2.0),
    ) {
        let label = nn_classify(&gallery, &query).unwrap();
        let d = |v: &[f64]| v.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = gallery.iter().map(|(v, _)| d(v)).fold(f64::INFINITY, f64::min);
        let winners: Vec<usize> = gallery.iter().filter(|(v, _)| d(v) == best).map(|(_, l)| *l).collect();
        prop_assert_eq!(label, *winners.iter().min().unwrap());
    }

    #[test]
    fn pca_projection_is_centered(data in prop::collection::vec(vec_of(4, -3.0, 3.0), 6..20)) {
        if let Ok(p) = pca_project(&data, 2) {
            for dim in 0..2 {
                let mean = p.iter().map(|r| r[dim]).sum::<f64>() / p.len() as f64;
                prop_assert!(mean.abs() < 1e-9);
            }
            let var = |dim: usize| p.iter().map(|r| r[dim] * r[dim]).sum::<f64>();
            prop_assert!(var(0) + 1e-9 >= var(1));
        }
    }

    #[test]
    fn checkpoint_sections_round_trip(
        entries in prop::collection::btree_map("[a-z_]{1,12}", prop::collection::vec(any::<u8>(), 0..64), 0..6),
    ) {
        let mut s = Sections::new();
        for (k, v) in &entries {
            s.insert(k, v.clone());
        }
        let back = Sections::from_bytes(&s.to_bytes()).unwrap();
        for (k, v) in &entries {
            prop_assert_eq!(back.get(k).unwrap(), &v[..]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_block_gradients_match_finite_differences(
        c_in in 1usize..4,
        c_out in 1usize..4,
        side in 3usize..6,
        stride in 1usize..3,
        pad in 0usize..2,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        prop_assume!((side + 2 * pad - 3) % stride == 0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let at = [t(vec![2, c_in, side, side]), t(vec![c_out, c_in, 3, 3]), t(vec![c_out])];
        let r = finite_diff_check_multi(
            |tape, v| {
                let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
                let y = tape.tanh(y)?;
                let y = tape.square(y)?;
                tape.sum(y)
            },
            &at,
            1e-6,
            None,
        )
        .unwrap();
        prop_assert!(r.max_rel_error < 1e-5, "{:?}", r);
    }
}
