use maskconnect::connectivity::{aggregate, sample_without_replacement, Adapter, MaskState};
use maskconnect::data::{augment, AUGMENT_PAD};
use maskconnect::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn refs(v: &[Tensor]) -> Vec<&Tensor> {
    v.iter().collect()
}

fn mask_case() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2usize..=16).prop_flat_map(|e| (prop::collection::vec(0.0f64..=1.0, e), 1..=e))
}

proptest! {
    #[test]
    fn sampled_masks_have_exactly_k_ones((real, k) in mask_case(), seed in any::<u64>()) {
        let e = real.len();
        let mut m = MaskState::from_parts(real, vec![false; e], k, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..4 {
            prop_assert_eq!(m.sample_binary(&mut rng).iter().filter(|&&b| b).count(), k);
        }
    }

    #[test]
    fn sampled_indices_are_distinct_and_in_range((real, k) in mask_case(), seed in any::<u64>()) {
        let total: f64 = real.iter().sum();
        let probs: Vec<f64> = if total > 0.0 { real.iter().map(|r| r / total).collect() } else { real.clone() };
        let mut idx = sample_without_replacement(&probs, k, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(idx.len(), k);
        idx.sort_unstable();
        idx.dedup();
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.iter().all(|&i| i < real.len()));
    }

    #[test]
    fn updates_stay_in_unit_interval(
        (real, k) in mask_case(),
        steps in prop::collection::vec((prop::collection::vec(-50.0f64..50.0, 16), 0.0f64..2.0), 1..20),
    ) {
        let e = real.len();
        let mut m = MaskState::from_parts(real, vec![false; e], k, false).unwrap();
        for (g, lr) in steps {
            m.update(&g[..e], lr).unwrap();
            prop_assert!(m.real().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn top_k_keeps_the_largest((real, k) in mask_case()) {
        let e = real.len();
        let m = MaskState::from_parts(real.clone(), vec![false; e], k, false).unwrap();
        let top = m.top_k();
        prop_assert_eq!(top.iter().filter(|&&b| b).count(), k);
        let min_in = (0..e).filter(|&i| top[i]).map(|i| real[i]).fold(f64::INFINITY, f64::min);
        let max_out = (0..e).filter(|&i| !top[i]).map(|i| real[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_in >= max_out);
    }

    #[test]
    fn aggregation_is_linear_in_the_producers(
        mask in prop::collection::vec(any::<bool>(), 1..6).prop_filter("one active", |m| m.contains(&true)),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Tensor> = mask.iter().map(|_| Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng)).collect();
        let b: Vec<Tensor> = mask.iter().map(|_| Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng)).collect();
        let adapters = vec![Adapter::between(&[1, 3, 4, 4], &[1, 3, 4, 4]).unwrap(); mask.len()];
        let ab: Vec<Tensor> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| Tensor::from_vec(x.shape(), x.data().iter().zip(y.data()).map(|(p, q)| 2.0 * p - q).collect()).unwrap())
            .collect();
        let sa = aggregate(&mask, &refs(&a), &adapters, None).unwrap();
        let sb = aggregate(&mask, &refs(&b), &adapters, None).unwrap();
        let sab = aggregate(&mask, &refs(&ab), &adapters, None).unwrap();
        for ((x, y), z) in sa.data().iter().zip(sb.data()).zip(sab.data()) {
            prop_assert!((2.0 * x - y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_only_moves_pixels(seed in any::<u64>(), h in 4usize..12, w in 4usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::uniform(&[2 * h * w], 0.5, 1.0, &mut rng).into_data();
        let out = augment(&img, [2, h, w], &mut rng);
        prop_assert_eq!(out.len(), img.len());
        let zeros = out.iter().filter(|&&v| v == 0.0).count();
        // at most AUGMENT_PAD rows and columns of padding enter the crop
        prop_assert!(zeros <= 2 * (AUGMENT_PAD * w + AUGMENT_PAD * h));
        for v in out.iter().filter(|&&v| v != 0.0) {
            prop_assert!(img.contains(v));
        }
    }
}
