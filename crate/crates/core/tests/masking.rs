use mcrlab_core::config::ExperimentConfig;
use mcrlab_core::masking::{mask_count, sample_mask, MaskPlan};
use mcrlab_core::objectives::{mim_loss, mrm_loss};
use mcrlab_core::rng::{purpose, stream};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn counts_at_default_shapes() {
    let cfg = ExperimentConfig::default();
    let n = cfg.num_patches();
    assert_eq!(mask_count(n, cfg.image_mask_rate), n / 2);
    assert_eq!(mask_count(10, 0.05), 1);
    assert_eq!(mask_count(10, 0.99), 9);
    assert_eq!(mask_count(2, 0.5), 1);
    assert_eq!(mask_count(7, 0.5), 3);
}

#[test]
fn every_index_is_masked_half_the_time() {
    let n = ExperimentConfig::default().num_patches();
    let draws = 10_000;
    let mut rng = stream(17, &[purpose::MASK, 0]);
    let mut hits = vec![0usize; n];
    for _ in 0..draws {
        for i in sample_mask(n, 0.5, &mut rng).unwrap() {
            hits[i] += 1;
        }
    }
    for (i, h) in hits.iter().enumerate() {
        let f = *h as f64 / draws as f64;
        assert!((f - 0.5).abs() <= 0.02, "index {i} masked with frequency {f}");
    }
}

#[test]
fn image_reconstruction_ignores_visible_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 16;
    let pred = Array2::from_shape_fn((n, 12), |_| rng.random_range(-1.0..1.0));
    let target = Array2::from_shape_fn((n, 12), |_| rng.random_range(-1.0..1.0));
    let masked = sample_mask(n, 0.5, &mut rng).unwrap();
    let base = mim_loss(pred.view(), target.view(), &masked).unwrap();
    let mut moved = pred.clone();
    for i in (0..n).filter(|i| !masked.contains(i)) {
        moved.row_mut(i).mapv_inplace(|x| x + 1e3 * (i as f64 + 1.0));
    }
    let after = mim_loss(moved.view(), target.view(), &masked).unwrap();
    assert!((after - base).abs() <= 1e-12);
}

#[test]
fn report_reconstruction_ignores_unmasked_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (len, vocab) = (10, 20);
    let logits = Array2::from_shape_fn((len, vocab), |_| rng.random_range(-3.0..3.0));
    let plan = MaskPlan::sample(4, 0.5, len - 2, 0.25, &mut rng).unwrap();
    let masked: Vec<(usize, u32)> = plan.text_masked_idx.iter().map(|&p| (p, (p * 3 % vocab) as u32)).collect();
    let base = mrm_loss(logits.view(), &masked).unwrap();
    let mut moved = logits.clone();
    for p in (0..len).filter(|p| !plan.text_masked_idx.contains(p)) {
        moved.row_mut(p).mapv_inplace(|x| -5.0 * x + 7.0);
    }
    let after = mrm_loss(moved.view(), &masked).unwrap();
    assert!((after - base).abs() <= 1e-12);
}

proptest! {
    #[test]
    fn sampled_masks_have_the_clamped_size(n in 2usize..300, rate in 0.01f64..0.99, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample_mask(n, rate, &mut rng).unwrap();
        let expected = ((rate * n as f64).floor() as usize).clamp(1, n - 1);
        prop_assert_eq!(idx.len(), expected);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
    }

    #[test]
    fn text_positions_stay_inside_the_body(body in 0usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = MaskPlan::sample(8, 0.5, body, 0.25, &mut rng).unwrap();
        if body < 2 {
            prop_assert!(plan.text_masked_idx.is_empty());
        } else {
            prop_assert!(plan.text_masked_idx.iter().all(|&p| p >= 1 && p <= body));
            prop_assert_eq!(plan.text_masked_idx.len(), mask_count(body, 0.25));
        }
        let kept = plan.kept_positions();
        prop_assert_eq!(kept.len() + plan.image_masked_idx.len(), 8);
    }
}
