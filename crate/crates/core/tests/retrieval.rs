use mcrlab_core::evaluation::{
    brute_force_from_scores, brute_force_recall, grouped_recall, query_credits, recall_at_k, recall_from_scores,
    topk_dump, Direction, GroupSpec, RetrievalIndex,
};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_unit(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let mut m = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f32..1.0));
    for mut row in m.axis_iter_mut(Axis(0)) {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    m
}

/// Reports own between one and three images each.
fn multi_view_owner(n_reports: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut owner = Vec::new();
    for r in 0..n_reports {
        for _ in 0..rng.random_range(1..=3) {
            owner.push(r);
        }
    }
    owner
}

#[test]
fn fast_recall_matches_brute_force_on_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for n in [10, 50, 100] {
        let owner = multi_view_owner(n, &mut rng);
        let images = random_unit(owner.len(), 8, &mut rng);
        let reports = random_unit(n, 8, &mut rng);
        let views = vec![0; owner.len()];
        let ids = (0..n).map(|i| format!("r{i}")).collect();
        let index = RetrievalIndex::new(images, owner, views, reports, ids).unwrap();
        for d in Direction::BOTH {
            for k in [1, 5, 10] {
                let fast = recall_at_k(&index, d, k).unwrap();
                let slow = brute_force_recall(&index, d, k).unwrap();
                assert_eq!(fast, slow, "n={n} {d:?} K={k}");
            }
        }
    }
}

#[test]
fn identity_similarity_gives_full_recall() {
    let eye = Array2::<f32>::eye(6);
    let index = RetrievalIndex::paired(eye.clone(), eye).unwrap();
    for d in Direction::BOTH {
        assert_eq!(recall_at_k(&index, d, 1).unwrap(), 100.0);
        assert_eq!(brute_force_recall(&index, d, 1).unwrap(), 100.0);
    }
}

#[test]
fn equal_similarities_rank_by_index() {
    let scores = Array2::<f64>::from_elem((4, 4), 0.5);
    let owner = vec![0, 1, 2, 3];
    for d in Direction::BOTH {
        // Only query 0 has its match at the front of the tie order.
        assert_eq!(recall_from_scores(scores.view(), &owner, d, 1).unwrap(), 25.0);
        assert_eq!(brute_force_from_scores(scores.view(), &owner, d, 1).unwrap(), 25.0);
        assert_eq!(recall_from_scores(scores.view(), &owner, d, 2).unwrap(), 50.0);
    }
}

#[test]
fn report_with_three_images_gets_partial_credit() {
    // Report 0 owns images 0, 1, 2; images 3..7 belong to reports 1..4.
    let owner = vec![0, 0, 0, 1, 2, 3, 4];
    let mut scores = Array2::<f64>::zeros((7, 5));
    // Column 0 ranking: 3, 0, 4, 1, 5, 6, 2 -> two own images in the top 5.
    let col0 = [0.8, 0.5, -0.9, 0.9, 0.6, 0.1, 0.0];
    for (i, v) in col0.iter().enumerate() {
        scores[[i, 0]] = *v;
    }
    let credits = query_credits(scores.view(), &owner, Direction::ReportToImage, 5).unwrap();
    assert!((credits[0] - 2.0 / 3.0).abs() < 1e-15);
    let slow = brute_force_from_scores(scores.view(), &owner, Direction::ReportToImage, 5).unwrap();
    let fast = recall_from_scores(scores.view(), &owner, Direction::ReportToImage, 5).unwrap();
    assert_eq!(fast, slow);
}

#[test]
fn min_rule_caps_denominator_at_k() {
    let owner = vec![0, 0, 0, 1];
    let mut scores = Array2::<f64>::zeros((4, 2));
    scores[[0, 0]] = 1.0;
    let credits = query_credits(scores.view(), &owner, Direction::ReportToImage, 1).unwrap();
    assert_eq!(credits[0], 1.0);
}

#[test]
fn random_similarities_sit_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 50;
    let owner: Vec<usize> = (0..n).collect();
    let trials = 200;
    let mut sum = 0.0;
    for _ in 0..trials {
        let scores = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
        sum += recall_from_scores(scores.view(), &owner, Direction::ImageToReport, 1).unwrap();
    }
    let mean = sum / trials as f64;
    assert!((mean - 2.0).abs() < 1.0, "mean R@1 {mean}");
}

#[test]
fn oversized_k_is_clamped_and_zero_rejected() {
    let eye = Array2::<f32>::eye(3);
    let index = RetrievalIndex::paired(eye.clone(), eye).unwrap();
    assert_eq!(recall_at_k(&index, Direction::ImageToReport, 10).unwrap(), 100.0);
    assert!(recall_at_k(&index, Direction::ImageToReport, 0).is_err());
}

#[test]
fn unknown_owner_is_rejected() {
    let eye = Array2::<f32>::eye(2);
    let err = RetrievalIndex::new(eye.clone(), vec![0, 5], vec![0, 0], eye, vec!["a".into(), "b".into()]);
    assert!(err.is_err());
}

#[test]
fn grouped_recall_partitions_and_averages() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 40;
    let owner = multi_view_owner(n, &mut rng);
    let images = random_unit(owner.len(), 6, &mut rng);
    let reports = random_unit(n, 6, &mut rng);
    let ids = (0..n).map(|i| format!("r{i}")).collect();
    let index = RetrievalIndex::new(images, owner.clone(), vec![0; owner.len()], reports, ids).unwrap();
    let sentences: Vec<usize> = (0..n).map(|_| rng.random_range(1..=14)).collect();
    let ks = [1, 5];
    let table = grouped_recall(&index, &sentences, &GroupSpec::default(), &ks).unwrap();
    assert_eq!(table.iter().map(|g| g.n_reports).sum::<usize>(), n);
    assert_eq!(table.iter().map(|g| g.n_images).sum::<usize>(), owner.len());
    for d in Direction::BOTH {
        for &k in &ks {
            let overall = recall_at_k(&index, d, k).unwrap();
            let (mut acc, mut total) = (0.0, 0usize);
            for g in &table {
                let size = match d {
                    Direction::ImageToReport => g.n_images,
                    Direction::ReportToImage => g.n_reports,
                };
                let v = g.recalls.iter().find(|(gd, gk, _)| *gd == d && *gk == k).unwrap().2;
                if let Some(v) = v {
                    acc += v * size as f64;
                }
                total += size;
            }
            assert!((acc / total as f64 - overall).abs() < 1e-9);
        }
    }
}

#[test]
fn single_sentence_reports_fill_only_the_first_group() {
    let eye = Array2::<f32>::eye(3);
    let index = RetrievalIndex::paired(eye.clone(), eye).unwrap();
    let table = grouped_recall(&index, &[1, 1, 1], &GroupSpec::default(), &[1]).unwrap();
    assert_eq!(table[0].n_reports, 3);
    assert_eq!(table[1].n_reports, 0);
    assert_eq!(table[2].n_reports, 0);
    assert!(table[1].recalls.iter().all(|r| r.2.is_none()));
    assert_eq!(GroupSpec::default().group_of(12), 2);
}

#[test]
fn topk_dump_ranks_and_rescores() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images = random_unit(5, 4, &mut rng);
    let reports = random_unit(5, 4, &mut rng);
    let texts: Vec<String> = (0..5).map(|i| format!("report {i}")).collect();
    let index = RetrievalIndex::paired(images.clone(), reports.clone()).unwrap();
    let dump = topk_dump(&index, &texts, Direction::ImageToReport, "s00002", 0, 3).unwrap();
    assert_eq!(dump.entries.len(), 3);
    assert!(dump.paired_rank >= 1 && dump.paired_rank <= 5);
    for e in &dump.entries {
        let r = index.report_position(&e.study_id).unwrap();
        let sim: f64 = images.row(2).iter().zip(reports.row(r)).map(|(a, b)| *a as f64 * *b as f64).sum();
        assert!((sim - e.similarity).abs() < 1e-12);
        assert_eq!(e.report, texts[r]);
    }
    let one = RetrievalIndex::paired(images.slice(ndarray::s![..1, ..]).to_owned(), reports.slice(ndarray::s![..1, ..]).to_owned()).unwrap();
    let d = topk_dump(&one, &["only"], Direction::ReportToImage, "s00000", 0, 1).unwrap();
    assert_eq!(d.entries[0].study_id, "s00000");
    assert_eq!(d.paired_rank, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn recall_is_monotone_in_k_and_full_at_n(seed in 0u64..10_000, n in 2usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let owner = multi_view_owner(n, &mut rng);
        // Coarse values force frequent ties.
        let scores = Array2::from_shape_fn((owner.len(), n), |_| rng.random_range(0..4) as f64);
        for d in Direction::BOTH {
            let mut last = 0.0;
            for k in 1..=owner.len().max(n) {
                let r = recall_from_scores(scores.view(), &owner, d, k).unwrap();
                prop_assert_eq!(r, brute_force_from_scores(scores.view(), &owner, d, k).unwrap());
                if d == Direction::ImageToReport {
                    prop_assert!(r >= last);
                }
                last = r;
            }
        }
        prop_assert_eq!(recall_from_scores(scores.view(), &owner, Direction::ImageToReport, n).unwrap(), 100.0);
    }

    #[test]
    fn single_view_recall_is_monotone_both_ways(seed in 0u64..10_000, n in 2usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let owner: Vec<usize> = (0..n).collect();
        let scores = Array2::from_shape_fn((n, n), |_| rng.random_range(0..4) as f64);
        for d in Direction::BOTH {
            let mut last = 0.0;
            for k in 1..=n {
                let r = recall_from_scores(scores.view(), &owner, d, k).unwrap();
                prop_assert!(r >= last);
                last = r;
            }
            prop_assert_eq!(last, 100.0);
        }
    }
}

#[test]
fn min_rule_can_lower_report_recall_as_k_grows() {
    // Own images rank 1st and 3rd: credit 1/1 at K=1, 1/2 at K=2, 2/2 at K=3.
    let owner = vec![0, 0, 1];
    let mut scores = Array2::<f64>::zeros((3, 2));
    scores[[0, 0]] = 0.9;
    scores[[2, 0]] = 0.5;
    scores[[1, 0]] = 0.1;
    let c = |k| query_credits(scores.view(), &owner, Direction::ReportToImage, k).unwrap()[0];
    assert_eq!((c(1), c(2), c(3)), (1.0, 0.5, 1.0));
}
