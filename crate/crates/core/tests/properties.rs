use std::collections::BTreeSet;

use proptest::prelude::*;

use scannability::analytics::{design_with_intercept, ols};
use scannability::dataset::{split_by_user, target_mask, BBox, TargetType, TaskRecord, DEFAULT_SPLIT, PAGE_PX};
use scannability::evaluation::{bucketize, r2_cross, ranking_accuracy};
use scannability::features::{fit_norm, raw_numeric};
use scannability::model::{attention, pearson, AttentionVariant};
use scannability::service::{placements, GridSpec};
use scannability::tensor::{Graph, Tensor};

fn record(user: usize, i: usize, time: f64) -> TaskRecord {
    TaskRecord {
        page_id: format!("p{}", i % 7),
        screenshot: "p.png".into(),
        bbox: BBox::new((i * 37 % 900) as f64, (i * 53 % 900) as f64, 20.0 + (i % 50) as f64, 15.0 + (i % 30) as f64),
        target_type: TargetType::ALL[i % 5],
        n_candidates: 10 + (i % 90) as u32,
        user_id: format!("u{user}"),
        search_time_s: time,
        correct: true,
    }
}

fn records_for(users: &[usize]) -> Vec<TaskRecord> {
    let mut out = Vec::new();
    for (u, &n) in users.iter().enumerate() {
        for k in 0..n {
            out.push(record(u, out.len(), 1.0 + ((u * 31 + k * 17) % 89) as f64 / 10.0));
        }
    }
    out
}

#[test]
fn user_split_matches_reference_proportions() {
    let records = records_for(&vec![3; 1887]);
    let s = split_by_user(&records, DEFAULT_SPLIT, 0).unwrap();
    let counts = [s.train_users.len(), s.validation_users.len(), s.test_users.len()];
    let reference = [1520.0, 184.0, 183.0];
    for (c, r) in counts.iter().zip(reference) {
        assert!((*c as f64 / 1887.0 - r / 1887.0).abs() <= 0.005, "{counts:?}");
    }
    assert_eq!(s, split_by_user(&records, DEFAULT_SPLIT, 0).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_disjoint_and_covering(users in prop::collection::vec(1usize..6, 3..60), seed in any::<u64>()) {
        let records = records_for(&users);
        let s = split_by_user(&records, [0.6, 0.2, 0.2], seed).unwrap();
        prop_assert!(s.is_user_disjoint());
        let all: BTreeSet<String> = records.iter().map(|r| r.user_id.clone()).collect();
        let union: BTreeSet<String> = s.train_users.iter().chain(&s.validation_users).chain(&s.test_users).cloned().collect();
        prop_assert_eq!(all, union);
        prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), records.len());
        prop_assert!(!s.train.is_empty() && !s.validation.is_empty() && !s.test.is_empty());
    }

    #[test]
    fn bucketize_balances_and_orders(times in prop::collection::vec(0.0f64..10.0, 5..80), users in 1usize..5) {
        let ids: Vec<String> = (0..times.len()).map(|i| format!("u{}", i % users)).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let labels = bucketize(&times, &refs).unwrap();
        for u in 0..users {
            let idx: Vec<usize> = (0..times.len()).filter(|i| i % users == u).collect();
            if idx.len() < 5 {
                prop_assert!(idx.iter().all(|&i| labels[i].is_none()));
                continue;
            }
            let mut counts = [0usize; 5];
            for &i in &idx {
                counts[labels[i].unwrap()] += 1;
            }
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
            for &a in &idx {
                for &b in &idx {
                    if times[a] < times[b] {
                        prop_assert!(labels[a] <= labels[b]);
                    }
                }
            }
        }
    }

    #[test]
    fn ranking_is_symmetric(preds in prop::collection::vec(-5.0f64..5.0, 2..40), seed in 0u64..1000) {
        let truths: Vec<f64> = (0..preds.len()).map(|i| ((i as u64 * 7919 + seed) % 101) as f64).collect();
        prop_assume!(truths.iter().any(|t| *t != truths[0]));
        let up = ranking_accuracy(&preds, &truths).unwrap();
        let neg: Vec<f64> = preds.iter().map(|p| -p).collect();
        let down = ranking_accuracy(&neg, &truths).unwrap();
        prop_assert!((0.0..=1.0).contains(&up));
        prop_assert!((up + down - 1.0).abs() < 1e-12);
        prop_assert_eq!(ranking_accuracy(&truths, &truths).unwrap(), 1.0);
    }

    #[test]
    fn r2_is_one_only_for_exact_predictions(truths in prop::collection::vec(-5.0f64..5.0, 3..40), shift in 0.01f64..3.0) {
        prop_assume!(truths.iter().any(|t| (t - truths[0]).abs() > 1e-6));
        prop_assert_eq!(r2_cross(&truths, &truths).unwrap(), 1.0);
        let off: Vec<f64> = truths.iter().map(|t| t + shift).collect();
        prop_assert!(r2_cross(&off, &truths).unwrap() < 1.0);
    }

    #[test]
    fn ols_recovers_exact_linear_models(beta in prop::collection::vec(-3.0f64..3.0, 3), n in 10usize..60) {
        let x1: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let x2: Vec<f64> = (0..n).map(|i| (i as f64 * 1.13).cos() + i as f64 / n as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| beta[0] + beta[1] * x1[i] + beta[2] * x2[i]).collect();
        let fit = ols(&design_with_intercept(&[x1, x2]), &y, &["intercept", "a", "b"]).unwrap();
        for (got, want) in fit.coefficients.iter().zip(&beta) {
            prop_assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn pearson_is_bounded_and_scale_free(a in prop::collection::vec(-10.0f32..10.0, 2..50), k in 0.1f32..10.0) {
        let b: Vec<f32> = a.iter().enumerate().map(|(i, v)| v * 0.5 + (i as f32).sin()).collect();
        let r = pearson(&a, &b);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&r));
        let scaled: Vec<f32> = a.iter().map(|v| v * k).collect();
        prop_assert!((pearson(&scaled, &b) - r).abs() < 1e-4);
    }

    #[test]
    fn mask_covers_the_target(x in 0.0f64..900.0, y in 0.0f64..900.0, w in 15.0f64..120.0, h in 15.0f64..120.0, grid in prop::sample::select(vec![8usize, 16, 64])) {
        let b = BBox::new(x, y, w, h);
        let m = target_mask(&b, grid).unwrap();
        prop_assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let (cx, cy) = b.center();
        let cell = f64::from(PAGE_PX) / grid as f64;
        let (i, j) = ((cy / cell) as usize, (cx / cell) as usize);
        prop_assert_eq!(m.data()[i * grid + j], 1.0);
    }

    #[test]
    fn norm_round_trips(seed in 0u64..500) {
        let records = records_for(&[4, 5, 6, 3]);
        let norm = fit_norm(&records, "all").unwrap();
        let r = &records[(seed % records.len() as u64) as usize];
        let raw = raw_numeric(&r.bbox, r.n_candidates);
        let back = norm.unstandardize(&norm.standardize(&raw));
        for (a, b) in raw.iter().zip(back) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
        let t = r.search_time_s;
        prop_assert!((norm.denormalize_time(norm.normalize_time(t)) - t).abs() < 1e-9);
    }

    #[test]
    fn placements_stay_on_the_page(rows in 1usize..8, cols in 1usize..8, w in 15.0f64..400.0, h in 15.0f64..400.0) {
        let grid = GridSpec { rows, cols, region: None, target_w: None, target_h: None };
        let cells = placements(&grid, w, h).unwrap();
        prop_assert_eq!(cells.len(), rows);
        for row in &cells {
            prop_assert_eq!(row.len(), cols);
            for b in row {
                prop_assert!(b.check_bounds().is_ok());
            }
        }
        for c in 0..cols {
            for r in 1..rows {
                prop_assert!(cells[r][c].y >= cells[r - 1][c].y);
            }
        }
    }

    #[test]
    fn raw_attention_is_bilinear(k in -3.0f64..3.0, seed in 0u64..1000) {
        let page = Tensor::from_fn(&[1, 3, 3, 4], |i| ((i as u64 * 2654435761 + seed) % 97) as f64 / 50.0 - 1.0);
        let target = Tensor::from_fn(&[1, 1, 1, 4], |i| (i as f64 + seed as f64).cos());
        let run = |p: Tensor<f64>| {
            let mut g = Graph::<f64>::new();
            let pv = g.constant(p);
            let tv = g.constant(target.clone());
            let (a, _) = attention(&mut g, pv, tv, AttentionVariant::Raw, false).unwrap();
            g.value(a).data().to_vec()
        };
        let base = run(page.clone());
        let scaled = run(page.map(|v| v * k));
        for (a, b) in base.iter().zip(scaled) {
            prop_assert!((a * k - b).abs() < 1e-12);
        }
    }
}
