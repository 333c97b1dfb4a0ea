use std::collections::BTreeMap;

use proptest::prelude::*;
use subaudit::calibration::{cusum_statistic, monte_carlo_pvalue, simulate_null, Direction};
use subaudit::data::{
    design_matrix, matching_rows, read_dataset, stratify, AttributeKind, AttributeValue, AuditDataset, AuditRecord,
    FeatureBlocks, FeatureMatrix, SubgroupFilter,
};
use subaudit::residual::{
    expanded_width, fit_klr, gradient, objective, polynomial_expand, predict_event_rate, ResidualModelConfig,
};
use subaudit::roc::{auroc, confusion_at, delong_correlated, operating_threshold, SignificanceBand};
use subaudit::synth::brute_force_auc;

fn labelled(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (4..max).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..20).prop_map(|k| k as f64 / 20.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both classes", |(_, y)| y.iter().any(|&b| b) && y.iter().any(|&b| !b))
    })
}

fn record(i: usize, outcome: bool, score: f64, sex: &str, age: f64) -> AuditRecord {
    let mut attributes = BTreeMap::new();
    attributes.insert("sex".to_string(), AttributeValue::Categorical(sex.into()));
    attributes.insert("age".to_string(), AttributeValue::Numeric(age));
    AuditRecord {
        id: format!("r{i}"),
        outcome,
        score,
        other_scores: BTreeMap::new(),
        attributes,
        embedding: None,
    }
}

fn schema() -> BTreeMap<String, AttributeKind> {
    let mut s = BTreeMap::new();
    s.insert(
        "sex".to_string(),
        AttributeKind::Categorical {
            levels: vec!["F".into(), "M".into()],
        },
    );
    s.insert("age".to_string(), AttributeKind::Numeric);
    s
}

fn dataset_strategy() -> impl Strategy<Value = AuditDataset> {
    prop::collection::vec((any::<bool>(), 0.0..1.0f64, any::<bool>(), 20.0..90.0f64), 2..60).prop_map(|rows| {
        let records = rows
            .into_iter()
            .enumerate()
            .map(|(i, (y, s, f, a))| record(i, y, s, if f { "F" } else { "M" }, a))
            .collect();
        AuditDataset::from_records(records, schema()).unwrap()
    })
}

fn base_matrix(rows: &[(f64, f64)]) -> FeatureMatrix {
    FeatureMatrix::from_columns(vec![
        ("x".into(), rows.iter().map(|r| r.0).collect()),
        ("z".into(), rows.iter().map(|r| r.1).collect()),
    ])
}

fn logistic_data() -> impl Strategy<Value = (Vec<(f64, f64)>, Vec<bool>)> {
    (10usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both classes", |(_, y)| y.iter().any(|&b| b) && y.iter().any(|&b| !b))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratify_is_idempotent_and_partitions(ds in dataset_strategy()) {
        let women = SubgroupFilter::equals("sex", "F");
        let men = SubgroupFilter::equals("sex", "M");
        let once = stratify(&ds, &women).unwrap();
        prop_assert_eq!(stratify(&once, &women).unwrap(), once.clone());
        let m = stratify(&ds, &men).unwrap();
        prop_assert_eq!(once.len() + m.len(), ds.len());
        let mut rows: Vec<usize> = matching_rows(&ds, &women);
        rows.extend(matching_rows(&ds, &men));
        rows.sort_unstable();
        prop_assert_eq!(rows, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn transform_mode_reproduces_fit_mode(ds in dataset_strategy()) {
        let fit = design_matrix(&ds, FeatureBlocks::residual_inputs(false), None).unwrap();
        let again = design_matrix(&ds, FeatureBlocks::residual_inputs(false), Some(fit.stats())).unwrap();
        for (a, b) in fit.data().iter().zip(again.data()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn csv_round_trip(ds in dataset_strategy()) {
        let mut bytes = Vec::new();
        ds.write_csv(&mut bytes).unwrap();
        let back = read_dataset(bytes.as_slice(), &ds.schema()).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn auroc_matches_pair_count((s, y) in labelled(40)) {
        prop_assert!((auroc(&s, &y).unwrap() - brute_force_auc(&s, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auroc_label_flip((s, y) in labelled(40)) {
        let flipped: Vec<bool> = y.iter().map(|b| !b).collect();
        let a = auroc(&s, &y).unwrap();
        prop_assert!((auroc(&s, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn auroc_monotone_invariance((s, y) in labelled(40)) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() + v * v * v).collect();
        prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(&t, &y).unwrap());
    }

    #[test]
    fn delong_swap_and_self((a, y) in labelled(40), noise in prop::collection::vec(0.0..0.3f64, 40)) {
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + e).collect();
        let self_cmp = delong_correlated(&a, &a, &y);
        if let Ok(c) = self_cmp {
            prop_assert_eq!(c.diff, 0.0);
            prop_assert_eq!(c.p_value, 1.0);
            let ab = delong_correlated(&a, &b, &y).unwrap();
            let ba = delong_correlated(&b, &a, &y).unwrap();
            prop_assert_eq!(ab.diff, -ba.diff);
            prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_reaches_target((s, y) in labelled(60), target in 0.05..1.0f64) {
        let op = operating_threshold(&s, &y, target).unwrap();
        let c = confusion_at(&s, &y, op).unwrap();
        prop_assert!(c.sensitivity().unwrap() >= target);
        // the next larger observed score misses the target
        if let Some(next) = s.iter().copied().filter(|&v| v > op.threshold).reduce(f64::min) {
            let c = confusion_at(&s, &y, subaudit::roc::OperatingPoint { threshold: next }).unwrap();
            prop_assert!(c.sensitivity().unwrap() < target);
        }
    }

    #[test]
    fn band_is_total(p in 0.0..=1.0f64) {
        let band = SignificanceBand::of(p);
        let expected = if p < 0.05 {
            SignificanceBand::Significant
        } else if p <= 0.1 {
            SignificanceBand::Marginal
        } else {
            SignificanceBand::None
        };
        prop_assert_eq!(band, expected);
    }

    #[test]
    fn expansion_width(p in 1usize..5, d in 1usize..5) {
        let cols: Vec<(String, Vec<f64>)> = (0..p).map(|j| (format!("c{j}"), vec![j as f64 + 0.5; 3])).collect();
        let e = polynomial_expand(&FeatureMatrix::from_columns(cols), d).unwrap();
        prop_assert_eq!(Some(e.n_cols()), expanded_width(p, d));
        let mut choose = 1usize;
        for i in 1..=d {
            choose = choose * (p + i) / i;
        }
        prop_assert_eq!(e.n_cols(), choose - 1);
    }

    #[test]
    fn fit_is_deterministic_and_descends((rows, y) in logistic_data()) {
        let fm = base_matrix(&rows);
        let cfg = ResidualModelConfig::new(2, 1e-2);
        let a = fit_klr(&fm, &y, &cfg).unwrap();
        let b = fit_klr(&fm, &y, &cfg).unwrap();
        prop_assert_eq!(&a.weights, &b.weights);
        let zero = vec![0.0; a.weights.len()];
        prop_assert!(objective(&a, &fm, &y, &a.weights).unwrap() <= objective(&a, &fm, &y, &zero).unwrap());
    }

    #[test]
    fn mean_rate_matches_event_rate((rows, y) in logistic_data()) {
        let fm = base_matrix(&rows);
        let m = fit_klr(&fm, &y, &ResidualModelConfig::new(3, 1e-3)).unwrap();
        let rates = predict_event_rate(&m, &fm).unwrap();
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        let event = y.iter().filter(|&&b| b).count() as f64 / y.len() as f64;
        prop_assert!((mean - event).abs() < 0.01, "{} vs {}", mean, event);
    }

    #[test]
    fn prediction_ignores_row_order((rows, y) in logistic_data()) {
        let fm = base_matrix(&rows);
        let m = fit_klr(&fm, &y, &ResidualModelConfig::new(2, 1e-2)).unwrap();
        let rates = predict_event_rate(&m, &fm).unwrap();
        let rev: Vec<usize> = (0..rows.len()).rev().collect();
        let rates_rev = predict_event_rate(&m, &fm.select_rows(&rev)).unwrap();
        for (i, &j) in rev.iter().enumerate() {
            prop_assert_eq!(rates_rev[i], rates[j]);
        }
    }

    #[test]
    fn mirror_symmetry(
        rows in prop::collection::vec((any::<bool>(), 0.0..1.0f64, -0.5..0.5f64, -0.5..0.5f64), 1..40)
    ) {
        let y: Vec<bool> = rows.iter().map(|r| r.0).collect();
        let s: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let g = vec![rows.iter().map(|r| r.2).collect::<Vec<f64>>(), rows.iter().map(|r| r.3).collect()];
        let y2: Vec<bool> = y.iter().map(|b| !b).collect();
        let s2: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let g2: Vec<Vec<f64>> = g.iter().map(|m| m.iter().map(|v| -v).collect()).collect();
        let (_, under) = cusum_statistic(&y, &s, &g, Direction::Underestimation).unwrap();
        let (_, over) = cusum_statistic(&y2, &s2, &g2, Direction::Overestimation).unwrap();
        prop_assert!((under - over).abs() < 1e-12);
    }

    #[test]
    fn adding_a_member_never_lowers_max(
        rows in prop::collection::vec((any::<bool>(), 0.0..1.0f64, -0.5..0.5f64, -0.5..0.5f64), 1..40)
    ) {
        let y: Vec<bool> = rows.iter().map(|r| r.0).collect();
        let s: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let g1: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let g2: Vec<f64> = rows.iter().map(|r| r.3).collect();
        for d in Direction::BOTH {
            let (_, one) = cusum_statistic(&y, &s, std::slice::from_ref(&g1), d).unwrap();
            let (_, two) = cusum_statistic(&y, &s, &[g1.clone(), g2.clone()], d).unwrap();
            prop_assert!(two >= one);
        }
    }

    #[test]
    fn pvalue_bounds(observed in -1.0..1.0f64, nulls in prop::collection::vec(-1.0..1.0f64, 1..200)) {
        let p = monte_carlo_pvalue(observed, &nulls);
        prop_assert!(p >= 1.0 / (nulls.len() + 1) as f64 && p <= 1.0);
    }

    #[test]
    fn zero_residuals_do_not_reject(s in prop::collection::vec(0.0..1.0f64, 1..30), seed in any::<u64>()) {
        let g = vec![vec![0.0; s.len()]; 3];
        let y: Vec<bool> = s.iter().map(|&v| v > 0.5).collect();
        for d in Direction::BOTH {
            let (_, obs) = cusum_statistic(&y, &s, &g, d).unwrap();
            prop_assert_eq!(obs, 0.0);
            let nulls = simulate_null(&s, &g, d, 100, seed);
            prop_assert!(monte_carlo_pvalue(obs, &nulls) >= 0.5);
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let rows: Vec<(f64, f64)> = (0..80)
        .map(|i| {
            let t = i as f64 / 80.0;
            ((6.0 * t).sin(), (11.0 * t).cos() * 0.8)
        })
        .collect();
    let y: Vec<bool> = rows.iter().enumerate().map(|(i, r)| r.0 + 0.5 * r.1 > 0.2 || i % 7 == 0).collect();
    let fm = base_matrix(&rows);
    for cfg in [ResidualModelConfig::new(2, 1e-3), ResidualModelConfig::new(3, 1e-2)] {
        let m = fit_klr(&fm, &y, &cfg).unwrap();
        // perturb away from the optimum so the gradient is not trivially zero
        let w: Vec<f64> = m.weights.iter().enumerate().map(|(j, v)| v + 0.05 * ((j % 3) as f64 - 1.0)).collect();
        let g = gradient(&m, &fm, &y, &w).unwrap();
        let h = 1e-5;
        for j in 0..w.len() {
            let mut up = w.clone();
            let mut down = w.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (objective(&m, &fm, &y, &up).unwrap() - objective(&m, &fm, &y, &down).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-5, "component {j}: {fd} vs {}", g[j]);
        }
    }
}

#[test]
fn shrinkage_is_monotone() {
    let rows: Vec<(f64, f64)> = (0..120).map(|i| ((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect();
    let y: Vec<bool> = rows.iter().enumerate().map(|(i, r)| r.0 - r.1 > 0.0 || i % 5 == 0).collect();
    let fm = base_matrix(&rows);
    let norms: Vec<f64> = [1e-3, 1e-2, 1e-1]
        .iter()
        .map(|&l2| {
            let m = fit_klr(&fm, &y, &ResidualModelConfig::new(3, l2)).unwrap();
            m.coefficients().iter().map(|w| w * w).sum::<f64>().sqrt()
        })
        .collect();
    assert!(norms[0] >= norms[1] && norms[1] >= norms[2], "{norms:?}");
}
