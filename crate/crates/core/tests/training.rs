use proptest::prelude::*;
use seegraph::cohort::{generate_cohort, CohortSpec, LabeledCohort};
use seegraph::config::{Ablation, ModelConfig};
use seegraph::error::Error;
use seegraph::signal::Band;
use seegraph::training::{
    ablate, auroc, band_sweep, classification_metrics, evaluate, explain, explain_eval, train, train_observed, Dataset,
};

/// Fraction of (positive, negative) pairs ordered correctly, ties counting half.
fn brute_force_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut good, mut pairs) = (0.0, 0usize);
    for (i, &pi) in positive.iter().enumerate() {
        for (j, &pj) in positive.iter().enumerate() {
            if pi && !pj {
                pairs += 1;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| good / pairs as f64)
}

fn tiny_cohort() -> LabeledCohort {
    let spec = CohortSpec {
        subjects_per_class: 4,
        duration_s: 4.0,
        ..CohortSpec::default()
    };
    generate_cohort(&spec, 1).unwrap()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        model_dim: 8,
        heads: 2,
        d_pe: 2,
        gat_hidden: 8,
        epochs: 2,
        batch_size: 3,
        ..ModelConfig::default()
    }
}

#[test]
fn hand_checked_auroc() {
    let truth = [0, 0, 1, 1];
    let probs: Vec<Vec<f64>> = [0.1, 0.4, 0.35, 0.8].iter().map(|&p| vec![1.0 - p, p]).collect();
    let r = classification_metrics(&truth, &probs, 2).unwrap();
    assert!((r.per_class[1].auroc.unwrap() - 0.75).abs() < 1e-12);
    assert!((r.macro_auroc - 0.75).abs() < 1e-12);
}

#[test]
fn perfect_and_constant_predictors() {
    let truth = [0, 1, 2, 1, 0];
    let perfect: Vec<Vec<f64>> = truth
        .iter()
        .map(|&t| (0..3).map(|c| if c == t { 0.9 } else { 0.05 }).collect())
        .collect();
    let r = classification_metrics(&truth, &perfect, 3).unwrap();
    assert_eq!((r.accuracy, r.macro_f1, r.macro_auroc), (1.0, 1.0, 1.0));

    let truth = [0, 1, 0, 1];
    let flat = vec![vec![0.5, 0.5]; 4];
    assert_eq!(classification_metrics(&truth, &flat, 2).unwrap().macro_auroc, 0.5);
    assert!(matches!(classification_metrics(&[], &[], 2), Err(Error::Validation(_))));
}

proptest! {
    #[test]
    fn rank_auroc_equals_pair_counting(
        raw in prop::collection::vec((0u8..6, any::<bool>()), 1..=20)
    ) {
        // a coarse score grid forces plenty of ties
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 5.0).collect();
        let positive: Vec<bool> = raw.iter().map(|&(_, p)| p).collect();
        let got = auroc(&scores, &positive);
        let want = brute_force_auroc(&scores, &positive);
        prop_assert_eq!(got.is_some(), want.is_some());
        if let (Some(g), Some(w)) = (got, want) {
            prop_assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_subject_order(
        rows in prop::collection::vec((0usize..3, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64), 2..=20),
        rotate in 0usize..20,
    ) {
        let truth: Vec<usize> = rows.iter().map(|r| r.0).collect();
        let probs: Vec<Vec<f64>> = rows
            .iter()
            .map(|&(_, a, b, c)| {
                let z = a + b + c + 1e-9;
                vec![a / z, b / z, c / z]
            })
            .collect();
        let k = rotate % truth.len();
        let (mut t2, mut p2) = (truth.clone(), probs.clone());
        t2.rotate_left(k);
        p2.rotate_left(k);
        let a = classification_metrics(&truth, &probs, 3).unwrap();
        let b = classification_metrics(&t2, &p2, 3).unwrap();
        prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        prop_assert!((a.macro_auroc - b.macro_auroc).abs() < 1e-12);
        prop_assert_eq!(&a.confusion, &b.confusion);
        for (c, row) in a.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&t| t == c).count());
        }
        for v in [a.accuracy, a.macro_f1, a.macro_auroc] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn training_is_deterministic_and_logs_every_epoch() {
    let cohort = tiny_cohort();
    let a = train(&cohort, &tiny_config()).unwrap();
    let b = train(&cohort, &tiny_config()).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 2);
    assert_eq!(a.log[0].tau, 5.0);
    assert!((a.log[1].tau - 4.5).abs() < 1e-12);

    // the final report is the evaluation of the returned parameters
    let data = Dataset::prepare(&cohort, &tiny_config(), 0.0).unwrap();
    assert_eq!(evaluate(&a.model, &data).unwrap().report, a.report);
}

#[test]
fn every_training_mask_is_symmetric_with_zero_diagonal() {
    let cohort = tiny_cohort();
    let data = Dataset::prepare(&cohort, &tiny_config(), 0.0).unwrap();
    let mut steps = 0;
    train_observed(&data, &tiny_config(), |view| {
        let m = view.mask;
        let n = m.shape()[0];
        for i in 0..n {
            assert_eq!(m.at(&[i, i]), 0.0);
            for j in 0..n {
                assert_eq!(m.at(&[i, j]), m.at(&[j, i]));
            }
        }
        steps += 1;
    })
    .unwrap();
    assert_eq!(steps, 2 * data.train.len());
}

#[test]
fn ablations_change_exactly_their_switch() {
    let cohort = tiny_cohort();
    let base = tiny_config();
    let pe = ablate(&cohort, &base, "pe").unwrap();
    assert_eq!(pe.model.config.node_width(), base.model_dim);
    let fft = ablate(&cohort, &base, "fft").unwrap();
    let window = (base.window_seconds * cohort.sample_rate_hz) as usize;
    assert_eq!(fft.model.feature_dim, window);
    assert!(matches!(ablate(&cohort, &base, "dropout"), Err(Error::Config(_))));

    for a in Ablation::ALL {
        let mut c = base.with_ablation(a);
        c.switches = base.switches;
        assert_eq!(c, base);
    }
}

#[test]
fn explanation_k_is_bounded_by_the_pair_count() {
    let cohort = tiny_cohort();
    let out = train(&cohort, &ModelConfig { epochs: 1, ..tiny_config() }).unwrap();
    let data = Dataset::prepare(&cohort, &tiny_config(), 0.0).unwrap();
    assert!(matches!(explain_eval(&out.model, &data, 121), Err(Error::Config(_))));
    assert!(matches!(explain_eval(&out.model, &data, 0), Err(Error::Config(_))));
    let p = explain_eval(&out.model, &data, 6).unwrap();
    assert_eq!(Some(p), out.report.explanation_precision);

    let export = explain(&out.model, &data, Some(6)).unwrap();
    assert_eq!(export.precision_at_k, Some(p));
    for s in &export.subjects {
        assert_eq!(s.edges.len(), 120);
        for w in s.edges.windows(2) {
            assert!(w[0].salience > w[1].salience || (w[0].salience == w[1].salience && (w[0].i, w[0].j) < (w[1].i, w[1].j)));
        }
    }
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let cohort = tiny_cohort();
    let config = ModelConfig {
        learning_rate: 1e300,
        epochs: 3,
        ..tiny_config()
    };
    match train(&cohort, &config) {
        Err(Error::Training { .. }) => {}
        other => panic!("expected a training failure, got {:?}", other.map(|o| o.report)),
    }
}

#[test]
fn band_sweep_marks_bands_above_nyquist() {
    let spec = CohortSpec {
        subjects_per_class: 3,
        duration_s: 4.0,
        ..CohortSpec::alpha_only()
    };
    let cohort = generate_cohort(&spec, 1).unwrap();
    let rows = band_sweep(&cohort, &ModelConfig { epochs: 1, ..tiny_config() }, 0.0).unwrap();
    assert_eq!(rows.iter().map(|r| r.band).collect::<Vec<_>>(), Band::ALL.to_vec());
    assert_eq!(rows.last().unwrap().band, Band::Broadband);
    for row in &rows {
        assert_eq!(row.report.is_none(), row.band == Band::Gamma, "{:?}", row.band);
    }
}
