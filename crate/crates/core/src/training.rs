//! Training loop, classification and explanation metrics, ablations and the
//! band sweep driver.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{add_noise, LabeledCohort};
use crate::config::{Ablation, ModelConfig};
use crate::diffengine::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::maskext::{self, ExplanationExport, SubjectExplanation};
use crate::predictor::{self, ForwardMode, Model, Prediction};
use crate::signal::io::Split;
use crate::signal::{build_sequence_with, Band, DynamicGraphSequence};
use crate::streams::{self, tag};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SEEGRAPH_THREADS";

/// Model-ready sequences of a cohort.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub sequences: Vec<DynamicGraphSequence>,
    pub labels: Vec<usize>,
    pub subject_ids: Vec<String>,
    pub channels: Vec<String>,
    pub n_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub planted: BTreeMap<usize, Vec<(usize, usize)>>,
}

impl Dataset {
    /// Builds every subject's sequence under `config`; `noise_sigma > 0` first adds
    /// Gaussian noise (keyed by `config.seed`) to each z-scored recording.
    pub fn prepare(cohort: &LabeledCohort, config: &ModelConfig, noise_sigma: f64) -> Result<Dataset> {
        let spec = config.windowing(cohort.sample_rate_hz)?;
        let band = config.band.definition();
        let opts = config.sequence_options();
        let sequences = cohort
            .recordings
            .iter()
            .map(|rec| build_sequence_with(&add_noise(rec, noise_sigma, config.seed)?, &spec, &band, &opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            sequences,
            labels: cohort.recordings.iter().map(|r| r.label).collect(),
            subject_ids: cohort.recordings.iter().map(|r| r.subject_id.clone()).collect(),
            channels: cohort.channels.clone(),
            n_classes: cohort.n_classes,
            train: cohort.indices(Split::Train),
            test: cohort.indices(Split::Test),
            planted: cohort.planted.clone(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.sequences.first().map_or(0, |s| s.feature_dim())
    }

    pub fn n_nodes(&self) -> usize {
        self.channels.len()
    }

    /// Planted edges per class when every class has the same number of them.
    pub fn planted_k(&self) -> Option<usize> {
        let k = self.planted.get(&0)?.len();
        let uniform = (0..self.n_classes).all(|c| self.planted.get(&c).map(Vec::len) == Some(k));
        (uniform && k > 0).then_some(k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest; absent when the class has no positives or no negatives.
    pub auroc: Option<f64>,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_auroc: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Mean off-diagonal evaluation mask over the scored subjects.
    pub mask_retention: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanation_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanation_precision: Option<f64>,
    pub n_scored: usize,
}

/// Rank-statistic AUROC (Mann–Whitney U with midranks); `None` without both classes.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = midrank;
        }
        start = end;
    }
    let pos_rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Accuracy, macro-F1, one-vs-rest macro-AUROC and the confusion matrix.
///
/// Classes without both positives and negatives are left out of the AUROC mean;
/// if none qualifies the AUROC is reported as 0.5.
pub fn classification_metrics(truth: &[usize], probabilities: &[Vec<f64>], n_classes: usize) -> Result<MetricsReport> {
    if truth.is_empty() {
        return Err(Error::Validation("cannot score an empty split".into()));
    }
    if truth.len() != probabilities.len() {
        return Err(Error::Shape("one probability vector per subject is required".into()));
    }
    if truth.iter().any(|&t| t >= n_classes) || probabilities.iter().any(|p| p.len() != n_classes) {
        return Err(Error::Validation(format!("labels and probabilities must cover {n_classes} classes")));
    }
    let predicted: Vec<usize> = probabilities.iter().map(|p| predictor::argmax(p)).collect();
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(&predicted) {
        confusion[t][p] += 1;
    }
    let correct = (0..n_classes).map(|c| confusion[c][c]).sum::<usize>();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = (0..n_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let support: usize = confusion[c].iter().sum();
            let predicted_c: usize = (0..n_classes).map(|t| confusion[t][c]).sum();
            let precision = ratio(tp, predicted_c);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            let scores: Vec<f64> = probabilities.iter().map(|p| p[c]).collect();
            let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            ClassMetrics {
                precision,
                recall,
                f1,
                auroc: auroc(&scores, &positive),
                support,
            }
        })
        .collect();
    let aurocs: Vec<f64> = per_class.iter().filter_map(|m| m.auroc).collect();
    let macro_auroc = if aurocs.is_empty() {
        0.5
    } else {
        aurocs.iter().sum::<f64>() / aurocs.len() as f64
    };
    Ok(MetricsReport {
        accuracy: correct as f64 / truth.len() as f64,
        macro_auroc,
        macro_f1: per_class.iter().map(|m| m.f1).sum::<f64>() / n_classes as f64,
        per_class,
        confusion,
        mask_retention: 0.0,
        explanation_k: None,
        explanation_precision: None,
        n_scored: truth.len(),
    })
}

/// Scored evaluation of a subset of subjects.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub indices: Vec<usize>,
    pub predictions: Vec<Prediction>,
}

/// Evaluation-mode metrics over `indices` at temperature `tau`.
pub fn evaluate_at(model: &Model, data: &Dataset, indices: &[usize], tau: f64) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let predictions = indices
        .iter()
        .map(|&k| model.predict_at(&data.sequences[k], tau))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = indices.iter().map(|&k| data.labels[k]).collect();
    let probabilities: Vec<Vec<f64>> = predictions.iter().map(|p| p.probabilities.clone()).collect();
    let mut report = classification_metrics(&truth, &probabilities, data.n_classes)?;
    report.mask_retention =
        predictions.iter().map(|p| maskext::mean_off_diagonal(&p.mask)).sum::<f64>() / predictions.len() as f64;
    if let Some(k) = data.planted_k() {
        if k <= max_k(data.n_nodes()) {
            report.explanation_k = Some(k);
            report.explanation_precision = Some(precision_from(data, indices, &predictions, k)?);
        }
    }
    Ok(Evaluation {
        report,
        indices: indices.to_vec(),
        predictions,
    })
}

/// Test-split evaluation.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    evaluate_at(model, data, &data.test, model.config.eval_tau)
}

fn max_k(n: usize) -> usize {
    n * (n - 1) / 2
}

fn check_k(data: &Dataset, k: usize) -> Result<()> {
    if k == 0 || k > max_k(data.n_nodes()) {
        return Err(Error::Config(format!(
            "k = {k} outside 1..={} for {} channels",
            max_k(data.n_nodes()),
            data.n_nodes()
        )));
    }
    Ok(())
}

fn precision_from(data: &Dataset, indices: &[usize], predictions: &[Prediction], k: usize) -> Result<f64> {
    let mut total = 0.0;
    for (&idx, pred) in indices.iter().zip(predictions) {
        let planted = data
            .planted
            .get(&data.labels[idx])
            .ok_or_else(|| Error::Validation(format!("no planted edges for class {}", data.labels[idx])))?;
        let ranked = maskext::rank_edges(&pred.mask, &pred.fused_adjacency, &data.channels, 0.0)?;
        total += maskext::precision_at_k(&ranked, planted, k)?;
    }
    Ok(total / indices.len() as f64)
}

/// Mean precision@k of the salience ranking against the planted edges of each test
/// subject's class.
pub fn explain_eval(model: &Model, data: &Dataset, k: usize) -> Result<f64> {
    check_k(data, k)?;
    let eval = evaluate(model, data)?;
    precision_from(data, &eval.indices, &eval.predictions, k)
}

/// Explanation export for the test split.
pub fn explain(model: &Model, data: &Dataset, top_k: Option<usize>) -> Result<ExplanationExport> {
    if let Some(k) = top_k {
        check_k(data, k)?;
    }
    let eval = evaluate(model, data)?;
    let subjects = eval
        .indices
        .iter()
        .zip(&eval.predictions)
        .map(|(&idx, pred)| {
            Ok(SubjectExplanation {
                subject_id: data.subject_ids[idx].clone(),
                predicted: pred.predicted(),
                label: data.labels[idx],
                edges: maskext::rank_edges(
                    &pred.mask,
                    &pred.fused_adjacency,
                    &data.channels,
                    model.config.eval_threshold,
                )?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let precision_at_k = match top_k {
        Some(k) if !data.planted.is_empty() => Some(precision_from(data, &eval.indices, &eval.predictions, k)?),
        _ => None,
    };
    Ok(ExplanationExport {
        subjects,
        top_k,
        precision_at_k,
    })
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub tau: f64,
    /// Mean off-diagonal training mask over the epoch.
    pub retention: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub report: MetricsReport,
    pub log: Vec<EpochLog>,
}

/// Seen by a training observer after every per-sample forward pass.
pub struct StepView<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub sample: usize,
    pub mask: &'a Tensor,
}

/// Worker threads from `SEEGRAPH_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

struct SampleResult {
    grads: Vec<Tensor>,
    loss: f64,
    ce: f64,
    kl: f64,
    mask: Tensor,
}

fn sample_step(model: &Model, seq: &DynamicGraphSequence, label: usize, mode: &ForwardMode) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let pass = model.forward(&mut tape, &bound, seq, mode)?;
    let (total, ce, kl) = predictor::total_loss(&mut tape, pass.logits, label, pass.mask, &model.config.prior())?;
    let mut grads = tape.backward(total)?;
    Ok(SampleResult {
        grads: model.params.collect_grads(&mut grads, &bound),
        loss: tape.value(total).item()?,
        ce: tape.value(ce).item()?,
        kl: tape.value(kl).item()?,
        mask: tape.value(pass.mask).clone(),
    })
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Domain(reason) | Error::Numerical(reason) => Error::Training { epoch, batch, reason },
        other => other,
    }
}

pub fn train(cohort: &LabeledCohort, config: &ModelConfig) -> Result<TrainOutcome> {
    train_dataset(&Dataset::prepare(cohort, config, 0.0)?, config)
}

pub fn train_dataset(data: &Dataset, config: &ModelConfig) -> Result<TrainOutcome> {
    train_observed(data, config, |_| {})
}

/// Mini-batch Adam on cross-entropy plus the weighted KL term.
///
/// Per-sample gradients are computed independently (in parallel when
/// `SEEGRAPH_THREADS > 1`) and summed in sample order, so results do not depend on
/// the thread count.
pub fn train_observed(data: &Dataset, config: &ModelConfig, mut observer: impl FnMut(&StepView)) -> Result<TrainOutcome> {
    config.validate()?;
    if data.train.is_empty() || data.test.is_empty() {
        return Err(Error::Validation("training needs non-empty train and test splits".into()));
    }
    let mut model = Model::new(config, data.feature_dim(), data.n_classes)?;
    let adam = config.adam();
    let schedule = config.schedule();
    let n = data.n_nodes();
    let threads = thread_count();
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let mut log = Vec::with_capacity(config.epochs);
    let mut last_eval = None;
    for epoch in 0..config.epochs {
        let tau = schedule.at(epoch);
        let mut order = data.train.clone();
        order.shuffle(&mut streams::stream(config.seed, &[tag::SHUFFLE, epoch as u64]));
        let (mut loss_sum, mut ce_sum, mut kl_sum, mut retention_sum) = (0.0, 0.0, 0.0, 0.0);
        for (batch, members) in order.chunks(config.batch_size).enumerate() {
            let step = |&idx: &usize| -> Result<SampleResult> {
                let noise = maskext::keyed_noise(config.seed, epoch, idx, n);
                let mode = ForwardMode::Train { tau, noise };
                sample_step(&model, &data.sequences[idx], data.labels[idx], &mode)
            };
            let results: Vec<Result<SampleResult>> = match &pool {
                Some(pool) => pool.install(|| members.par_iter().map(step).collect()),
                None => members.iter().map(step).collect(),
            };
            let mut sum: Option<Vec<Tensor>> = None;
            for (&idx, result) in members.iter().zip(results) {
                let r = result.map_err(diverged(epoch, batch))?;
                if !r.loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        batch,
                        reason: format!("non-finite loss {} on subject {}", r.loss, data.subject_ids[idx]),
                    });
                }
                observer(&StepView {
                    epoch,
                    batch,
                    sample: idx,
                    mask: &r.mask,
                });
                loss_sum += r.loss;
                ce_sum += r.ce;
                kl_sum += r.kl;
                retention_sum += maskext::mean_off_diagonal(&r.mask);
                match sum.as_mut() {
                    None => sum = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            let mut grads = sum.expect("non-empty batch");
            let scale = 1.0 / members.len() as f64;
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                if !g.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        batch,
                        reason: "non-finite gradient".into(),
                    });
                }
            }
            model.params.adam_step(&grads, &adam)?;
        }
        let eval = evaluate_at(&model, data, &data.test, model.config.eval_tau)?;
        let count = order.len() as f64;
        log.push(EpochLog {
            epoch,
            loss: loss_sum / count,
            ce: ce_sum / count,
            kl: kl_sum / count,
            tau,
            retention: retention_sum / count,
            test_acc: eval.report.accuracy,
        });
        last_eval = Some(eval);
    }
    let report = last_eval.expect("at least one epoch").report;
    Ok(TrainOutcome { model, report, log })
}

/// Trains with one component switched off.
pub fn ablate(cohort: &LabeledCohort, config: &ModelConfig, switch: &str) -> Result<TrainOutcome> {
    let a: Ablation = switch.parse()?;
    train(cohort, &config.with_ablation(a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub band: Band,
    /// `None` when the band retains no spectral bins at this rate.
    pub report: Option<MetricsReport>,
}

/// One train/evaluate run per band with identical seeds; the broadband run comes last.
pub fn band_sweep(cohort: &LabeledCohort, config: &ModelConfig, noise_sigma: f64) -> Result<Vec<BandRow>> {
    Band::ALL
        .into_iter()
        .map(|band| {
            let cfg = ModelConfig { band, ..config.clone() };
            let data = match Dataset::prepare(cohort, &cfg, noise_sigma) {
                Err(Error::EmptyBand { .. }) => return Ok(BandRow { band, report: None }),
                other => other?,
            };
            let outcome = train_dataset(&data, &cfg)?;
            Ok(BandRow {
                band,
                report: Some(outcome.report),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let truth = [false, false, true, true];
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &truth), Some(0.75));
        assert_eq!(auroc(&[0.5; 4], &truth), Some(0.5));
        assert_eq!(auroc(&[0.5; 2], &[true, true]), None);
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let truth = [0, 1, 2, 1];
        let probs: Vec<Vec<f64>> = truth
            .iter()
            .map(|&t| (0..3).map(|c| if c == t { 0.8 } else { 0.1 }).collect())
            .collect();
        let r = classification_metrics(&truth, &probs, 3).unwrap();
        assert_eq!((r.accuracy, r.macro_f1, r.macro_auroc), (1.0, 1.0, 1.0));
        assert_eq!(r.confusion[1][1], 2);

        let flat = vec![vec![0.5, 0.5]; 4];
        let r = classification_metrics(&[0, 0, 1, 1], &flat, 2).unwrap();
        assert_eq!(r.macro_auroc, 0.5);
        for (c, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), r.per_class[c].support);
        }
        assert!(matches!(classification_metrics(&[], &[], 2), Err(Error::Validation(_))));
    }

    #[test]
    fn absent_classes_score_zero_f1() {
        let r = classification_metrics(&[0, 0], &[vec![0.9, 0.1, 0.0], vec![0.8, 0.1, 0.1]], 3).unwrap();
        assert_eq!(r.per_class[1].f1, 0.0);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-15);
    }
}
