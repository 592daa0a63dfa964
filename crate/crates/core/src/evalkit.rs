//! Metrics, evaluation runs, hyperparameter grid search, latency bench.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{greedy_decode, DenseBias, HeadBias, ModelWeights};
use crate::par;
use crate::probes::{select_topk, HeadScore};
use crate::scene::{Answer, QAPair, SceneImage};
use crate::shiftvec::{Level, ShiftVectors};
use crate::steer::{compose_bias, InterventionConfig};

/// Confusion-matrix metrics with `yes` as the positive class. Precision,
/// recall and F1 fall back to 0 on an empty denominator, with a note in
/// `warnings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Metrics with a caller-chosen positive class.
pub fn compute_metrics_with_positive(
    predictions: &[Answer],
    gold: &[Answer],
    positive: Answer,
) -> Result<Metrics> {
    if predictions.len() != gold.len() {
        return Err(Error::InvalidParameter(format!(
            "prediction/gold length mismatch: {} vs {}",
            predictions.len(),
            gold.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidParameter(
            "metrics need at least one prediction".into(),
        ));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (p, g) in predictions.iter().zip(gold) {
        match (*p == positive, *g == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut warnings = Vec::new();
    let accuracy = (tp + tn) as f64 / (tp + tn + fp + fn_) as f64;
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        warnings.push("precision denominator is zero".to_string());
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        warnings.push("recall denominator is zero".to_string());
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        tp,
        fp,
        tn,
        fn_,
        skipped: 0,
        warnings,
    })
}

/// Standard POPE-style metrics (`yes` positive).
pub fn compute_metrics(predictions: &[Answer], gold: &[Answer]) -> Result<Metrics> {
    compute_metrics_with_positive(predictions, gold, Answer::Yes)
}

/// Answer every pair and score the predictions. Per-item failures are
/// counted in `skipped`, never silently dropped.
pub fn run_eval(
    weights: &ModelWeights,
    dataset: &[(QAPair, SceneImage)],
    bias: Option<&HeadBias>,
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter("dataset must be non-empty".into()));
    }
    let dense = match bias {
        Some(b) => Some(DenseBias::new(b, &weights.config)?),
        None => None,
    };
    let answers: Vec<Result<Answer>> = par::map_slice(dataset, |(qa, image)| {
        crate::model::answer_yes_no(weights, qa, image, dense.as_ref())
    });
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut gold = Vec::with_capacity(dataset.len());
    let mut skipped = 0usize;
    for (result, (qa, _)) in answers.into_iter().zip(dataset) {
        match result {
            Ok(answer) => {
                predictions.push(answer);
                gold.push(qa.gold);
            }
            Err(_) => skipped += 1,
        }
    }
    if predictions.is_empty() {
        return Err(Error::InvalidParameter(
            "every evaluation item failed".into(),
        ));
    }
    let mut metrics = compute_metrics(&predictions, &gold)?;
    metrics.skipped = skipped;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub alpha: f64,
    pub k: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// The no-intervention baseline (alpha 0, k 0) followed by every grid
    /// combination in (alpha, k) order.
    pub entries: Vec<GridEntry>,
    pub best: GridEntry,
}

/// Exhaustive grid over `alpha = beta` and `k_img = k_obj = k`, evaluated
/// on the validation set. The baseline row is always injected, so
/// `best.f1 >= baseline.f1` by construction; F1 ties resolve to the
/// smaller `(alpha, k)`.
pub fn grid_search(
    weights: &ModelWeights,
    shift_img: &ShiftVectors,
    scores_img: &[HeadScore],
    shift_obj: &ShiftVectors,
    scores_obj: &[HeadScore],
    validation: &[(QAPair, SceneImage)],
    grid: &GridSpec,
) -> Result<GridResult> {
    if grid.alphas.is_empty() || grid.ks.is_empty() {
        return Err(Error::InvalidParameter("grid must be non-empty".into()));
    }
    let fingerprint = weights.fingerprint();
    shift_img.check_fingerprint(&fingerprint)?;
    shift_obj.check_fingerprint(&fingerprint)?;

    let mut entries = Vec::with_capacity(grid.alphas.len() * grid.ks.len() + 1);
    entries.push(GridEntry {
        alpha: 0.0,
        k: 0,
        metrics: run_eval(weights, validation, None)?,
    });
    for &alpha in &grid.alphas {
        for &k in &grid.ks {
            let set_img = select_topk(scores_img, k, Level::Image, &fingerprint)?;
            let set_obj = select_topk(scores_obj, k, Level::Object, &fingerprint)?;
            let cfg = InterventionConfig {
                alpha,
                beta: alpha,
                k_img: k,
                k_obj: k,
                enable_image: true,
                enable_object: true,
            };
            let bias = compose_bias(Some((shift_img, &set_img)), Some((shift_obj, &set_obj)), &cfg)?;
            let metrics = run_eval(weights, validation, Some(&bias))?;
            entries.push(GridEntry { alpha, k, metrics });
        }
    }
    let best = entries
        .iter()
        .fold(None::<&GridEntry>, |best, entry| match best {
            None => Some(entry),
            Some(b) => {
                let better = entry.metrics.f1 > b.metrics.f1
                    || (entry.metrics.f1 == b.metrics.f1
                        && (entry.alpha, entry.k) < (b.alpha, b.k));
                if better {
                    Some(entry)
                } else {
                    Some(b)
                }
            }
        })
        .expect("entries non-empty")
        .clone();
    Ok(GridResult { entries, best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyPoint {
    pub tokens: usize,
    pub baseline_ms_per_token: f64,
    pub intervened_ms_per_token: f64,
    pub ratio: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median wall-clock per generated token with and without the bias, on
/// greedy decodes of `lengths` tokens. Runs single-threaded; trials
/// interleave the two modes. If a decode lands under the timer floor, the
/// measurement batches several decodes and divides.
pub fn bench_latency(
    weights: &ModelWeights,
    sample: &(QAPair, SceneImage),
    bias: &HeadBias,
    trials: usize,
    lengths: &[usize],
) -> Result<Vec<LatencyPoint>> {
    if trials < 100 {
        return Err(Error::InvalidParameter(format!(
            "latency bench needs >= 100 trials, got {trials}"
        )));
    }
    let dense = DenseBias::new(bias, &weights.config)?;
    let (qa, image) = sample;
    let mut points = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let decode = |with_bias: bool| -> Result<()> {
            let bias_arg = with_bias.then_some(&dense);
            greedy_decode(weights, &qa.question_tokens, image, bias_arg, len).map(|_| ())
        };
        // warmup, also validating both paths
        for _ in 0..3 {
            decode(false)?;
            decode(true)?;
        }
        // timer-floor guard: batch decodes if one runs under ~50us
        let probe_start = Instant::now();
        decode(false)?;
        let probe = probe_start.elapsed();
        let batch = if probe.as_micros() < 50 {
            (50.0 / probe.as_micros().max(1) as f64).ceil() as usize
        } else {
            1
        };

        let mut baseline_ms = Vec::with_capacity(trials);
        let mut intervened_ms = Vec::with_capacity(trials);
        for _ in 0..trials {
            let start = Instant::now();
            for _ in 0..batch {
                decode(false)?;
            }
            baseline_ms.push(start.elapsed().as_secs_f64() * 1e3 / (batch * len) as f64);
            let start = Instant::now();
            for _ in 0..batch {
                decode(true)?;
            }
            intervened_ms.push(start.elapsed().as_secs_f64() * 1e3 / (batch * len) as f64);
        }
        let baseline = median(&mut baseline_ms);
        let intervened = median(&mut intervened_ms);
        points.push(LatencyPoint {
            tokens: len,
            baseline_ms_per_token: baseline,
            intervened_ms_per_token: intervened,
            ratio: intervened / baseline,
        });
    }
    Ok(points)
}
