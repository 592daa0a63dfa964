//! Per-head binary probes and top-K head selection.
//!
//! One linear max-margin classifier (hinge loss + L2, deterministic cyclic
//! subgradient descent) per attention head separates trusted from untrusted
//! activations. Heads are ranked by 2-fold cross-validation accuracy with
//! folds split at the pair level, so the two members of a pair never land
//! in different folds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::par;
use crate::shiftvec::{Level, PairActivations};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustLabel {
    Trusted,
    Untrusted,
}

impl TrustLabel {
    fn sign(self) -> f64 {
        match self {
            TrustLabel::Trusted => 1.0,
            TrustLabel::Untrusted => -1.0,
        }
    }
}

/// One head's activation with its label and source pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSample {
    pub features: Vec<f64>,
    pub label: TrustLabel,
    pub pair_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeHyper {
    /// L2 regularization strength.
    pub lambda: f64,
    /// Passes of cyclic subgradient descent.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            epochs: 200,
            seed: 0,
        }
    }
}

/// Trained linear probe. A zero classifier falls back to the training-fold
/// majority label (ties predict trusted); with balanced pairs that pins the
/// degenerate accuracy at exactly 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub fallback: TrustLabel,
}

impl LinearProbe {
    pub fn predict(&self, features: &[f64]) -> TrustLabel {
        let score: f64 = self
            .weights
            .iter()
            .zip(features)
            .map(|(w, x)| w * x)
            .sum::<f64>()
            + self.bias;
        if score > 0.0 {
            TrustLabel::Trusted
        } else if score < 0.0 {
            TrustLabel::Untrusted
        } else {
            self.fallback
        }
    }
}

/// Pegasos-style cyclic subgradient descent on hinge loss + L2. Sample
/// order is fixed, so the result is fully deterministic.
fn train_svm(samples: &[&HeadSample], lambda: f64, epochs: usize) -> LinearProbe {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut step = 0usize;
    for _ in 0..epochs {
        for sample in samples {
            step += 1;
            let eta = 1.0 / (lambda * step as f64);
            let y = sample.label.sign();
            let margin = y
                * (w.iter()
                    .zip(&sample.features)
                    .map(|(wv, xv)| wv * xv)
                    .sum::<f64>()
                    + b);
            let decay = 1.0 - eta * lambda;
            for wv in w.iter_mut() {
                *wv *= decay;
            }
            if margin < 1.0 {
                for (wv, xv) in w.iter_mut().zip(&sample.features) {
                    *wv += eta * y * xv;
                }
                b += eta * y;
            }
        }
    }
    let trusted = samples
        .iter()
        .filter(|s| s.label == TrustLabel::Trusted)
        .count();
    let fallback = if trusted * 2 >= samples.len() {
        TrustLabel::Trusted
    } else {
        TrustLabel::Untrusted
    };
    LinearProbe {
        weights: w,
        bias: b,
        fallback,
    }
}

fn accuracy(probe: &LinearProbe, samples: &[&HeadSample]) -> f64 {
    let correct = samples
        .iter()
        .filter(|s| probe.predict(&s.features) == s.label)
        .count();
    correct as f64 / samples.len() as f64
}

/// Pair-level 2-fold split: pair ids are shuffled under the seed and halved.
pub(crate) fn split_pairs(pair_ids: &[u64], seed: u64) -> (Vec<u64>, Vec<u64>) {
    let mut ids: Vec<u64> = pair_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut ids);
    let half = ids.len() / 2;
    let fold_b = ids.split_off(half);
    (ids, fold_b)
}

/// Fit one head probe: 2-fold CV accuracy plus a final classifier retrained
/// on all samples (diagnostics only; selection uses the CV accuracy).
pub fn fit_head_probe(samples: &[HeadSample], hyper: &ProbeHyper) -> Result<(LinearProbe, f64)> {
    let mut pair_ids: Vec<u64> = samples.iter().map(|s| s.pair_id).collect();
    pair_ids.sort_unstable();
    pair_ids.dedup();
    if pair_ids.len() < 2 {
        return Err(Error::DegenerateData(
            "need at least 2 pairs for 2-fold cross-validation".into(),
        ));
    }
    let has = |label: TrustLabel| samples.iter().any(|s| s.label == label);
    if !has(TrustLabel::Trusted) || !has(TrustLabel::Untrusted) {
        return Err(Error::DegenerateData(
            "both labels must be present".into(),
        ));
    }

    let (fold_a, fold_b) = split_pairs(&pair_ids, hyper.seed);
    let in_fold = |fold: &[u64], s: &&HeadSample| fold.contains(&s.pair_id);
    let mut cv_sum = 0.0;
    for (train_ids, eval_ids) in [(&fold_a, &fold_b), (&fold_b, &fold_a)] {
        let train: Vec<&HeadSample> = samples.iter().filter(|s| in_fold(train_ids, s)).collect();
        let eval: Vec<&HeadSample> = samples.iter().filter(|s| in_fold(eval_ids, s)).collect();
        let probe = train_svm(&train, hyper.lambda, hyper.epochs);
        cv_sum += accuracy(&probe, &eval);
    }
    let cv_accuracy = cv_sum / 2.0;
    let all: Vec<&HeadSample> = samples.iter().collect();
    let final_probe = train_svm(&all, hyper.lambda, hyper.epochs);
    Ok((final_probe, cv_accuracy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub cv_accuracy: f64,
}

/// Samples for one head, assembled pair-adjacent (trusted then untrusted).
fn head_samples(records: &[PairActivations], layer: usize, head: usize) -> Vec<HeadSample> {
    let mut samples = Vec::with_capacity(records.len() * 2);
    for rec in records {
        samples.push(HeadSample {
            features: rec.trusted.head(layer, head).to_vec(),
            label: TrustLabel::Trusted,
            pair_id: rec.pair_id,
        });
        samples.push(HeadSample {
            features: rec.untrusted.head(layer, head).to_vec(),
            label: TrustLabel::Untrusted,
            pair_id: rec.pair_id,
        });
    }
    samples
}

/// Fit a probe per head; parallel across heads, each with a derived seed.
pub fn score_all_heads(records: &[PairActivations], hyper: &ProbeHyper) -> Result<Vec<HeadScore>> {
    if records.is_empty() {
        return Err(Error::InvalidParameter("records must be non-empty".into()));
    }
    let layers = records[0].trusted.layers;
    let heads = records[0].trusted.heads;
    let root = SeededRng::new(hyper.seed);
    let scores: Vec<Result<HeadScore>> = par::map_indexed(layers * heads, |idx| {
        let layer = idx / heads;
        let head = idx % heads;
        let samples = head_samples(records, layer, head);
        let head_hyper = ProbeHyper {
            seed: root.derive(idx as u64).seed(),
            ..*hyper
        };
        let (_, cv_accuracy) = fit_head_probe(&samples, &head_hyper)?;
        Ok(HeadScore {
            layer,
            head,
            cv_accuracy,
        })
    });
    scores.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSetMember {
    pub layer: usize,
    pub head: usize,
    pub cv_accuracy: f64,
}

/// The top-K heads of one level, ordered by (accuracy desc, layer, head).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSet {
    pub level: Level,
    pub members: Vec<HeadSetMember>,
    pub model_fingerprint: String,
}

impl HeadSet {
    pub fn k(&self) -> usize {
        self.members.len()
    }
}

/// The K highest-accuracy heads; ties broken by (layer, head) ascending.
pub fn select_topk(
    scores: &[HeadScore],
    k: usize,
    level: Level,
    model_fingerprint: &str,
) -> Result<HeadSet> {
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidParameter(format!(
            "k must be in 1..={}, got {k}",
            scores.len()
        )));
    }
    let mut ranked: Vec<&HeadScore> = scores.iter().collect();
    ranked.sort_by(|a, b| {
        b.cv_accuracy
            .partial_cmp(&a.cv_accuracy)
            .unwrap()
            .then(a.layer.cmp(&b.layer))
            .then(a.head.cmp(&b.head))
    });
    Ok(HeadSet {
        level,
        members: ranked
            .into_iter()
            .take(k)
            .map(|s| HeadSetMember {
                layer: s.layer,
                head: s.head,
                cv_accuracy: s.cv_accuracy,
            })
            .collect(),
        model_fingerprint: model_fingerprint.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ActivationRecord;

    /// Two Gaussian clusters at +/- `center` along the first axis.
    fn clustered_samples(
        pairs: usize,
        dim: usize,
        center: f64,
        std: f64,
        seed: u64,
    ) -> Vec<HeadSample> {
        let mut rng = SeededRng::new(seed);
        let mut out = Vec::with_capacity(pairs * 2);
        for pair_id in 0..pairs {
            for label in [TrustLabel::Trusted, TrustLabel::Untrusted] {
                let sign = label.sign();
                let mut features = rng.gaussian(0.0, std, dim).unwrap();
                features[0] += sign * center;
                out.push(HeadSample {
                    features,
                    label,
                    pair_id: pair_id as u64,
                });
            }
        }
        out
    }

    /// Independent oracle for separability: nearest-centroid classifier.
    fn nearest_centroid_accuracy(samples: &[HeadSample]) -> f64 {
        let dim = samples[0].features.len();
        let mut centroids = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for s in samples {
            let idx = usize::from(s.label == TrustLabel::Untrusted);
            counts[idx] += 1;
            for (c, x) in centroids[idx].iter_mut().zip(&s.features) {
                *c += x;
            }
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            for v in c.iter_mut() {
                *v /= n as f64;
            }
        }
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let correct = samples
            .iter()
            .filter(|s| {
                let d0 = dist(&s.features, &centroids[0]);
                let d1 = dist(&s.features, &centroids[1]);
                let predicted = if d0 <= d1 {
                    TrustLabel::Trusted
                } else {
                    TrustLabel::Untrusted
                };
                predicted == s.label
            })
            .count();
        correct as f64 / samples.len() as f64
    }

    #[test]
    fn separable_clusters_reach_high_cv_accuracy() {
        let samples = clustered_samples(200, 8, 3.0, 0.5, 7);
        // the independent oracle must confirm separability first
        assert!(nearest_centroid_accuracy(&samples) >= 0.99);
        let (_, cv) = fit_head_probe(&samples, &ProbeHyper::default()).unwrap();
        assert!(cv >= 0.95, "cv accuracy {cv}");
    }

    #[test]
    fn shuffled_labels_sit_at_chance_level() {
        for seed in 0..20 {
            let mut samples = clustered_samples(200, 8, 0.0, 1.0, 1000 + seed);
            // random features already carry no signal; also shuffle which
            // member of each pair is called trusted
            let mut rng = SeededRng::new(2000 + seed);
            for pair in samples.chunks_mut(2) {
                if rng.next_f64() < 0.5 {
                    let tmp = pair[0].label;
                    pair[0].label = pair[1].label;
                    pair[1].label = tmp;
                }
            }
            let hyper = ProbeHyper {
                seed,
                ..ProbeHyper::default()
            };
            let (_, cv) = fit_head_probe(&samples, &hyper).unwrap();
            assert!((0.40..=0.60).contains(&cv), "seed {seed}: cv {cv}");
        }
    }

    #[test]
    fn identical_features_give_exactly_half() {
        let features = vec![0.3, -0.7, 1.1];
        let samples: Vec<HeadSample> = (0..20)
            .flat_map(|pair_id| {
                [TrustLabel::Trusted, TrustLabel::Untrusted].map(|label| HeadSample {
                    features: features.clone(),
                    label,
                    pair_id,
                })
            })
            .collect();
        let (_, cv) = fit_head_probe(&samples, &ProbeHyper::default()).unwrap();
        assert_eq!(cv, 0.5);
    }

    #[test]
    fn single_class_input_rejected() {
        let samples: Vec<HeadSample> = (0..4)
            .map(|pair_id| HeadSample {
                features: vec![1.0, 2.0],
                label: TrustLabel::Trusted,
                pair_id,
            })
            .collect();
        assert!(matches!(
            fit_head_probe(&samples, &ProbeHyper::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn one_pair_rejected() {
        let samples = clustered_samples(1, 4, 3.0, 0.5, 1);
        assert!(matches!(
            fit_head_probe(&samples, &ProbeHyper::default()),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn fold_split_is_pairwise_exclusive_and_exhaustive() {
        let ids: Vec<u64> = (0..31).collect();
        for seed in 0..10 {
            let (a, b) = split_pairs(&ids, seed);
            assert_eq!(a.len() + b.len(), ids.len());
            for id in &a {
                assert!(!b.contains(id), "pair {id} in both folds");
            }
        }
    }

    #[test]
    fn selection_is_scale_robust() {
        // scaling all features of a head by a positive constant moves the
        // margin but barely moves the CV accuracy
        let mut max_delta: f64 = 0.0;
        for seed in 0..10 {
            let samples = clustered_samples(100, 6, 1.0, 0.8, 3000 + seed);
            let hyper = ProbeHyper {
                seed,
                ..ProbeHyper::default()
            };
            let (_, base) = fit_head_probe(&samples, &hyper).unwrap();
            let scaled: Vec<HeadSample> = samples
                .iter()
                .map(|s| HeadSample {
                    features: s.features.iter().map(|v| 5.0 * v).collect(),
                    label: s.label,
                    pair_id: s.pair_id,
                })
                .collect();
            let (_, after) = fit_head_probe(&scaled, &hyper).unwrap();
            max_delta = max_delta.max((base - after).abs());
        }
        assert!(max_delta <= 0.02, "max cv delta {max_delta}");
    }

    fn records_with_signal_head(n: usize, seed: u64) -> Vec<PairActivations> {
        // head (1, 0) carries a clean +/- separation, head (0, 1) is frozen
        // to identical features, the rest is noise
        let mut rng = SeededRng::new(seed);
        (0..n)
            .map(|pair_id| {
                let mut trusted = ActivationRecord::zeros(2, 2, 3);
                let mut untrusted = ActivationRecord::zeros(2, 2, 3);
                for l in 0..2 {
                    for h in 0..2 {
                        let (t, u) = if l == 1 && h == 0 {
                            let mut t = rng.gaussian(0.0, 0.3, 3).unwrap();
                            let mut u = rng.gaussian(0.0, 0.3, 3).unwrap();
                            t[0] += 3.0;
                            u[0] -= 3.0;
                            (t, u)
                        } else if l == 0 && h == 1 {
                            (vec![0.5, 0.5, 0.5], vec![0.5, 0.5, 0.5])
                        } else {
                            (
                                rng.gaussian(0.0, 1.0, 3).unwrap(),
                                rng.gaussian(0.0, 1.0, 3).unwrap(),
                            )
                        };
                        trusted.head_mut(l, h).copy_from_slice(&t);
                        untrusted.head_mut(l, h).copy_from_slice(&u);
                    }
                }
                PairActivations {
                    pair_id: pair_id as u64,
                    trusted,
                    untrusted,
                }
            })
            .collect()
    }

    #[test]
    fn score_all_heads_shape_and_signal() {
        let records = records_with_signal_head(60, 11);
        let scores = score_all_heads(&records, &ProbeHyper::default()).unwrap();
        assert_eq!(scores.len(), 4);
        let get = |l: usize, h: usize| {
            scores
                .iter()
                .find(|s| s.layer == l && s.head == h)
                .unwrap()
                .cv_accuracy
        };
        assert!(get(1, 0) > 0.95, "signal head scored {}", get(1, 0));
        assert_eq!(get(0, 1), 0.5, "identical-feature head must sit at 0.5");
    }

    #[test]
    fn score_all_heads_deterministic() {
        let records = records_with_signal_head(30, 12);
        let a = score_all_heads(&records, &ProbeHyper::default()).unwrap();
        let b = score_all_heads(&records, &ProbeHyper::default()).unwrap();
        assert_eq!(a, b);
    }

    fn score(layer: usize, head: usize, acc: f64) -> HeadScore {
        HeadScore {
            layer,
            head,
            cv_accuracy: acc,
        }
    }

    #[test]
    fn topk_basic_sort() {
        let scores = vec![score(0, 0, 0.9), score(0, 1, 0.8), score(1, 0, 0.7)];
        let set = select_topk(&scores, 2, Level::Image, "fp").unwrap();
        assert_eq!(set.k(), 2);
        assert_eq!((set.members[0].layer, set.members[0].head), (0, 0));
        assert_eq!((set.members[1].layer, set.members[1].head), (0, 1));
    }

    #[test]
    fn topk_tie_break_lexicographic() {
        let scores = vec![
            score(1, 1, 0.5),
            score(0, 1, 0.5),
            score(1, 0, 0.5),
            score(0, 0, 0.5),
        ];
        let set = select_topk(&scores, 3, Level::Image, "fp").unwrap();
        let picked: Vec<(usize, usize)> =
            set.members.iter().map(|m| (m.layer, m.head)).collect();
        assert_eq!(picked, vec![(0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn topk_out_of_range_rejected() {
        let scores = vec![score(0, 0, 0.5)];
        assert!(select_topk(&scores, 0, Level::Image, "fp").is_err());
        assert!(select_topk(&scores, 2, Level::Image, "fp").is_err());
    }

    #[test]
    fn topk_matches_brute_force_oracle_and_nests() {
        let mut rng = SeededRng::new(13);
        for trial in 0..1000 {
            let n = 2 + rng.range(15);
            let scores: Vec<HeadScore> = (0..n)
                .map(|i| score(i / 4, i % 4, (rng.range(11) as f64) / 10.0))
                .collect();
            let k = 1 + rng.range(n);
            let set = select_topk(&scores, k, Level::Image, "fp").unwrap();

            // brute-force oracle: full sort and slice
            let mut oracle: Vec<&HeadScore> = scores.iter().collect();
            oracle.sort_by(|a, b| {
                b.cv_accuracy
                    .partial_cmp(&a.cv_accuracy)
                    .unwrap()
                    .then(a.layer.cmp(&b.layer))
                    .then(a.head.cmp(&b.head))
            });
            for (m, o) in set.members.iter().zip(oracle.iter().take(k)) {
                assert_eq!((m.layer, m.head), (o.layer, o.head), "trial {trial}");
            }

            // monotone nesting
            if k < n {
                let bigger = select_topk(&scores, k + 1, Level::Image, "fp").unwrap();
                for m in &set.members {
                    assert!(
                        bigger
                            .members
                            .iter()
                            .any(|b| (b.layer, b.head) == (m.layer, m.head)),
                        "trial {trial}: nesting violated"
                    );
                }
            }
        }
    }
}
