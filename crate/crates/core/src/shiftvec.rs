//! Trusted/untrusted pair construction and activation shift vectors.
//!
//! For each "yes" QA pair the trusted member keeps the clean image and the
//! untrusted member gets a diffusion-corrupted one (whole image or just the
//! probed object's box). Both members run through the model with capture
//! enabled; the per-head mean of (trusted - untrusted) last-token
//! activations is the shift vector later injected as a head bias.

use serde::{Deserialize, Serialize};

use crate::corrupt::{diffuse_full, diffuse_region, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{embed_sequence, forward, ActivationRecord, Capture, ModelConfig, ModelWeights};
use crate::numerics::SeededRng;
use crate::par;
use crate::scene::{Answer, QAPair, SceneImage};
use crate::vocab::{self, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Image,
    Object,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Image => write!(f, "image"),
            Level::Object => write!(f, "object"),
        }
    }
}

/// One trusted/untrusted sample pair at a declared level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePair {
    pub pair_id: u64,
    pub level: Level,
    /// The fixed probe question.
    pub question_tokens: Vec<TokenId>,
    /// The probed object's tokens, appended as the answer.
    pub object_tokens: Vec<TokenId>,
    pub trusted: SceneImage,
    pub untrusted: SceneImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePairSet {
    pub level: Level,
    pub pairs: Vec<ProbePair>,
}

impl ProbePairSet {
    /// Number of pairs B.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.len() < 2 {
            return Err(Error::InvalidParameter(
                "a probe pair set needs at least 2 pairs for 2-fold cross-validation".into(),
            ));
        }
        for pair in &self.pairs {
            if pair.trusted.patches.rows() != pair.untrusted.patches.rows()
                || pair.trusted.d_v() != pair.untrusted.d_v()
                || pair.trusted.objects != pair.untrusted.objects
            {
                return Err(Error::InvalidParameter(format!(
                    "pair {} members disagree in shape or annotations",
                    pair.pair_id
                )));
            }
        }
        Ok(())
    }
}

/// Build probe pairs from gold-yes QA data. Image level corrupts the whole
/// image; object level corrupts only the probed object's box.
pub fn build_pairs(
    dataset: &[(QAPair, SceneImage)],
    level: Level,
    schedule: &NoiseSchedule,
    rng: &SeededRng,
) -> Result<ProbePairSet> {
    let mut pairs = Vec::with_capacity(dataset.len());
    for (index, (qa, image)) in dataset.iter().enumerate() {
        if qa.gold != Answer::Yes {
            return Err(Error::RejectedInput {
                index,
                reason: "probe pairs require gold == yes".into(),
            });
        }
        let mut pair_rng = rng.derive(index as u64);
        let untrusted = match level {
            Level::Image => diffuse_full(image, schedule, &mut pair_rng),
            Level::Object => {
                let annotation =
                    image
                        .find_object(qa.probed_label)
                        .ok_or_else(|| Error::RejectedInput {
                            index,
                            reason: format!(
                                "probed label {} not annotated in scene {}",
                                qa.probed_label, image.id
                            ),
                        })?;
                diffuse_region(image, &annotation.bbox, schedule, &mut pair_rng)?
            }
        };
        pairs.push(ProbePair {
            pair_id: index as u64,
            level,
            question_tokens: vocab::probe_question(),
            object_tokens: vocab::object_answer(qa.probed_label),
            trusted: image.clone(),
            untrusted,
        });
    }
    let set = ProbePairSet { level, pairs };
    set.validate()?;
    Ok(set)
}

/// Capture-enabled forwards of `[visual ++ probe question ++ object tokens]`
/// for both members of a pair; activations taken at the last token.
pub fn extract_pair_activations(
    weights: &ModelWeights,
    pair: &ProbePair,
) -> Result<(ActivationRecord, ActivationRecord)> {
    let mut run = |image: &SceneImage| -> Result<ActivationRecord> {
        let seq = embed_sequence(
            weights,
            &pair.question_tokens,
            image,
            Some(&pair.object_tokens),
        )?;
        let out = forward(weights, &seq, None, Capture::LastToken)?;
        Ok(out.record.expect("capture requested"))
    };
    Ok((run(&pair.trusted)?, run(&pair.untrusted)?))
}

/// Activations of one pair, tagged with its id for order-independent
/// reductions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairActivations {
    pub pair_id: u64,
    pub trusted: ActivationRecord,
    pub untrusted: ActivationRecord,
}

/// Extract activations for every pair in the set (parallel across pairs).
pub fn extract_all(weights: &ModelWeights, set: &ProbePairSet) -> Result<Vec<PairActivations>> {
    let results: Vec<Result<PairActivations>> = par::map_slice(&set.pairs, |pair| {
        let (trusted, untrusted) = extract_pair_activations(weights, pair)?;
        Ok(PairActivations {
            pair_id: pair.pair_id,
            trusted,
            untrusted,
        })
    });
    results.into_iter().collect()
}

/// Mean trusted-minus-untrusted activation per head, `[L][N][d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftVectors {
    pub level: Level,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub b_used: usize,
    pub model_fingerprint: String,
    pub data: Vec<f64>,
}

impl ShiftVectors {
    #[inline]
    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let base = (layer * self.heads + head) * self.dim;
        &self.data[base..base + self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.layers * self.heads * self.dim {
            return Err(Error::Artifact(format!(
                "shift payload length {} does not match {}x{}x{}",
                self.data.len(),
                self.layers,
                self.heads,
                self.dim
            )));
        }
        Ok(())
    }

    pub fn check_fingerprint(&self, expected: &str) -> Result<()> {
        if self.model_fingerprint != expected {
            return Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                actual: self.model_fingerprint.clone(),
            });
        }
        Ok(())
    }
}

/// Sum vectors over a fixed pairwise tree; with the input canonically
/// sorted, the reduction is bit-identical under any input permutation.
fn tree_sum(diffs: &[Vec<f64>]) -> Vec<f64> {
    match diffs.len() {
        1 => diffs[0].clone(),
        n => {
            let (a, b) = diffs.split_at(n / 2);
            let mut left = tree_sum(a);
            let right = tree_sum(b);
            for (l, r) in left.iter_mut().zip(&right) {
                *l += r;
            }
            left
        }
    }
}

/// `vectors[l][n] = (1/B) * sum_i (trusted_i[l][n] - untrusted_i[l][n])`.
pub fn compute_shift(
    records: &[PairActivations],
    config: &ModelConfig,
    level: Level,
    model_fingerprint: &str,
) -> Result<ShiftVectors> {
    if records.is_empty() {
        return Err(Error::InvalidParameter(
            "compute_shift needs at least one record".into(),
        ));
    }
    for (index, rec) in records.iter().enumerate() {
        if !rec.trusted.matches_config(config) || !rec.untrusted.matches_config(config) {
            return Err(Error::RejectedInput {
                index,
                reason: format!(
                    "activation record shape does not match model {}x{}x{}",
                    config.layers, config.heads, config.head_dim
                ),
            });
        }
    }
    let mut ids: Vec<u64> = records.iter().map(|r| r.pair_id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidParameter(
            "duplicate pair_id in activation records".into(),
        ));
    }

    // canonical order by pair id, then per-pair differences, then tree sum
    let mut sorted: Vec<&PairActivations> = records.iter().collect();
    sorted.sort_by_key(|r| r.pair_id);
    let diffs: Vec<Vec<f64>> = sorted
        .iter()
        .map(|r| {
            r.trusted
                .data()
                .iter()
                .zip(r.untrusted.data())
                .map(|(t, u)| t - u)
                .collect()
        })
        .collect();
    let mut sum = tree_sum(&diffs);
    let scale = 1.0 / records.len() as f64;
    for v in sum.iter_mut() {
        *v *= scale;
    }
    Ok(ShiftVectors {
        level,
        layers: config.layers,
        heads: config.heads,
        dim: config.head_dim,
        b_used: records.len(),
        model_fingerprint: model_fingerprint.to_string(),
        data: sum,
    })
}
