//! Composition of shift vectors and head sets into the inference-time bias.
//!
//! `bias(l, n) = [in image set] * alpha * S_img[l][n]
//!             + [in object set] * beta * S_obj[l][n]`
//!
//! Heads selected by both levels receive the sum of both terms; heads in
//! neither set are absent from the map. The bias is composed once per
//! configuration and shared across forwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{answer_yes_no, DenseBias, HeadBias, ModelWeights};
use crate::probes::HeadSet;
use crate::scene::{Answer, QAPair, SceneImage};
use crate::shiftvec::ShiftVectors;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionConfig {
    /// Image-level intensity.
    pub alpha: f64,
    /// Object-level intensity.
    pub beta: f64,
    pub k_img: usize,
    pub k_obj: usize,
    pub enable_image: bool,
    pub enable_object: bool,
}

impl InterventionConfig {
    pub fn disabled() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            k_img: 0,
            k_obj: 0,
            enable_image: false,
            enable_object: false,
        }
    }
}

fn apply_level(
    bias: &mut HeadBias,
    shift: &ShiftVectors,
    set: &HeadSet,
    intensity: f64,
    k: usize,
) -> Result<()> {
    if k > set.members.len() {
        return Err(Error::InvalidParameter(format!(
            "requested k {k} exceeds the {} ranked heads in the set",
            set.members.len()
        )));
    }
    for member in &set.members[..k] {
        if member.layer >= shift.layers || member.head >= shift.heads {
            return Err(Error::InvalidParameter(format!(
                "head ({}, {}) outside the {}x{} shift table",
                member.layer, member.head, shift.layers, shift.heads
            )));
        }
        bias.add_scaled(
            member.layer,
            member.head,
            intensity,
            shift.head(member.layer, member.head),
        );
    }
    Ok(())
}

/// Compose the additive head bias from the enabled levels. All fingerprints
/// involved must agree; a disabled level contributes nothing regardless of
/// its intensity and K.
pub fn compose_bias(
    image: Option<(&ShiftVectors, &HeadSet)>,
    object: Option<(&ShiftVectors, &HeadSet)>,
    cfg: &InterventionConfig,
) -> Result<HeadBias> {
    let mut fingerprints: Vec<&str> = Vec::new();
    if let Some((shift, set)) = image {
        fingerprints.push(&shift.model_fingerprint);
        fingerprints.push(&set.model_fingerprint);
    }
    if let Some((shift, set)) = object {
        fingerprints.push(&shift.model_fingerprint);
        fingerprints.push(&set.model_fingerprint);
    }
    if let Some(first) = fingerprints.first() {
        if let Some(other) = fingerprints.iter().find(|fp| fp != &first) {
            return Err(Error::FingerprintMismatch {
                expected: first.to_string(),
                actual: other.to_string(),
            });
        }
    }

    let mut bias = HeadBias::new();
    if cfg.enable_image {
        let (shift, set) = image.ok_or_else(|| {
            Error::InvalidParameter("image level enabled but artifacts missing".into())
        })?;
        apply_level(&mut bias, shift, set, cfg.alpha, cfg.k_img)?;
    }
    if cfg.enable_object {
        let (shift, set) = object.ok_or_else(|| {
            Error::InvalidParameter("object level enabled but artifacts missing".into())
        })?;
        apply_level(&mut bias, shift, set, cfg.beta, cfg.k_obj)?;
    }
    Ok(bias)
}

/// Yes/no answer with the composed bias threaded into every forward pass.
pub fn intervened_answer(
    weights: &ModelWeights,
    qa: &QAPair,
    image: &SceneImage,
    bias: &HeadBias,
) -> Result<Answer> {
    let dense = DenseBias::new(bias, &weights.config)?;
    answer_yes_no(weights, qa, image, Some(&dense))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{embed_sequence, forward, Capture, ModelConfig};
    use crate::numerics::{Matrix, SeededRng};
    use crate::probes::HeadSetMember;
    use crate::scene::Strategy;
    use crate::shiftvec::Level;
    use crate::vocab;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            head_dim: 3,
            vocab: 20,
            d_v: 3,
            n_visual: 4,
            max_seq: 16,
        }
    }

    fn shift_for(level: Level, fp: &str, fill: impl Fn(usize) -> f64) -> ShiftVectors {
        ShiftVectors {
            level,
            layers: 2,
            heads: 2,
            dim: 3,
            b_used: 4,
            model_fingerprint: fp.to_string(),
            data: (0..12).map(fill).collect(),
        }
    }

    fn set_for(level: Level, fp: &str, members: &[(usize, usize)]) -> HeadSet {
        HeadSet {
            level,
            members: members
                .iter()
                .map(|&(layer, head)| HeadSetMember {
                    layer,
                    head,
                    cv_accuracy: 0.9,
                })
                .collect(),
            model_fingerprint: fp.to_string(),
        }
    }

    fn intervention(alpha: f64, beta: f64, k: usize) -> InterventionConfig {
        InterventionConfig {
            alpha,
            beta,
            k_img: k,
            k_obj: k,
            enable_image: true,
            enable_object: true,
        }
    }

    #[test]
    fn zero_intensity_bias_is_present_but_zero() {
        let shift_img = shift_for(Level::Image, "fp", |i| i as f64);
        let shift_obj = shift_for(Level::Object, "fp", |i| -(i as f64));
        let set_img = set_for(Level::Image, "fp", &[(0, 0)]);
        let set_obj = set_for(Level::Object, "fp", &[(1, 1)]);
        let bias = compose_bias(
            Some((&shift_img, &set_img)),
            Some((&shift_obj, &set_obj)),
            &intervention(0.0, 0.0, 1),
        )
        .unwrap();
        assert_eq!(bias.len(), 2);
        for (_, vec) in bias.iter() {
            assert!(vec.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn disabled_object_level_gives_pure_image_term() {
        let shift_img = shift_for(Level::Image, "fp", |i| i as f64 + 1.0);
        let shift_obj = shift_for(Level::Object, "fp", |i| 100.0 * i as f64);
        let set_img = set_for(Level::Image, "fp", &[(0, 1)]);
        let set_obj = set_for(Level::Object, "fp", &[(0, 1)]);
        let mut cfg = intervention(2.0, 9.0, 1);
        cfg.enable_object = false;
        let bias = compose_bias(
            Some((&shift_img, &set_img)),
            Some((&shift_obj, &set_obj)),
            &cfg,
        )
        .unwrap();
        assert_eq!(bias.len(), 1);
        let expected: Vec<f64> = shift_img.head(0, 1).iter().map(|v| 2.0 * v).collect();
        assert_eq!(bias.get(0, 1).unwrap(), expected.as_slice());
    }

    #[test]
    fn overlapping_head_receives_exact_sum() {
        let shift_img = shift_for(Level::Image, "fp", |i| i as f64);
        let shift_obj = shift_for(Level::Object, "fp", |i| 10.0 + i as f64);
        let set_img = set_for(Level::Image, "fp", &[(1, 0)]);
        let set_obj = set_for(Level::Object, "fp", &[(1, 0)]);
        let bias = compose_bias(
            Some((&shift_img, &set_img)),
            Some((&shift_obj, &set_obj)),
            &intervention(1.0, 1.0, 1),
        )
        .unwrap();
        assert_eq!(bias.len(), 1);
        let expected: Vec<f64> = shift_img
            .head(1, 0)
            .iter()
            .zip(shift_obj.head(1, 0))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(bias.get(1, 0).unwrap(), expected.as_slice());
    }

    #[test]
    fn fingerprint_mismatch_is_a_hard_error() {
        let shift_img = shift_for(Level::Image, "fp_a", |i| i as f64);
        let shift_obj = shift_for(Level::Object, "fp_b", |i| i as f64);
        let set_img = set_for(Level::Image, "fp_a", &[(0, 0)]);
        let set_obj = set_for(Level::Object, "fp_b", &[(0, 0)]);
        assert!(matches!(
            compose_bias(
                Some((&shift_img, &set_img)),
                Some((&shift_obj, &set_obj)),
                &intervention(1.0, 1.0, 1),
            ),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn k_beyond_ranked_members_rejected() {
        let shift_img = shift_for(Level::Image, "fp", |i| i as f64);
        let set_img = set_for(Level::Image, "fp", &[(0, 0)]);
        let mut cfg = intervention(1.0, 1.0, 2);
        cfg.enable_object = false;
        assert!(compose_bias(Some((&shift_img, &set_img)), None, &cfg).is_err());
    }

    #[test]
    fn zero_and_empty_bias_keep_logits_bitwise_identical() {
        let weights = ModelWeights::init(cfg(), &mut SeededRng::new(50)).unwrap();
        let mut rng = SeededRng::new(51);
        let image = SceneImage {
            id: 0,
            p: 2,
            patches: Matrix::from_fn(4, 3, |_, _| rng.standard_gaussian()),
            objects: vec![],
            corruption: None,
        };
        let seq = embed_sequence(&weights, &vocab::presence_question(2), &image, None).unwrap();
        let baseline = forward(&weights, &seq, None, Capture::None).unwrap();

        let fp = weights.fingerprint();
        let shift_img = shift_for(Level::Image, &fp, |i| (i as f64).cos());
        let shift_obj = shift_for(Level::Object, &fp, |i| (i as f64).sin());
        let set_img = set_for(Level::Image, &fp, &[(0, 0), (1, 1)]);
        let set_obj = set_for(Level::Object, &fp, &[(0, 1)]);
        let zero_bias = compose_bias(
            Some((&shift_img, &set_img)),
            Some((&shift_obj, &set_obj)),
            &InterventionConfig {
                alpha: 0.0,
                beta: 0.0,
                k_img: 2,
                k_obj: 1,
                enable_image: true,
                enable_object: true,
            },
        )
        .unwrap();
        assert!(!zero_bias.is_empty());

        for bias in [HeadBias::new(), zero_bias] {
            let dense = DenseBias::new(&bias, &weights.config).unwrap();
            let out = forward(&weights, &seq, Some(&dense), Capture::None).unwrap();
            let same = baseline
                .logits
                .data()
                .iter()
                .zip(out.logits.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "biased logits differ from baseline");
        }
    }

    #[test]
    fn intervened_answer_matches_plain_answer_for_empty_bias() {
        let weights = ModelWeights::init(cfg(), &mut SeededRng::new(52)).unwrap();
        let mut rng = SeededRng::new(53);
        for trial in 0..20 {
            let image = SceneImage {
                id: trial,
                p: 2,
                patches: Matrix::from_fn(4, 3, |_, _| rng.standard_gaussian()),
                objects: vec![],
                corruption: None,
            };
            let qa = QAPair {
                image_id: trial,
                question_tokens: vocab::presence_question(rng.range(5)),
                gold: Answer::Yes,
                strategy: Strategy::Random,
                probed_label: 0,
            };
            let plain = answer_yes_no(&weights, &qa, &image, None).unwrap();
            let steered = intervened_answer(&weights, &qa, &image, &HeadBias::new()).unwrap();
            assert_eq!(plain, steered);
        }
    }
}
