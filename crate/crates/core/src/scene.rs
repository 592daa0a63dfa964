//! Synthetic annotated images and POPE-style yes/no QA datasets.
//!
//! A scene is a `P x P` grid of `d_v`-dimensional patch features: object
//! patches carry a class-specific signature plus Gaussian jitter, empty
//! patches carry the background signature (zero) plus jitter. Scenes model
//! post-encoder visual tokens, so downstream corruption operates directly
//! in feature space.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mix64, Matrix, SeededRng};
use crate::vocab::{self, ClassId, TokenId};

/// Fixed salt for per-class feature signatures, so every corpus generated
/// with the same `d_v` shares the same class geometry.
const SIGNATURE_SALT: u64 = 0x5ce7e5;

/// Deterministic feature signature of a class.
pub fn class_signature(class: ClassId, d_v: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(mix64(SIGNATURE_SALT ^ (class as u64).wrapping_mul(0x9E37)));
    rng.gaussian(0.0, 1.0, d_v).expect("valid std")
}

/// Inclusive-exclusive patch-coordinate box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.row0 >= self.row1 || self.col0 >= self.col1 {
            return Err(Error::InvalidParameter(format!(
                "degenerate bbox {self:?}"
            )));
        }
        if self.row1 > p || self.col1 > p {
            return Err(Error::InvalidParameter(format!(
                "bbox {self:?} exceeds {p}x{p} grid"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row1 && col >= self.col0 && col < self.col1
    }

    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    fn overlaps(&self, other: &BBox) -> bool {
        self.row0 < other.row1
            && other.row0 < self.row1
            && self.col0 < other.col1
            && other.col0 < self.col1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub label: ClassId,
    pub bbox: BBox,
}

/// How a serialized scene was derived from a clean one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Full,
    Region,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseProvenance {
    pub kind: NoiseKind,
    pub source_id: u64,
}

/// Patch-feature grid plus object annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneImage {
    pub id: u64,
    /// Grid side length; `patches` has `p * p` rows.
    pub p: usize,
    /// Row `r * p + c` holds the feature vector of patch `(r, c)`.
    pub patches: Matrix,
    pub objects: Vec<ObjectAnnotation>,
    #[serde(default)]
    pub corruption: Option<NoiseProvenance>,
}

impl SceneImage {
    pub fn d_v(&self) -> usize {
        self.patches.cols()
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        self.patches.row(row * self.p + col)
    }

    pub fn present_classes(&self) -> BTreeSet<ClassId> {
        self.objects.iter().map(|o| o.label).collect()
    }

    pub fn find_object(&self, label: ClassId) -> Option<&ObjectAnnotation> {
        self.objects.iter().find(|o| o.label == label)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches.rows() != self.p * self.p {
            return Err(Error::InvalidParameter(format!(
                "scene {} has {} patch rows for grid side {}",
                self.id,
                self.patches.rows(),
                self.p
            )));
        }
        self.patches.check_finite("scene patches")?;
        for obj in &self.objects {
            obj.bbox.validate(self.p)?;
        }
        Ok(())
    }
}

/// One directed co-occurrence rule: when `anchor` starts a scene that has
/// room for a second object, `partner` joins with probability `prob`
/// (otherwise it is kept out of that scene entirely).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoOccurrence {
    pub anchor: ClassId,
    pub partner: ClassId,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// Grid side length P.
    pub p: usize,
    /// Patch feature dimension.
    pub d_v: usize,
    pub class_count: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Std of the additive Gaussian jitter on every patch.
    pub jitter_std: f64,
    #[serde(default)]
    pub co_occurrence: Vec<CoOccurrence>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidParameter(
                "class_count must be >= 2".into(),
            ));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::InvalidParameter(
                "objects_min must be <= objects_max".into(),
            ));
        }
        if self.objects_max > self.p * self.p {
            return Err(Error::InvalidParameter(format!(
                "objects_max {} exceeds patch count {}",
                self.objects_max,
                self.p * self.p
            )));
        }
        if self.jitter_std < 0.0 {
            return Err(Error::InvalidParameter("jitter_std must be >= 0".into()));
        }
        for entry in &self.co_occurrence {
            if entry.anchor >= self.class_count || entry.partner >= self.class_count {
                return Err(Error::InvalidParameter(format!(
                    "co-occurrence entry {entry:?} references class outside 0..{}",
                    self.class_count
                )));
            }
            if !(0.0..=1.0).contains(&entry.prob) {
                return Err(Error::InvalidParameter(format!(
                    "co-occurrence prob {} outside [0, 1]",
                    entry.prob
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Popular,
    Adversarial,
}

/// One yes/no object-presence question against a scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub image_id: u64,
    pub question_tokens: Vec<TokenId>,
    pub gold: Answer,
    pub strategy: Strategy,
    pub probed_label: ClassId,
}

const PLACEMENT_ATTEMPTS: usize = 32;
const SCENE_RETRIES: usize = 8;

/// Generate one scene: pick classes (honoring co-occurrence rules), pack
/// non-overlapping boxes, render signatures plus jitter.
pub fn generate_scene(rng: &mut SeededRng, spec: &SceneSpec, id: u64) -> Result<SceneImage> {
    spec.validate()?;
    let n_objects = if spec.objects_max == spec.objects_min {
        spec.objects_min
    } else {
        spec.objects_min + rng.range(spec.objects_max - spec.objects_min + 1)
    };

    // Class selection: anchor first, then co-occurrence partners, then
    // uniform fill from the classes that are neither placed nor banned.
    let mut classes: Vec<ClassId> = Vec::with_capacity(n_objects);
    let mut banned: BTreeSet<ClassId> = BTreeSet::new();
    if n_objects > 0 {
        let anchor = rng.range(spec.class_count);
        classes.push(anchor);
        for entry in &spec.co_occurrence {
            if entry.anchor != anchor || classes.contains(&entry.partner) {
                continue;
            }
            if rng.next_f64() < entry.prob {
                if classes.len() < n_objects {
                    classes.push(entry.partner);
                }
            } else {
                banned.insert(entry.partner);
            }
        }
        while classes.len() < n_objects {
            let pool: Vec<ClassId> = (0..spec.class_count)
                .filter(|c| !classes.contains(c) && !banned.contains(c))
                .collect();
            if pool.is_empty() {
                break;
            }
            classes.push(pool[rng.range(pool.len())]);
        }
    }

    for _ in 0..SCENE_RETRIES {
        if let Some(objects) = try_pack(rng, spec, &classes) {
            return Ok(render(rng, spec, id, objects));
        }
    }
    Err(Error::Generation(format!(
        "could not pack {} objects into a {}x{} grid after {} retries",
        classes.len(),
        spec.p,
        spec.p,
        SCENE_RETRIES
    )))
}

fn try_pack(
    rng: &mut SeededRng,
    spec: &SceneSpec,
    classes: &[ClassId],
) -> Option<Vec<ObjectAnnotation>> {
    let max_side = spec.p.min(2);
    let mut placed: Vec<ObjectAnnotation> = Vec::with_capacity(classes.len());
    'object: for &label in classes {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let h = 1 + rng.range(max_side);
            let w = 1 + rng.range(max_side);
            let row0 = rng.range(spec.p - h + 1);
            let col0 = rng.range(spec.p - w + 1);
            let bbox = BBox {
                row0,
                col0,
                row1: row0 + h,
                col1: col0 + w,
            };
            if placed.iter().all(|o| !o.bbox.overlaps(&bbox)) {
                placed.push(ObjectAnnotation { label, bbox });
                continue 'object;
            }
        }
        return None;
    }
    Some(placed)
}

fn render(rng: &mut SeededRng, spec: &SceneSpec, id: u64, objects: Vec<ObjectAnnotation>) -> SceneImage {
    let mut patches = Matrix::zeros(spec.p * spec.p, spec.d_v);
    for row in 0..spec.p {
        for col in 0..spec.p {
            let owner = objects.iter().find(|o| o.bbox.contains(row, col));
            let base = owner.map(|o| class_signature(o.label, spec.d_v));
            let dst = patches.row_mut(row * spec.p + col);
            for (i, v) in dst.iter_mut().enumerate() {
                let signal = base.as_ref().map_or(0.0, |s| s[i]);
                *v = signal + spec.jitter_std * rng.standard_gaussian();
            }
        }
    }
    SceneImage {
        id,
        p: spec.p,
        patches,
        objects,
        corruption: None,
    }
}

/// Generate `count` scenes with ids starting at `first_id`.
pub fn generate_scenes(
    rng: &mut SeededRng,
    spec: &SceneSpec,
    count: usize,
    first_id: u64,
) -> Result<Vec<SceneImage>> {
    (0..count)
        .map(|i| generate_scene(rng, spec, first_id + i as u64))
        .collect()
}

/// Presence counts per class over a corpus.
pub fn class_frequencies(scenes: &[SceneImage], class_count: usize) -> Vec<usize> {
    let mut freq = vec![0usize; class_count];
    for scene in scenes {
        for class in scene.present_classes() {
            freq[class] += 1;
        }
    }
    freq
}

/// Co-occurrence score of an absent class against the present set, read off
/// the generation table: the summed probability over both rule directions.
pub fn co_occurrence_score(
    table: &[CoOccurrence],
    present: &BTreeSet<ClassId>,
    candidate: ClassId,
) -> f64 {
    table
        .iter()
        .filter(|e| {
            (present.contains(&e.anchor) && e.partner == candidate)
                || (present.contains(&e.partner) && e.anchor == candidate)
        })
        .map(|e| e.prob)
        .sum()
}

/// A balanced QA dataset plus the number of scenes skipped because their
/// absent-class pool was too small.
#[derive(Debug, Clone)]
pub struct PopeDataset {
    pub pairs: Vec<QAPair>,
    pub skipped_scenes: usize,
}

/// Build a balanced yes/no dataset: one yes question per present class and
/// the same number of negatives chosen by `strategy`.
pub fn generate_pope_dataset(
    scenes: &[SceneImage],
    spec: &SceneSpec,
    strategy: Strategy,
    rng: &mut SeededRng,
) -> Result<PopeDataset> {
    if scenes.is_empty() {
        return Err(Error::InvalidParameter("scenes must be non-empty".into()));
    }
    if let Some(empty) = scenes.iter().find(|s| s.objects.is_empty()) {
        return Err(Error::InvalidParameter(format!(
            "scene {} has no objects",
            empty.id
        )));
    }
    let freq = class_frequencies(scenes, spec.class_count);
    let mut pairs = Vec::new();
    let mut skipped_scenes = 0usize;

    for scene in scenes {
        let present = scene.present_classes();
        let absent: Vec<ClassId> = (0..spec.class_count)
            .filter(|c| !present.contains(c))
            .collect();
        if absent.len() < present.len() {
            skipped_scenes += 1;
            continue;
        }
        let need = present.len();
        let negatives: Vec<ClassId> = match strategy {
            Strategy::Random => {
                let mut pool = absent;
                rng.shuffle(&mut pool);
                pool.truncate(need);
                pool
            }
            Strategy::Popular => {
                let mut pool = absent;
                // most corpus-frequent first; ties by class id ascending
                pool.sort_by(|a, b| freq[*b].cmp(&freq[*a]).then(a.cmp(b)));
                pool.truncate(need);
                pool
            }
            Strategy::Adversarial => {
                let mut pool = absent;
                pool.sort_by(|a, b| {
                    let sa = co_occurrence_score(&spec.co_occurrence, &present, *a);
                    let sb = co_occurrence_score(&spec.co_occurrence, &present, *b);
                    sb.partial_cmp(&sa).unwrap().then(a.cmp(b))
                });
                pool.truncate(need);
                pool
            }
        };
        for &label in present.iter() {
            pairs.push(QAPair {
                image_id: scene.id,
                question_tokens: vocab::presence_question(label),
                gold: Answer::Yes,
                strategy,
                probed_label: label,
            });
        }
        for label in negatives {
            pairs.push(QAPair {
                image_id: scene.id,
                question_tokens: vocab::presence_question(label),
                gold: Answer::No,
                strategy,
                probed_label: label,
            });
        }
    }
    Ok(PopeDataset {
        pairs,
        skipped_scenes,
    })
}

/// Drop a `skew` fraction of the no-pairs whose probed label falls in the
/// `designated_count` most yes-frequent classes (ties by class id). The
/// trained model then inherits a yes-bias on those classes.
pub fn skew_training_set(
    pairs: &[QAPair],
    skew: f64,
    designated_count: usize,
    rng: &mut SeededRng,
) -> Result<Vec<QAPair>> {
    if !(0.0..=1.0).contains(&skew) {
        return Err(Error::InvalidParameter(format!(
            "skew must be in [0, 1], got {skew}"
        )));
    }
    let yes = pairs.iter().filter(|p| p.gold == Answer::Yes).count();
    if yes * 2 != pairs.len() {
        return Err(Error::InvalidParameter(format!(
            "input must be balanced, got {yes} yes out of {}",
            pairs.len()
        )));
    }
    if skew == 0.0 || designated_count == 0 {
        return Ok(pairs.to_vec());
    }

    let designated = designated_classes(pairs, designated_count);
    let candidate_indices: Vec<usize> = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.gold == Answer::No && designated.contains(&p.probed_label))
        .map(|(i, _)| i)
        .collect();
    let remove_count = (skew * candidate_indices.len() as f64).floor() as usize;
    let mut shuffled = candidate_indices;
    rng.shuffle(&mut shuffled);
    let removed: BTreeSet<usize> = shuffled.into_iter().take(remove_count).collect();
    Ok(pairs
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, p)| p.clone())
        .collect())
}

/// The `count` classes with the most yes-pairs, ties by class id ascending.
pub fn designated_classes(pairs: &[QAPair], count: usize) -> BTreeSet<ClassId> {
    let mut yes_freq: std::collections::BTreeMap<ClassId, usize> = Default::default();
    for pair in pairs.iter().filter(|p| p.gold == Answer::Yes) {
        *yes_freq.entry(pair.probed_label).or_insert(0) += 1;
    }
    let mut ranked: Vec<(ClassId, usize)> = yes_freq.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(count).map(|(c, _)| c).collect()
}
