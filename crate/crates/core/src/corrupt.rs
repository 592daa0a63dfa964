//! Forward-diffusion corruption of scene images.
//!
//! Each step applies `v <- sqrt(1 - beta_t) * v + sqrt(beta_t) * eps` to
//! every selected patch entry, so after T steps the marginal is
//! `N(sqrt(alpha_bar) * v0, (1 - alpha_bar) * I)` with
//! `alpha_bar = prod(1 - beta_t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::scene::{BBox, NoiseKind, NoiseProvenance, SceneImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter(
                "schedule needs at least one step".into(),
            ));
        }
        if let Some(bad) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::InvalidParameter(format!(
                "beta {bad} outside [0, 1]"
            )));
        }
        Ok(Self { betas })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Product of `1 - beta_t`; the surviving signal fraction (squared).
    pub fn alpha_bar(&self) -> f64 {
        self.betas.iter().map(|b| 1.0 - b).product()
    }
}

/// Linear interpolation from `beta_start` to `beta_end` over `steps` steps.
/// A single step uses `beta_start`.
pub fn default_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidParameter("steps must be >= 1".into()));
    }
    if !(0.0 <= beta_start && beta_start <= beta_end && beta_end <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 <= beta_start <= beta_end <= 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas = if steps == 1 {
        vec![beta_start]
    } else {
        (0..steps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::new(betas)
}

/// Shared step loop: per diffusion step, patches are visited in row-major
/// order and unmasked patches consume no randomness, so a full-grid region
/// is draw-for-draw identical to a full-image pass under the same seed.
fn diffuse_masked(
    image: &SceneImage,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
    mask: impl Fn(usize, usize) -> bool,
    kind: NoiseKind,
) -> SceneImage {
    let mut out = image.clone();
    let p = image.p;
    for &beta in schedule.betas() {
        let keep = (1.0 - beta).sqrt();
        let noise = beta.sqrt();
        for row in 0..p {
            for col in 0..p {
                if !mask(row, col) {
                    continue;
                }
                for v in out.patches.row_mut(row * p + col) {
                    *v = keep * *v + noise * rng.standard_gaussian();
                }
            }
        }
    }
    out.corruption = Some(NoiseProvenance {
        kind,
        source_id: image.id,
    });
    out
}

/// Diffuse every patch; annotations are preserved unchanged.
pub fn diffuse_full(image: &SceneImage, schedule: &NoiseSchedule, rng: &mut SeededRng) -> SceneImage {
    diffuse_masked(image, schedule, rng, |_, _| true, NoiseKind::Full)
}

/// Diffuse only the patches inside `bbox`; everything else is bit-identical
/// to the input.
pub fn diffuse_region(
    image: &SceneImage,
    bbox: &BBox,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<SceneImage> {
    bbox.validate(image.p)?;
    Ok(diffuse_masked(
        image,
        schedule,
        rng,
        |row, col| bbox.contains(row, col),
        NoiseKind::Region,
    ))
}
