//! Classifier-free guidance for the scene model and the subject model.

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::grid::Raster;
use crate::world::{Condition, GlyphKind, SceneKind};

/// Base term of the subject-model guidance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubjectAnchor {
    /// `ε(x_t | ∅) + s·R_S`.
    #[default]
    Unconditional,
    /// `ε(x_t | c) + s·R_S`.
    Conditional,
}

impl SubjectAnchor {
    pub fn id(self) -> &'static str {
        match self {
            SubjectAnchor::Unconditional => "unconditional",
            SubjectAnchor::Conditional => "conditional",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Guidance weight of the scene model.
    pub scene_weight: f64,
    /// Guidance weight of the subject model.
    pub subject_weight: f64,
    pub subject_anchor: SubjectAnchor,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scene_weight: 3.0,
            subject_weight: 3.0,
            subject_anchor: SubjectAnchor::Unconditional,
        }
    }
}

impl GuidanceConfig {
    /// Same weight for both models.
    pub fn uniform(weight: f64) -> Self {
        Self {
            scene_weight: weight,
            subject_weight: weight,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in [self.scene_weight, self.subject_weight] {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("guidance weight must be positive, got {w}")));
            }
        }
        Ok(())
    }
}

/// Guided prediction and the response it was extrapolated along.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedNoise {
    pub eps_hat: Raster,
    pub response: Raster,
}

/// `R_T = ε(c) - ε(∅)`, `ε̂_T = ε(∅) + s·R_T`.
pub fn cfg_scene<D: Denoiser + ?Sized>(
    d: &D,
    x_t: &Raster,
    t: usize,
    scene: Option<SceneKind>,
    g: &GuidanceConfig,
) -> Result<GuidedNoise> {
    g.validate()?;
    let uncond = d.predict(x_t, t, &Condition::NULL)?;
    let cond = d.predict(x_t, t, &Condition { scene, subject: None })?;
    let response = cond.sub(&uncond)?;
    let eps_hat = uncond.axpy(g.scene_weight, &response)?;
    Ok(GuidedNoise { eps_hat, response })
}

/// `R_S = ε(c, r) - ε(c)`, `ε̂_S = anchor + s·R_S`.
pub fn cfg_subject<D: Denoiser + ?Sized>(
    d: &D,
    x_t: &Raster,
    t: usize,
    scene: SceneKind,
    subject: Option<GlyphKind>,
    g: &GuidanceConfig,
) -> Result<GuidedNoise> {
    g.validate()?;
    let uncond = match g.subject_anchor {
        SubjectAnchor::Unconditional => Some(d.predict(x_t, t, &Condition::NULL)?),
        SubjectAnchor::Conditional => None,
    };
    let scene_only = d.predict(x_t, t, &Condition::scene(scene))?;
    let full = d.predict(
        x_t,
        t,
        &Condition {
            scene: Some(scene),
            subject,
        },
    )?;
    let response = full.sub(&scene_only)?;
    let base = uncond.as_ref().unwrap_or(&scene_only);
    let eps_hat = base.axpy(g.subject_weight, &response)?;
    Ok(GuidedNoise { eps_hat, response })
}
