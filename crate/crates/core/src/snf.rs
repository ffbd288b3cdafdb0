//! Saliency-adaptive noise fusion: salience maps, the binary mask and the
//! blended noise of one fusion step.

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::grid::{convolve_smooth, softmax_over_pixels, Kernel2D, Raster};
use crate::guidance::{cfg_scene, cfg_subject, GuidanceConfig, GuidedNoise};
use crate::world::{GlyphKind, SceneKind};

/// `Smooth(Abs(response))`, reduced to one channel by the mean of absolute values.
pub fn salience(response: &Raster, kernel: &Kernel2D) -> Raster {
    let magnitude = if response.channels() == 1 {
        response.abs()
    } else {
        response.mean_abs_channels()
    };
    convolve_smooth(&magnitude, kernel)
}

/// 1 where `softmax(Ω_S) >= softmax(Ω_T)`, else 0. Ties go to the subject model.
pub fn fusion_mask(omega_t: &Raster, omega_s: &Raster) -> Result<Raster> {
    omega_t.ensure_same_shape(omega_s)?;
    let pt = softmax_over_pixels(omega_t)?;
    let ps = softmax_over_pixels(omega_s)?;
    ps.zip_map(&pt, |s, t| if s >= t { 1.0 } else { 0.0 })
}

/// `M ⊙ ε_S + (1 - M) ⊙ ε_T`, with a single-channel mask broadcast over channels.
pub fn fuse_noise(mask: &Raster, eps_s: &Raster, eps_t: &Raster) -> Result<Raster> {
    eps_s.ensure_same_shape(eps_t)?;
    let (h, w, c) = eps_s.shape();
    if mask.shape() != (h, w, 1) {
        return Err(Error::ShapeMismatch {
            expected: (h, w, 1),
            got: mask.shape(),
        });
    }
    let m = mask.as_slice();
    let data = eps_s
        .as_slice()
        .iter()
        .zip(eps_t.as_slice())
        .enumerate()
        .map(|(i, (s, t))| {
            let k = m[i / c];
            k * s + (1.0 - k) * t
        })
        .collect();
    Ok(Raster::from_parts(h, w, c, data))
}

/// Salience maps and mask of one fusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct SnfRecord {
    pub omega_t: Raster,
    pub omega_s: Raster,
    pub mask: Raster,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnfOutput {
    pub eps: Raster,
    pub scene: GuidedNoise,
    pub subject: GuidedNoise,
    pub record: SnfRecord,
}

/// Both guided predictions on the same `x_t`, their salience maps, the mask and the fused noise.
#[allow(clippy::too_many_arguments)]
pub fn snf_step<T: Denoiser + ?Sized, S: Denoiser + ?Sized>(
    tdm: &T,
    sdm: &S,
    x_t: &Raster,
    t: usize,
    scene: SceneKind,
    subject: GlyphKind,
    g: &GuidanceConfig,
    kernel: &Kernel2D,
) -> Result<SnfOutput> {
    let scene_noise = cfg_scene(tdm, x_t, t, Some(scene), g)?;
    let subject_noise = cfg_subject(sdm, x_t, t, scene, Some(subject), g)?;
    let omega_t = salience(&scene_noise.response, kernel);
    let omega_s = salience(&subject_noise.response, kernel);
    let mask = fusion_mask(&omega_t, &omega_s)?;
    let eps = fuse_noise(&mask, &subject_noise.eps_hat, &scene_noise.eps_hat)?;
    Ok(SnfOutput {
        eps,
        scene: scene_noise,
        subject: subject_noise,
        record: SnfRecord { omega_t, omega_s, mask },
    })
}
