//! Closed-form posterior and optimal ε-prediction for a Gaussian mixture.
//!
//! Under the forward process each component `k` of `N(μ_k, σ0² I)` becomes
//! `N(√ᾱ_t μ_k, (ᾱ_t σ0² + 1 - ᾱ_t) I)`, so the component posterior and the
//! posterior mean of `x0` are exact. The ε-prediction derived from that
//! posterior mean minimizes the noise-prediction loss for the mixture.

use std::collections::HashMap;
use std::sync::Arc;

use crate::denoiser::{Denoiser, DenoiserRole};
use crate::error::{Error, Result};
use crate::grid::Raster;
use crate::schedule::NoiseSchedule;
use crate::world::{restrict, Condition, GmmSpec};

struct Marginal {
    sqrt_ab: f64,
    variance: f64,
}

fn marginal(gmm: &GmmSpec, x_t: &Raster, t: usize, s: &NoiseSchedule) -> Result<Marginal> {
    s.check_timestep(t)?;
    if x_t.shape() != gmm.shape() {
        return Err(Error::ShapeMismatch {
            expected: gmm.shape(),
            got: x_t.shape(),
        });
    }
    let ab = s.alpha_bar(t);
    let variance = ab * gmm.sigma0() * gmm.sigma0() + (1.0 - ab);
    if variance <= 0.0 {
        return Err(Error::invalid("degenerate marginal: sigma0 = 0 at t = 0"));
    }
    Ok(Marginal {
        sqrt_ab: ab.sqrt(),
        variance,
    })
}

/// `p(k | x_t)` for every component, normalized with log-sum-exp.
pub fn gmm_posterior(gmm: &GmmSpec, x_t: &Raster, t: usize, s: &NoiseSchedule) -> Result<Vec<f64>> {
    let m = marginal(gmm, x_t, t, s)?;
    let x = x_t.as_slice();
    let mut logits: Vec<f64> = gmm
        .components()
        .iter()
        .map(|c| {
            let d2: f64 = x
                .iter()
                .zip(c.mean.as_slice())
                .map(|(xi, mi)| {
                    let d = xi - m.sqrt_ab * mi;
                    d * d
                })
                .sum();
            c.weight.ln() - d2 / (2.0 * m.variance)
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for l in &mut logits {
        *l = (*l - max).exp();
        z += *l;
    }
    for l in &mut logits {
        *l /= z;
    }
    Ok(logits)
}

/// `E[x0 | x_t]`.
pub fn gmm_posterior_mean(gmm: &GmmSpec, x_t: &Raster, t: usize, s: &NoiseSchedule) -> Result<Raster> {
    let m = marginal(gmm, x_t, t, s)?;
    let post = gmm_posterior(gmm, x_t, t, s)?;
    let shrink = m.sqrt_ab * gmm.sigma0() * gmm.sigma0() / m.variance;
    // Σ p_k [μ_k + shrink (x - √ᾱ μ_k)] = (1 - shrink √ᾱ) Σ p_k μ_k + shrink x
    let mut mix = vec![0.0; x_t.len()];
    for (p, c) in post.iter().zip(gmm.components()) {
        if *p == 0.0 {
            continue;
        }
        for (acc, mu) in mix.iter_mut().zip(c.mean.as_slice()) {
            *acc += p * mu;
        }
    }
    let keep = 1.0 - shrink * m.sqrt_ab;
    let data = mix
        .iter()
        .zip(x_t.as_slice())
        .map(|(mu, x)| keep * mu + shrink * x)
        .collect();
    let (h, w, c) = x_t.shape();
    Ok(Raster::from_parts(h, w, c, data))
}

/// Optimal ε-prediction `(x_t - √ᾱ_t E[x0|x_t]) / √(1-ᾱ_t)`; requires `t >= 1`.
pub fn gmm_denoise(gmm: &GmmSpec, x_t: &Raster, t: usize, s: &NoiseSchedule) -> Result<Raster> {
    if t == 0 {
        return Err(Error::invalid("noise prediction is undefined at t = 0"));
    }
    let x0 = gmm_posterior_mean(gmm, x_t, t, s)?;
    let (a, b) = s.coefficients(t);
    x_t.zip_map(&x0, |x, m| (x - a * m) / b)
}

/// Exact denoiser of a world mixture; each condition selects a restricted mixture.
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    role: DenoiserRole,
    schedule: Arc<NoiseSchedule>,
    mixtures: HashMap<Condition, GmmSpec>,
}

impl GmmDenoiser {
    pub fn new(gmm: &GmmSpec, schedule: Arc<NoiseSchedule>, role: DenoiserRole) -> Result<Self> {
        let mut scenes: Vec<_> = gmm.components().iter().map(|c| c.scene).collect();
        scenes.sort();
        scenes.dedup();
        let mut subjects: Vec<_> = gmm.components().iter().map(|c| c.subject).collect();
        subjects.sort();
        subjects.dedup();
        let scene_opts: Vec<_> = std::iter::once(None).chain(scenes.into_iter().map(Some)).collect();
        let subject_opts: Vec<_> = match role {
            DenoiserRole::Scene => vec![None],
            DenoiserRole::SceneSubject => std::iter::once(None).chain(subjects.into_iter().map(Some)).collect(),
        };
        let mut mixtures = HashMap::new();
        for &scene in &scene_opts {
            for &subject in &subject_opts {
                let cond = Condition { scene, subject };
                // Combinations absent from the mixture stay unregistered.
                if let Ok(m) = restrict(gmm, &cond) {
                    mixtures.insert(cond, m);
                }
            }
        }
        Ok(Self {
            role,
            schedule,
            mixtures,
        })
    }

    /// Scene-driven stand-in (TDM role).
    pub fn scene_model(gmm: &GmmSpec, schedule: Arc<NoiseSchedule>) -> Result<Self> {
        Self::new(gmm, schedule, DenoiserRole::Scene)
    }

    /// Subject-augmented stand-in (SDM role).
    pub fn subject_model(gmm: &GmmSpec, schedule: Arc<NoiseSchedule>) -> Result<Self> {
        Self::new(gmm, schedule, DenoiserRole::SceneSubject)
    }

    pub fn role(&self) -> DenoiserRole {
        self.role
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn mixture(&self, cond: &Condition) -> Result<&GmmSpec> {
        if !self.role.accepts(cond) {
            return Err(Error::invalid(format!(
                "{:?} denoiser does not accept condition {cond}",
                self.role
            )));
        }
        self.mixtures
            .get(cond)
            .ok_or_else(|| Error::EmptyCondition(cond.to_string()))
    }

    pub fn posterior(&self, x_t: &Raster, t: usize, cond: &Condition) -> Result<Vec<f64>> {
        gmm_posterior(self.mixture(cond)?, x_t, t, &self.schedule)
    }
}

impl Denoiser for GmmDenoiser {
    fn predict(&self, x_t: &Raster, t: usize, cond: &Condition) -> Result<Raster> {
        gmm_denoise(self.mixture(cond)?, x_t, t, &self.schedule)
    }
}
