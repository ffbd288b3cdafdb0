//! Noise schedule, forward noising and the deterministic DDIM update.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Raster;

/// Parameters of a linear beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<(NoiseSchedule, TimestepPlan)> {
        let schedule = build_schedule(self.train_steps, self.beta_start, self.beta_end)?;
        let plan = make_plan(self.train_steps, self.inference_steps)?;
        Ok((schedule, plan))
    }
}

/// Betas for `t = 1..=T` and cumulative products `ᾱ_0..=ᾱ_T` with `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn train_steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t > self.train_steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [0, {}]",
                self.train_steps()
            )));
        }
        Ok(())
    }

    /// `(√ᾱ_t, √(1-ᾱ_t))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bars[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }
}

/// Linear betas from `beta_start` to `beta_end` over `train_steps` steps.
pub fn build_schedule(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if train_steps == 0 {
        return Err(Error::invalid("train_steps must be at least 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let betas: Vec<f64> = (0..train_steps)
        .map(|i| {
            if train_steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(train_steps + 1);
    alpha_bars.push(1.0);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

/// `√ᾱ_t·x0 + √(1-ᾱ_t)·eps`.
pub fn forward_noise(x0: &Raster, t: usize, eps: &Raster, s: &NoiseSchedule) -> Result<Raster> {
    s.check_timestep(t)?;
    x0.ensure_same_shape(eps)?;
    let (a, b) = s.coefficients(t);
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Clean-image estimate implied by a noise prediction at step `t`.
pub fn predict_x0(x_t: &Raster, eps_hat: &Raster, t: usize, s: &NoiseSchedule) -> Result<Raster> {
    s.check_timestep(t)?;
    let (a, b) = s.coefficients(t);
    x_t.zip_map(eps_hat, |x, e| (x - b * e) / a)
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(x_t: &Raster, eps_hat: &Raster, t: usize, t_prev: usize, s: &NoiseSchedule) -> Result<Raster> {
    s.check_timestep(t)?;
    if t_prev > t {
        return Err(Error::invalid(format!(
            "ddim step must not go forward: {t} -> {t_prev}"
        )));
    }
    x_t.ensure_same_shape(eps_hat)?;
    if t_prev == t {
        return Ok(x_t.clone());
    }
    let x0 = predict_x0(x_t, eps_hat, t, s)?;
    let (a, b) = s.coefficients(t_prev);
    x0.zip_map(eps_hat, |x, e| a * x + b * e)
}

/// Strictly decreasing inference timesteps; the step after the last is 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

impl TimestepPlan {
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Target timestep of step `i`.
    pub fn prev(&self, i: usize) -> usize {
        self.steps.get(i + 1).copied().unwrap_or(0)
    }
}

pub fn make_plan(train_steps: usize, inference_steps: usize) -> Result<TimestepPlan> {
    if inference_steps == 0 || inference_steps > train_steps {
        return Err(Error::invalid(format!(
            "need 1 <= inference_steps <= train_steps, got {inference_steps} of {train_steps}"
        )));
    }
    let steps = (0..inference_steps)
        .map(|i| train_steps - i * train_steps / inference_steps)
        .collect();
    Ok(TimestepPlan { steps })
}
