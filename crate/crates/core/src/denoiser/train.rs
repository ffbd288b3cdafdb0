//! Noise-prediction loss and plain SGD training on world samples.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserRole, MlpDenoiser};
use crate::error::{Error, Result};
use crate::grid::Raster;
use crate::schedule::{forward_noise, NoiseSchedule};
use crate::world::{sample_world, Condition, GmmSpec};

/// One `(x0, condition, t, ε)` tuple of the noise-prediction objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDraw {
    pub x0: Raster,
    pub cond: Condition,
    pub t: usize,
    pub eps: Raster,
}

impl LossDraw {
    pub fn noised(&self, s: &NoiseSchedule) -> Result<Raster> {
        forward_noise(&self.x0, self.t, &self.eps, s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of `steps` after which the rate decays linearly to 0; 1 keeps it constant.
    pub decay_from: f64,
    pub hidden: Vec<usize>,
    /// Scene role: probability that the scene is replaced by null.
    pub scene_null_prob: f64,
    /// Subject-augmented role: probability that only the subject is dropped.
    pub subject_drop_prob: f64,
    /// Subject-augmented role: probability that both fields are dropped.
    pub subject_null_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            learning_rate: 0.05,
            decay_from: 0.5,
            hidden: vec![256, 256],
            scene_null_prob: 0.2,
            subject_drop_prob: 0.2,
            subject_null_prob: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate used at `step`.
    pub fn rate_at(&self, step: usize) -> f64 {
        let start = self.decay_from * self.steps as f64;
        let s = step as f64;
        if s < start || self.steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (self.steps as f64 - s) / (self.steps as f64 - start)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.decay_from) {
            return Err(Error::Config(format!("decay_from {} outside [0, 1]", self.decay_from)));
        }
        let subject_total = self.subject_drop_prob + self.subject_null_prob;
        for p in [
            self.scene_null_prob,
            self.subject_drop_prob,
            self.subject_null_prob,
            subject_total,
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Training condition for a sampled component after dropout.
fn training_condition<R: Rng + ?Sized>(
    full: Condition,
    role: DenoiserRole,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Condition {
    let u: f64 = rng.random();
    let scene_only = Condition {
        scene: full.scene,
        subject: None,
    };
    match role {
        DenoiserRole::Scene if u < cfg.scene_null_prob => Condition::NULL,
        DenoiserRole::Scene => scene_only,
        DenoiserRole::SceneSubject if u < cfg.subject_null_prob => Condition::NULL,
        DenoiserRole::SceneSubject if u < cfg.subject_null_prob + cfg.subject_drop_prob => scene_only,
        DenoiserRole::SceneSubject => full,
    }
}

/// Draws `n` loss tuples from `gmm` with `t` uniform on `1..=T`.
pub fn draw_batch<R: Rng + ?Sized>(
    gmm: &GmmSpec,
    role: DenoiserRole,
    cfg: &TrainConfig,
    train_steps: usize,
    n: usize,
    rng: &mut R,
) -> Vec<LossDraw> {
    let (h, w, c) = gmm.shape();
    (0..n)
        .map(|_| {
            let (x0, k) = sample_world(gmm, rng);
            let comp = &gmm.components()[k];
            let full = Condition::scene_subject(comp.scene, comp.subject);
            let cond = training_condition(full, role, cfg, rng);
            let t = rng.random_range(1..=train_steps);
            let mut eps = Raster::zeros(h, w, c);
            for v in eps.as_mut_slice() {
                *v = StandardNormal.sample(rng);
            }
            LossDraw { x0, cond, t, eps }
        })
        .collect()
}

/// Mean of `‖ε - ε̂(x_t, t | cond)‖²` over `draws`.
pub fn noise_loss<D: Denoiser + ?Sized>(model: &D, draws: &[LossDraw], s: &NoiseSchedule) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::invalid("empty draw set"));
    }
    let mut total = 0.0;
    for d in draws {
        let pred = model.predict(&d.noised(s)?, d.t, &d.cond)?;
        total += pred.sub(&d.eps)?.norm_sq();
    }
    Ok(total / draws.len() as f64)
}

/// [`noise_loss`] on a fixed set of `n` draws generated from `seed`.
pub fn noise_loss_on<D: Denoiser + ?Sized>(
    model: &D,
    gmm: &GmmSpec,
    role: DenoiserRole,
    s: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = draw_batch(gmm, role, &cfg, s.train_steps(), n, &mut rng);
    noise_loss(model, &draws, s)
}

fn batch_tensors(model: &MlpDenoiser, draws: &[LossDraw], s: &NoiseSchedule) -> Result<(Array2<f64>, Array2<f64>)> {
    let noised = draws.iter().map(|d| d.noised(s)).collect::<Result<Vec<_>>>()?;
    let input = model.encode_batch(noised.iter().zip(draws).map(|(x, d)| (x, d.t, &d.cond)))?;
    let dim = draws[0].eps.len();
    let mut target = Array2::zeros((draws.len(), dim));
    for (mut row, d) in target.rows_mut().into_iter().zip(draws) {
        row.as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(d.eps.as_slice());
    }
    Ok((input, target))
}

/// Loss on `draws` and its gradient with respect to every parameter.
pub fn loss_gradients(
    model: &MlpDenoiser,
    draws: &[LossDraw],
    s: &NoiseSchedule,
) -> Result<(f64, crate::denoiser::Gradients)> {
    if draws.is_empty() {
        return Err(Error::invalid("empty draw set"));
    }
    let (input, target) = batch_tensors(model, draws, s)?;
    model.loss_and_gradients(input, &target)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpDenoiser,
    /// Minibatch loss at every step.
    pub losses: Vec<f64>,
}

/// Trains a fresh MLP for `role` on samples of `gmm` with SGD.
pub fn train(gmm: &GmmSpec, role: DenoiserRole, s: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut scenes: Vec<_> = gmm.components().iter().map(|c| c.scene).collect();
    scenes.sort();
    scenes.dedup();
    let mut subjects: Vec<_> = gmm.components().iter().map(|c| c.subject).collect();
    subjects.sort();
    subjects.dedup();
    let model = MlpDenoiser::new(
        role,
        gmm.shape(),
        s.train_steps(),
        scenes,
        subjects,
        &cfg.hidden,
        cfg.seed,
    )?;
    train_from(model, gmm, s, cfg)
}

/// Continues training `model`; frozen layers stay fixed.
pub fn train_from(mut model: MlpDenoiser, gmm: &GmmSpec, s: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draws = draw_batch(gmm, model.role(), cfg, s.train_steps(), cfg.batch_size, &mut rng);
        let (loss, grads) = loss_gradients(&model, &draws, s)?;
        if !loss.is_finite() || !grads.norm_sq().is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        model.apply_gradients(&grads, cfg.rate_at(step));
        losses.push(loss);
    }
    Ok(TrainOutcome { model, losses })
}
