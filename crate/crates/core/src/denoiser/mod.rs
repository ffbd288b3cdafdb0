//! Noise-prediction models.
//!
//! Two families implement [`Denoiser`]: the closed-form Bayes-optimal
//! predictor of a [`GmmSpec`](crate::world::GmmSpec) ([`gmm`]) and a small
//! trainable MLP ([`mlp`], [`train`]).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::Raster;
use crate::world::Condition;

pub mod gmm;
pub mod mlp;
pub mod train;

pub use gmm::{gmm_denoise, gmm_posterior, gmm_posterior_mean, GmmDenoiser};
pub use mlp::{Gradients, MlpDenoiser};
pub use train::{
    draw_batch, loss_gradients, noise_loss, noise_loss_on, train, train_from, LossDraw, TrainConfig, TrainOutcome,
};

/// ε-prediction `ε_θ(x_t, t | cond)`.
pub trait Denoiser: Send + Sync {
    fn predict(&self, x_t: &Raster, t: usize, cond: &Condition) -> Result<Raster>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict(&self, x_t: &Raster, t: usize, cond: &Condition) -> Result<Raster> {
        (**self).predict(x_t, t, cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn predict(&self, x_t: &Raster, t: usize, cond: &Condition) -> Result<Raster> {
        (**self).predict(x_t, t, cond)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Arc<D> {
    fn predict(&self, x_t: &Raster, t: usize, cond: &Condition) -> Result<Raster> {
        (**self).predict(x_t, t, cond)
    }
}

/// Which conditions a model was built to accept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserRole {
    /// Scene-driven: accepts `(scene | ∅, ∅)`.
    Scene,
    /// Subject-augmented: accepts any `(scene | ∅, subject | ∅)`.
    SceneSubject,
}

impl DenoiserRole {
    pub fn accepts(self, cond: &Condition) -> bool {
        match self {
            DenoiserRole::Scene => cond.subject.is_none(),
            DenoiserRole::SceneSubject => true,
        }
    }
}

/// Wraps a denoiser and records every call.
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
    log: Mutex<Vec<(usize, Condition)>>,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// `(t, condition)` of each call, in call order.
    pub fn log(&self) -> Vec<(usize, Condition)> {
        self.log.lock().expect("log poisoned").clone()
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
        self.log.lock().expect("log poisoned").clear();
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn predict(&self, x_t: &Raster, t: usize, cond: &Condition) -> Result<Raster> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("log poisoned").push((t, *cond));
        self.inner.predict(x_t, t, cond)
    }
}
