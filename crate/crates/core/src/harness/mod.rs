//! Experiment driver: configuration, model loading, seeded batches of runs,
//! metrics, sweeps, artifact emission and the oracle self-check.

pub mod emit;
pub mod metrics;
pub mod stats;
pub mod sweep;
pub mod validate;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserRole, GmmDenoiser, MlpDenoiser, TrainConfig};
use crate::error::{Error, Result};
use crate::pipeline::{PipelineConfig, SampleTrace, Sampler};
use crate::schedule::{NoiseSchedule, ScheduleConfig, TimestepPlan};
use crate::world::{build_gmm, GlyphKind, GmmSpec, SceneKind, WorldConfig};

pub use metrics::{
    best_subject_box, correlation, salience_localization, scene_consistency, subject_fidelity, Localization,
    MetricsReport, SeedMetrics,
};
pub use stats::{paired_sign_test, sign_test_p_value, SignTest};
pub use sweep::{run_sweep, SweepCell, SweepOutcome, SweepSpec};

/// Which pair of denoisers drives the runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    Exact,
    Learned,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Parameter files for the learned pair.
    pub scene_params: Option<PathBuf>,
    pub subject_params: Option<PathBuf>,
}

/// Condition used by single-run commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    pub scene: SceneKind,
    pub subject: GlyphKind,
}

impl Default for RunSpec {
    fn default() -> Self {
        Self {
            scene: SceneKind::Checkerboard,
            subject: GlyphKind::Disk,
        }
    }
}

/// Everything a run depends on; read from TOML, echoed into manifests.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// Base seed; run `i` of a batch uses `seed + i`.
    pub seed: u64,
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub run: RunSpec,
    pub sweep: SweepSpec,
    pub models: ModelSpec,
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.world.validate().map_err(wrap)?;
        self.schedule.build().map_err(wrap)?;
        self.pipeline.stages.validate().map_err(wrap)?;
        self.pipeline.guidance.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.sweep.validate().map_err(wrap)?;
        if self.models.kind == ModelKind::Learned
            && (self.models.scene_params.is_none() || self.models.subject_params.is_none())
        {
            return Err(Error::Config(
                "learned models need both models.scene_params and models.subject_params".into(),
            ));
        }
        Ok(())
    }
}

/// Seed of the `index`-th run of a batch.
pub fn run_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}

/// Condition of the `index`-th run: scenes cycle fastest, then subjects.
pub fn run_condition(world: &WorldConfig, index: usize) -> (SceneKind, GlyphKind) {
    let ns = world.scenes.len();
    let scene = world.scenes[index % ns];
    let subject = world.subjects[(index / ns) % world.subjects.len()];
    (scene, subject)
}

/// A built world with its schedule and denoiser pair.
pub struct Lab {
    pub config: HarnessConfig,
    pub gmm: GmmSpec,
    pub schedule: Arc<NoiseSchedule>,
    pub plan: TimestepPlan,
    pub scene_model: Arc<dyn Denoiser>,
    pub subject_model: Arc<dyn Denoiser>,
}

impl Lab {
    pub fn new(config: HarnessConfig) -> Result<Self> {
        config.validate()?;
        let gmm = build_gmm(&config.world)?;
        let (schedule, plan) = config.schedule.build()?;
        let schedule = Arc::new(schedule);
        let (scene_model, subject_model): (Arc<dyn Denoiser>, Arc<dyn Denoiser>) = match config.models.kind {
            ModelKind::Exact => (
                Arc::new(GmmDenoiser::scene_model(&gmm, schedule.clone())?),
                Arc::new(GmmDenoiser::subject_model(&gmm, schedule.clone())?),
            ),
            ModelKind::Learned => {
                let load = |path: &Option<PathBuf>, role| -> Result<Arc<dyn Denoiser>> {
                    let path = path
                        .as_deref()
                        .ok_or_else(|| Error::Config("missing parameter file".into()))?;
                    let model = MlpDenoiser::load(path)?;
                    check_learned(&model, role, &config, &schedule)?;
                    Ok(Arc::new(model))
                };
                (
                    load(&config.models.scene_params, DenoiserRole::Scene)?,
                    load(&config.models.subject_params, DenoiserRole::SceneSubject)?,
                )
            }
        };
        Ok(Self {
            config,
            gmm,
            schedule,
            plan,
            scene_model,
            subject_model,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let w = &self.config.world;
        (w.height, w.width, w.channels)
    }

    pub fn sampler(&self, pipeline: &PipelineConfig) -> Sampler<'_, dyn Denoiser, dyn Denoiser> {
        Sampler {
            tdm: &*self.scene_model,
            sdm: &*self.subject_model,
            schedule: &self.schedule,
            plan: &self.plan,
            shape: self.shape(),
            config: pipeline.clone(),
        }
    }

    pub fn run(
        &self,
        pipeline: &PipelineConfig,
        scene: SceneKind,
        subject: GlyphKind,
        seed: u64,
    ) -> Result<SampleTrace> {
        self.sampler(pipeline).run(Some(scene), Some(subject), seed)
    }

    /// Scores a finished trace against its own condition.
    pub fn score(&self, trace: &SampleTrace) -> Result<SeedMetrics> {
        let (scene, subject) = match (trace.scene, trace.subject) {
            (Some(s), Some(g)) => (s, g),
            _ => return Err(Error::invalid("only fully conditioned runs can be scored")),
        };
        let world = &self.config.world;
        let img = trace.final_raster();
        let localization = match trace.fusion_records().next() {
            Some(_) => Some(salience_localization(trace, world, subject)?),
            None => None,
        };
        Ok(SeedMetrics {
            seed: trace.seed,
            scene,
            subject,
            subject_fidelity: subject_fidelity(img, world, subject)?,
            scene_consistency: scene_consistency(img, world, scene)?,
            localization,
        })
    }

    /// Runs `count` seeded conditions from the configured base seed.
    pub fn evaluate(&self, pipeline: &PipelineConfig, count: usize) -> Result<MetricsReport> {
        let per_seed = (0..count)
            .map(|i| {
                let (scene, subject) = run_condition(&self.config.world, i);
                let trace = self.run(pipeline, scene, subject, run_seed(self.config.seed, i))?;
                self.score(&trace)
            })
            .collect::<Result<Vec<_>>>()?;
        MetricsReport::from_seeds(per_seed)
    }
}

fn check_learned(model: &MlpDenoiser, role: DenoiserRole, cfg: &HarnessConfig, s: &NoiseSchedule) -> Result<()> {
    let w = &cfg.world;
    if model.role() != role {
        return Err(Error::Config(format!(
            "parameter file holds a {:?} model, expected {:?}",
            model.role(),
            role
        )));
    }
    if model.shape() != (w.height, w.width, w.channels) {
        return Err(Error::ShapeMismatch {
            expected: (w.height, w.width, w.channels),
            got: model.shape(),
        });
    }
    if model.train_steps() != s.train_steps() {
        return Err(Error::Config(format!(
            "model was trained for {} diffusion steps, schedule has {}",
            model.train_steps(),
            s.train_steps()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = HarnessConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(HarnessConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = HarnessConfig::from_toml("seed = 9\n[pipeline.stages]\nalpha = 0.2\nbeta = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pipeline.stages.alpha, 0.2);
        assert_eq!(cfg.world, WorldConfig::default());
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "bogus = 1",
            "[pipeline.stages]\nalpha = 0.7\nbeta = 0.6",
            "[world]\nsigma0 = -1.0",
            "[models]\nkind = \"learned\"",
            "[pipeline.guidance]\nscene_weight = 0.0",
        ] {
            assert!(
                matches!(HarnessConfig::from_toml(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn run_conditions_cover_all_pairs() {
        let w = WorldConfig::default();
        let mut seen: Vec<_> = (0..16).map(|i| run_condition(&w, i)).collect();
        seen.sort_by_key(|(s, g)| (s.id(), g.id()));
        seen.dedup();
        assert_eq!(seen.len(), 16);
        assert_eq!(run_condition(&w, 0), run_condition(&w, 16));
    }

    #[test]
    fn evaluate_is_deterministic_and_scores_defaults_well() {
        let lab = Lab::new(HarnessConfig::default()).unwrap();
        let a = lab.evaluate(&lab.config.pipeline, 3).unwrap();
        let b = lab.evaluate(&lab.config.pipeline, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.subject_fidelity > 0.9 && a.scene_consistency > 0.9, "{a:?}");
        assert!(a.salience_subject_ratio.is_some());
    }

    #[test]
    fn learned_models_are_checked_against_the_world() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = HarnessConfig::default();
        let s = cfg.schedule.build().unwrap().0;
        let wrong = MlpDenoiser::new(
            DenoiserRole::Scene,
            (4, 4, 1),
            s.train_steps(),
            cfg.world.scenes.clone(),
            cfg.world.subjects.clone(),
            &[8],
            0,
        )
        .unwrap();
        let path = dir.path().join("scene.params");
        wrong.save(&path).unwrap();
        let cfg = HarnessConfig {
            models: ModelSpec {
                kind: ModelKind::Learned,
                scene_params: Some(path.clone()),
                subject_params: Some(path),
            },
            ..cfg
        };
        assert!(matches!(Lab::new(cfg), Err(Error::ShapeMismatch { .. })));
    }
}
