//! Three-stage collaborative sampler: scene construction with the scene model,
//! fusion of both models, then subject enhancement with the subject model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::grid::{Kernel2D, Raster};
use crate::guidance::{cfg_scene, cfg_subject, GuidanceConfig};
use crate::schedule::{ddim_step, NoiseSchedule, TimestepPlan};
use crate::snf::{fuse_noise, snf_step, SnfRecord};
use crate::world::{Condition, GlyphKind, SceneKind};

/// Fractions of the sampling steps given to the first stage (`alpha`) and
/// to the first two stages together (`beta`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSchedule {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self { alpha: 0.3, beta: 0.6 }
    }
}

impl StageSchedule {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let s = Self { alpha, beta };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::invalid(format!(
                "alpha and beta must lie in [0, 1], got ({}, {})",
                self.alpha, self.beta
            )));
        }
        if self.alpha > self.beta {
            return Err(Error::invalid(format!(
                "alpha {} exceeds beta {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Step counts `(n1, n2, n3)` of the three stages.
pub fn stage_boundaries(stages: &StageSchedule, inference_steps: usize) -> Result<(usize, usize, usize)> {
    stages.validate()?;
    if inference_steps == 0 {
        return Err(Error::invalid("inference_steps must be at least 1"));
    }
    let n = inference_steps as f64;
    let n1 = (stages.alpha * n).round() as usize;
    let n12 = (stages.beta * n).round() as usize;
    Ok((n1, n12 - n1, inference_steps - n12))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SceneConstruction,
    Fusion,
    SubjectEnhancement,
}

impl Stage {
    pub fn id(self) -> &'static str {
        match self {
            Stage::SceneConstruction => "scene_construction",
            Stage::Fusion => "fusion",
            Stage::SubjectEnhancement => "subject_enhancement",
        }
    }
}

/// How the second stage combines the two guided predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Snf,
    /// `½(ε̂_S + ε̂_T)`.
    Addition,
}

impl FusionMode {
    pub fn id(self) -> &'static str {
        match self {
            FusionMode::Snf => "snf",
            FusionMode::Addition => "addition",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub stages: StageSchedule,
    pub guidance: GuidanceConfig,
    pub fusion: FusionMode,
    /// Guide the third stage; otherwise it uses `ε(x_t | c, r)` directly.
    pub subject_stage_guidance: bool,
    /// Replaces every fusion mask by this constant (test hook).
    #[serde(skip)]
    pub mask_override: Option<f64>,
    #[serde(skip)]
    pub kernel: Kernel2D,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stages: StageSchedule::default(),
            guidance: GuidanceConfig::default(),
            fusion: FusionMode::Snf,
            subject_stage_guidance: true,
            mask_override: None,
            kernel: Kernel2D::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub stage: Stage,
    pub t: usize,
    pub t_prev: usize,
    /// Latent after this step.
    pub latent: Raster,
    pub salience: Option<SnfRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub seed: u64,
    pub scene: Option<SceneKind>,
    pub subject: Option<GlyphKind>,
    pub config: PipelineConfig,
    pub initial: Raster,
    pub steps: Vec<StepRecord>,
}

impl SampleTrace {
    pub fn final_raster(&self) -> &Raster {
        self.steps.last().map_or(&self.initial, |s| &s.latent)
    }

    pub fn fusion_records(&self) -> impl Iterator<Item = &SnfRecord> {
        self.steps.iter().filter_map(|s| s.salience.as_ref())
    }

    /// Latent entering step `i`.
    pub fn latent_before(&self, i: usize) -> &Raster {
        if i == 0 {
            &self.initial
        } else {
            &self.steps[i - 1].latent
        }
    }
}

/// Seeded standard-normal starting latent.
pub fn initial_latent(shape: (usize, usize, usize), seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = shape;
    let mut x = Raster::zeros(h, w, c);
    for v in x.as_mut_slice() {
        *v = StandardNormal.sample(&mut rng);
    }
    x
}

/// Everything a run needs besides the conditions and the seed.
pub struct Sampler<'a, T: ?Sized, S: ?Sized> {
    pub tdm: &'a T,
    pub sdm: &'a S,
    pub schedule: &'a NoiseSchedule,
    pub plan: &'a TimestepPlan,
    pub shape: (usize, usize, usize),
    pub config: PipelineConfig,
}

impl<T: Denoiser + ?Sized, S: Denoiser + ?Sized> Sampler<'_, T, S> {
    pub fn boundaries(&self) -> Result<(usize, usize, usize)> {
        stage_boundaries(&self.config.stages, self.plan.len())
    }

    pub fn stage_of(&self, step: usize) -> Result<Stage> {
        let (n1, n2, _) = self.boundaries()?;
        Ok(if step < n1 {
            Stage::SceneConstruction
        } else if step < n1 + n2 {
            Stage::Fusion
        } else {
            Stage::SubjectEnhancement
        })
    }

    pub fn run(&self, scene: Option<SceneKind>, subject: Option<GlyphKind>, seed: u64) -> Result<SampleTrace> {
        let initial = initial_latent(self.shape, seed);
        let steps = self.run_from(scene, subject, &initial, 0)?;
        Ok(SampleTrace {
            seed,
            scene,
            subject,
            config: self.config.clone(),
            initial,
            steps,
        })
    }

    /// Continues from latent `x` entering plan step `first`.
    pub fn run_from(
        &self,
        scene: Option<SceneKind>,
        subject: Option<GlyphKind>,
        x: &Raster,
        first: usize,
    ) -> Result<Vec<StepRecord>> {
        self.config.guidance.validate()?;
        if x.shape() != self.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape,
                got: x.shape(),
            });
        }
        let (n1, _, _) = self.boundaries()?;
        let needs_subject = first.max(n1) < self.plan.len();
        let (scene_id, subject_id) = match (scene, subject) {
            (Some(s), Some(g)) => (Some(s), Some(g)),
            _ if !needs_subject => (scene, subject),
            _ => {
                return Err(Error::invalid(
                    "fusion and subject stages need both a scene and a subject",
                ))
            }
        };
        let mut x = x.clone();
        let mut records = Vec::with_capacity(self.plan.len().saturating_sub(first));
        for i in first..self.plan.len() {
            let t = self.plan.steps()[i];
            let t_prev = self.plan.prev(i);
            let stage = self.stage_of(i)?;
            let g = &self.config.guidance;
            let (eps, salience) = match stage {
                Stage::SceneConstruction => (cfg_scene(self.tdm, &x, t, scene_id, g)?.eps_hat, None),
                Stage::Fusion => {
                    let (s, r) = (scene_id.expect("checked"), subject_id.expect("checked"));
                    let out = snf_step(self.tdm, self.sdm, &x, t, s, r, g, &self.config.kernel)?;
                    let eps = match (self.config.mask_override, self.config.fusion) {
                        (Some(m), _) => {
                            let mask = Raster::filled(self.shape.0, self.shape.1, 1, m);
                            fuse_noise(&mask, &out.subject.eps_hat, &out.scene.eps_hat)?
                        }
                        (None, FusionMode::Snf) => out.eps,
                        (None, FusionMode::Addition) => out.subject.eps_hat.add(&out.scene.eps_hat)?.scale(0.5),
                    };
                    (eps, Some(out.record))
                }
                Stage::SubjectEnhancement => {
                    let (s, r) = (scene_id.expect("checked"), subject_id.expect("checked"));
                    let eps = if self.config.subject_stage_guidance {
                        cfg_subject(self.sdm, &x, t, s, Some(r), g)?.eps_hat
                    } else {
                        self.sdm.predict(&x, t, &Condition::scene_subject(s, r))?
                    };
                    (eps, None)
                }
            };
            x = ddim_step(&x, &eps, t, t_prev, self.schedule)?;
            if !x.is_finite() {
                return Err(Error::SamplingFailed {
                    stage: stage.id().to_string(),
                    step: i,
                });
            }
            records.push(StepRecord {
                stage,
                t,
                t_prev,
                latent: x.clone(),
                salience,
            });
        }
        Ok(records)
    }
}

/// One collaborative run from a seeded latent.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline<T: Denoiser + ?Sized, S: Denoiser + ?Sized>(
    tdm: &T,
    sdm: &S,
    scene: SceneKind,
    subject: GlyphKind,
    config: &PipelineConfig,
    schedule: &NoiseSchedule,
    plan: &TimestepPlan,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<SampleTrace> {
    Sampler {
        tdm,
        sdm,
        schedule,
        plan,
        shape,
        config: config.clone(),
    }
    .run(Some(scene), Some(subject), seed)
}

/// Scene-model-only sampling: the pipeline with `alpha = beta = 1`.
pub fn run_text_only<T: Denoiser + ?Sized>(
    tdm: &T,
    scene: Option<SceneKind>,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    plan: &TimestepPlan,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<SampleTrace> {
    let config = PipelineConfig {
        stages: StageSchedule { alpha: 1.0, beta: 1.0 },
        guidance: *guidance,
        ..PipelineConfig::default()
    };
    Sampler {
        tdm,
        sdm: tdm,
        schedule,
        plan,
        shape,
        config,
    }
    .run(scene, None, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{CountingDenoiser, GmmDenoiser};
    use crate::schedule::{build_schedule, make_plan};
    use crate::world::{build_gmm, WorldConfig};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn setup(cfg: &WorldConfig) -> (GmmDenoiser, GmmDenoiser, Arc<NoiseSchedule>, TimestepPlan) {
        let g = build_gmm(cfg).unwrap();
        let s = Arc::new(build_schedule(1000, 1e-4, 0.02).unwrap());
        (
            GmmDenoiser::scene_model(&g, s.clone()).unwrap(),
            GmmDenoiser::subject_model(&g, s.clone()).unwrap(),
            s,
            make_plan(1000, 50).unwrap(),
        )
    }

    #[test]
    fn boundary_examples() {
        let b = |a, c| stage_boundaries(&StageSchedule { alpha: a, beta: c }, 50);
        assert_eq!(b(0.3, 0.6).unwrap(), (15, 15, 20));
        assert_eq!(b(0.4, 0.4).unwrap().1, 0);
        assert_eq!(b(0.0, 1.0).unwrap(), (0, 50, 0));
        assert!(b(0.7, 0.6).is_err());
        assert!(b(-0.1, 0.6).is_err());
        assert!(stage_boundaries(&StageSchedule::default(), 0).is_err());
    }

    proptest! {
        #[test]
        fn boundaries_partition_and_are_monotone(
            a in 0.0f64..1.0, b in 0.0f64..1.0, d in 0.0f64..0.5, n in 1usize..200,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (n1, n2, n3) = stage_boundaries(&StageSchedule { alpha: lo, beta: hi }, n).unwrap();
            prop_assert_eq!(n1 + n2 + n3, n);
            let lo2 = (lo + d).min(hi);
            let (m1, _, _) = stage_boundaries(&StageSchedule { alpha: lo2, beta: hi }, n).unwrap();
            prop_assert!(m1 >= n1);
            let hi2 = (hi + d).min(1.0);
            let (k1, k2, _) = stage_boundaries(&StageSchedule { alpha: lo, beta: hi2 }, n).unwrap();
            prop_assert!(k1 + k2 >= n1 + n2);
        }
    }

    #[test]
    fn text_only_converges_on_single_component_world() {
        let cfg = WorldConfig::single(SceneKind::VerticalGradient, GlyphKind::Triangle, 32, 32, 10);
        let (tdm, _, s, plan) = setup(&cfg);
        let mean = build_gmm(&cfg).unwrap().components()[0].mean.clone();
        for seed in 0..5 {
            let tr = run_text_only(
                &tdm,
                Some(SceneKind::VerticalGradient),
                &GuidanceConfig::default(),
                &s,
                &plan,
                (32, 32, 1),
                seed,
            )
            .unwrap();
            let d = tr.final_raster().max_abs_diff(&mean).unwrap();
            assert!(d < 2.0 * cfg.sigma0, "seed {seed}: {d}");
        }
    }

    #[test]
    fn text_only_equals_full_pipeline_at_alpha_one() {
        let cfg = WorldConfig::default();
        let (tdm, sdm, s, plan) = setup(&cfg);
        let pc = PipelineConfig {
            stages: StageSchedule { alpha: 1.0, beta: 1.0 },
            ..PipelineConfig::default()
        };
        let a = run_pipeline(
            &tdm,
            &sdm,
            SceneKind::Checkerboard,
            GlyphKind::Disk,
            &pc,
            &s,
            &plan,
            (32, 32, 1),
            3,
        )
        .unwrap();
        let b = run_text_only(
            &tdm,
            Some(SceneKind::Checkerboard),
            &pc.guidance,
            &s,
            &plan,
            (32, 32, 1),
            3,
        )
        .unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.initial, b.initial);
    }

    #[test]
    fn unconditional_samples_land_near_a_component() {
        let cfg = WorldConfig::default();
        let (tdm, _, s, plan) = setup(&cfg);
        let g = build_gmm(&cfg).unwrap();
        for seed in 0..100 {
            let tr = run_text_only(&tdm, None, &GuidanceConfig::default(), &s, &plan, (32, 32, 1), seed).unwrap();
            let nearest = g
                .components()
                .iter()
                .map(|c| tr.final_raster().max_abs_diff(&c.mean).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest < 3.0 * cfg.sigma0, "seed {seed}: {nearest}");
        }
    }

    #[test]
    fn stage_contract_and_record_layout() {
        let cfg = WorldConfig::default();
        let (tdm, sdm, s, plan) = setup(&cfg);
        let tdm = CountingDenoiser::new(tdm);
        let sdm = CountingDenoiser::new(sdm);
        let pc = PipelineConfig::default();
        let tr = run_pipeline(
            &tdm,
            &sdm,
            SceneKind::FlatGray,
            GlyphKind::Cross,
            &pc,
            &s,
            &plan,
            (32, 32, 1),
            11,
        )
        .unwrap();
        assert_eq!(tr.steps.len(), 50);
        let step_of = |t: usize| plan.steps().iter().position(|&u| u == t).unwrap();
        assert!(sdm.log().iter().all(|(t, _)| step_of(*t) >= 15));
        assert!(tdm.log().iter().all(|(t, _)| step_of(*t) < 30));
        assert_eq!(tdm.calls(), 2 * 30);
        assert_eq!(sdm.calls(), 3 * 35);
        for (i, r) in tr.steps.iter().enumerate() {
            let expected = match i {
                0..=14 => Stage::SceneConstruction,
                15..=29 => Stage::Fusion,
                _ => Stage::SubjectEnhancement,
            };
            assert_eq!(r.stage, expected);
            assert_eq!(r.salience.is_some(), expected == Stage::Fusion);
            assert_eq!(r.t, plan.steps()[i]);
        }
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let (tdm, sdm, s, plan) = setup(&WorldConfig::default());
        let pc = PipelineConfig::default();
        let a = run_pipeline(
            &tdm,
            &sdm,
            SceneKind::HorizontalGradient,
            GlyphKind::Square,
            &pc,
            &s,
            &plan,
            (32, 32, 1),
            5,
        )
        .unwrap();
        let b = run_pipeline(
            &tdm,
            &sdm,
            SceneKind::HorizontalGradient,
            GlyphKind::Square,
            &pc,
            &s,
            &plan,
            (32, 32, 1),
            5,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forced_unit_mask_matches_subject_only_continuation() {
        let (tdm, sdm, s, plan) = setup(&WorldConfig::default());
        let forced = PipelineConfig {
            mask_override: Some(1.0),
            ..PipelineConfig::default()
        };
        let tr = run_pipeline(
            &tdm,
            &sdm,
            SceneKind::Checkerboard,
            GlyphKind::Triangle,
            &forced,
            &s,
            &plan,
            (32, 32, 1),
            2,
        )
        .unwrap();
        let sdm_only = Sampler {
            tdm: &tdm,
            sdm: &sdm,
            schedule: &s,
            plan: &plan,
            shape: (32, 32, 1),
            config: PipelineConfig {
                stages: StageSchedule { alpha: 0.0, beta: 0.0 },
                ..PipelineConfig::default()
            },
        };
        let rest = sdm_only
            .run_from(
                Some(SceneKind::Checkerboard),
                Some(GlyphKind::Triangle),
                tr.latent_before(15),
                15,
            )
            .unwrap();
        for (a, b) in tr.steps[15..].iter().zip(&rest) {
            assert!(a.latent.max_abs_diff(&b.latent).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn addition_mode_averages() {
        let (tdm, sdm, s, plan) = setup(&WorldConfig::default());
        let half = PipelineConfig {
            mask_override: Some(0.5),
            ..PipelineConfig::default()
        };
        let add = PipelineConfig {
            fusion: FusionMode::Addition,
            ..PipelineConfig::default()
        };
        let a = run_pipeline(
            &tdm,
            &sdm,
            SceneKind::FlatGray,
            GlyphKind::Disk,
            &half,
            &s,
            &plan,
            (32, 32, 1),
            4,
        )
        .unwrap();
        let b = run_pipeline(
            &tdm,
            &sdm,
            SceneKind::FlatGray,
            GlyphKind::Disk,
            &add,
            &s,
            &plan,
            (32, 32, 1),
            4,
        )
        .unwrap();
        assert!(a.final_raster().max_abs_diff(b.final_raster()).unwrap() < 1e-12);
    }

    struct Poison;

    impl Denoiser for Poison {
        fn predict(&self, x: &Raster, _: usize, _: &Condition) -> Result<Raster> {
            Ok(x.map(|_| f64::NAN))
        }
    }

    #[test]
    fn nan_latent_is_reported_with_stage() {
        let (tdm, _, s, plan) = setup(&WorldConfig::default());
        let err = run_pipeline(
            &tdm,
            &Poison,
            SceneKind::FlatGray,
            GlyphKind::Disk,
            &PipelineConfig::default(),
            &s,
            &plan,
            (32, 32, 1),
            0,
        )
        .unwrap_err();
        match err {
            Error::SamplingFailed { stage, step } => {
                assert_eq!(stage, "fusion");
                assert_eq!(step, 15);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn fusion_needs_both_conditions() {
        let (tdm, sdm, s, plan) = setup(&WorldConfig::default());
        let sampler = Sampler {
            tdm: &tdm,
            sdm: &sdm,
            schedule: &s,
            plan: &plan,
            shape: (32, 32, 1),
            config: PipelineConfig::default(),
        };
        assert!(sampler.run(Some(SceneKind::FlatGray), None, 0).is_err());
    }
}
