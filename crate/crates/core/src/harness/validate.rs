//! Brute-force oracle suites behind the `validate` command.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{gmm_denoise, gmm_posterior, loss_gradients, DenoiserRole, GmmDenoiser, LossDraw, MlpDenoiser};
use crate::error::Result;
use crate::grid::{softmax_over_pixels, Raster};
use crate::pipeline::{run_pipeline, PipelineConfig, Sampler};
use crate::schedule::{build_schedule, ddim_step, make_plan, NoiseSchedule};
use crate::snf::fusion_mask;
use crate::world::{build_gmm, Component, Condition, GlyphKind, GmmSpec, Position, SceneKind, WorldConfig};

/// Outcome of one oracle suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, worst: f64, tol: f64) -> Self {
        Self {
            name,
            passed: worst <= tol,
            detail: format!("worst {worst:.3e}, tolerance {tol:.0e}"),
        }
    }
}

fn scalar_mixture(means: &[f64], weights: &[f64], sigma0: f64) -> Result<GmmSpec> {
    let comps = means
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (&m, &w))| Component {
            scene: SceneKind::ALL[i % SceneKind::ALL.len()],
            subject: GlyphKind::Disk,
            position: Position::new(0, 0),
            mean: Arc::new(Raster::filled(1, 1, 1, m)),
            weight: w,
        })
        .collect();
    GmmSpec::new(comps, sigma0)
}

/// Noise prediction of a scalar mixture by Simpson quadrature over `x0`.
fn quadrature_eps(means: &[f64], weights: &[f64], sigma0: f64, x: f64, t: usize, s: &NoiseSchedule) -> f64 {
    let ab = s.alpha_bar(t);
    let (ra, var) = (ab.sqrt(), 1.0 - ab);
    // Each component's posterior is a Gaussian of spread `sd` centred between
    // its mean and `x / ra`; integrate well past every centre.
    let sd = 1.0 / (1.0 / (sigma0 * sigma0) + ab / var).sqrt();
    let centres: Vec<f64> = means
        .iter()
        .map(|m| sd * sd * (m / (sigma0 * sigma0) + ra * x / var))
        .collect();
    let lo = centres.iter().cloned().fold(f64::INFINITY, f64::min) - 12.0 * sd;
    let hi = centres.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12.0 * sd;
    let n = 2 * (((hi - lo) / (sd / 40.0)) as usize / 2 + 1);
    let h = (hi - lo) / n as f64;
    let log_f = |z: f64| {
        let prior: f64 = means
            .iter()
            .zip(weights)
            .map(|(m, w)| w * (-(z - m).powi(2) / (2.0 * sigma0 * sigma0)).exp())
            .sum();
        prior.ln() - (x - ra * z).powi(2) / (2.0 * var)
    };
    let logs: Vec<f64> = (0..=n).map(|i| log_f(lo + i as f64 * h)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, l) in logs.iter().enumerate() {
        let c = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let f = (l - top).exp() * c;
        den += f;
        num += f * (lo + i as f64 * h);
    }
    (x - ra * num / den) / var.sqrt()
}

/// Exact denoiser against quadrature on random scalar mixtures.
pub fn check_gmm_quadrature(probes: usize, seed: u64) -> Result<Check> {
    let s = build_schedule(1000, 1e-4, 0.02)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let k = rng.random_range(1..=3);
        let means: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let gmm = scalar_mixture(&means, &weights, 0.05)?;
        let t = rng.random_range(1..=1000);
        let x = rng.random_range(-1.5..1.5);
        let got = gmm_denoise(&gmm, &Raster::filled(1, 1, 1, x), t, &s)?.as_slice()[0];
        worst = worst.max((got - quadrature_eps(&means, &weights, 0.05, x, t, &s)).abs());
    }
    Ok(Check::new("gmm denoiser vs quadrature", worst, 1e-6))
}

/// Posterior weights against direct density ratios.
pub fn check_gmm_posterior(probes: usize, seed: u64) -> Result<Check> {
    let s = build_schedule(1000, 1e-4, 0.02)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let means = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let weights = [0.4, 0.6];
        let sigma0 = 0.2;
        let gmm = scalar_mixture(&means, &weights, sigma0)?;
        let t = rng.random_range(200..=1000);
        let x: f64 = rng.random_range(-1.0..1.0);
        let ab = s.alpha_bar(t);
        let v = ab * sigma0 * sigma0 + 1.0 - ab;
        let dens: Vec<f64> = means
            .iter()
            .zip(weights)
            .map(|(m, w)| w * (-(x - ab.sqrt() * m).powi(2) / (2.0 * v)).exp())
            .collect();
        let total: f64 = dens.iter().sum();
        let got = gmm_posterior(&gmm, &Raster::filled(1, 1, 1, x), t, &s)?;
        for (g, d) in got.iter().zip(&dens) {
            worst = worst.max((g - d / total).abs());
        }
    }
    Ok(Check::new("gmm posterior vs density ratio", worst, 1e-10))
}

/// Fusion masks against a per-pixel reference, plus softmax normalization.
pub fn check_fusion_mask(pairs: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    let mut worst_sum = 0.0f64;
    for _ in 0..pairs {
        let a = Raster::from_fn(8, 8, 1, |_, _, _| StandardNormal.sample(&mut rng));
        let b = Raster::from_fn(8, 8, 1, |_, _, _| StandardNormal.sample(&mut rng));
        let mask = fusion_mask(&a, &b)?;
        let (pa, pb) = (softmax_over_pixels(&a)?, softmax_over_pixels(&b)?);
        worst_sum = worst_sum.max((pa.sum() - 1.0).abs()).max((pb.sum() - 1.0).abs());
        for i in 0..64 {
            let expect = if pb.as_slice()[i] >= pa.as_slice()[i] { 1.0 } else { 0.0 };
            if mask.as_slice()[i] != expect {
                mismatches += 1;
            }
        }
    }
    let mut c = Check::new("fusion mask vs per-pixel reference", worst_sum, 1e-9);
    c.passed &= mismatches == 0;
    c.detail = format!("{mismatches} mismatched pixels, softmax sum error {worst_sum:.3e}");
    Ok(c)
}

/// Analytic parameter gradients against central differences.
pub fn check_mlp_gradients(seed: u64) -> Result<Check> {
    let model = MlpDenoiser::new(
        DenoiserRole::SceneSubject,
        (2, 2, 1),
        1000,
        vec![SceneKind::FlatGray, SceneKind::Checkerboard],
        vec![GlyphKind::Disk],
        &[5, 4],
        seed,
    )?;
    let s = build_schedule(1000, 1e-4, 0.02)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let draws: Vec<LossDraw> = (0..3)
        .map(|i| LossDraw {
            x0: Raster::from_fn(2, 2, 1, |_, _, _| rng.random_range(0.0..1.0)),
            cond: [
                Condition::NULL,
                Condition::scene(SceneKind::Checkerboard),
                Condition::scene_subject(SceneKind::FlatGray, GlyphKind::Disk),
            ][i],
            t: rng.random_range(1..=1000),
            eps: Raster::from_fn(2, 2, 1, |_, _, _| StandardNormal.sample(&mut rng)),
        })
        .collect();
    let (_, grads) = loss_gradients(&model, &draws, &s)?;
    let analytic = grads.flat();
    let base = model.parameters();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_parameters(&p)?;
        let up = loss_gradients(&probe, &draws, &s)?.0;
        p[i] = base[i] - h;
        probe.set_parameters(&p)?;
        let down = loss_gradients(&probe, &draws, &s)?.0;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(Check::new("mlp gradients vs central differences", worst, 1e-4))
}

/// A unit fusion mask must reproduce subject-model-only sampling from the first-stage state.
pub fn check_degenerate_mask(seeds: u64) -> Result<Check> {
    let world = WorldConfig {
        height: 8,
        width: 8,
        positions: vec![Position::new(0, 0), Position::new(4, 4)],
        glyph_size: 4,
        ..WorldConfig::default()
    };
    let gmm = build_gmm(&world)?;
    let s = Arc::new(build_schedule(1000, 1e-4, 0.02)?);
    let plan = make_plan(1000, 20)?;
    let tdm = GmmDenoiser::scene_model(&gmm, s.clone())?;
    let sdm = GmmDenoiser::subject_model(&gmm, s.clone())?;
    let config = PipelineConfig {
        mask_override: Some(1.0),
        ..PipelineConfig::default()
    };
    let sampler = Sampler {
        tdm: &tdm,
        sdm: &sdm,
        schedule: &s,
        plan: &plan,
        shape: (8, 8, 1),
        config: config.clone(),
    };
    let (n1, _, _) = sampler.boundaries()?;
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let (scene, subject) = (
            SceneKind::ALL[seed as usize % 4],
            GlyphKind::ALL[(seed as usize / 4) % 4],
        );
        let trace = run_pipeline(&tdm, &sdm, scene, subject, &config, &s, &plan, (8, 8, 1), seed)?;
        let mut x = trace.latent_before(n1).clone();
        let g = config.guidance;
        for (i, step) in trace.steps.iter().enumerate().skip(n1) {
            let t = plan.steps()[i];
            let eps = crate::guidance::cfg_subject(&sdm, &x, t, scene, Some(subject), &g)?.eps_hat;
            x = ddim_step(&x, &eps, t, plan.prev(i), &s)?;
            worst = worst.max(step.latent.max_abs_diff(&x)?);
        }
    }
    Ok(Check::new(
        "unit fusion mask vs subject-model-only sampling",
        worst,
        1e-12,
    ))
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    Ok(vec![
        check_gmm_quadrature(100, seed)?,
        check_gmm_posterior(200, seed)?,
        check_fusion_mask(1000, seed)?,
        check_mlp_gradients(seed)?,
        check_degenerate_mask(4)?,
    ])
}
