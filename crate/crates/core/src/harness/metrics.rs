//! Template-correlation image metrics and salience localization.
//!
//! Correlations are uncentered (cosine) so that flat templates remain
//! comparable; negative correlations clamp to 0 and a zero-norm operand
//! scores 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{softmax_over_pixels, Raster};
use crate::pipeline::SampleTrace;
use crate::world::{Condition, GlyphKind, Position, SceneKind, WorldConfig};

/// Cosine similarity clamped to `[0, 1]`; 0 when either vector has zero norm.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "correlation operands differ in length");
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(0.0, 1.0)
}

fn check_image(img: &Raster, cfg: &WorldConfig) -> Result<()> {
    let expected = (cfg.height, cfg.width, cfg.channels);
    if img.shape() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            got: img.shape(),
        });
    }
    Ok(())
}

/// Image pixels of the glyph box at `p`, with the glyph tile repeated per channel.
fn patch_and_tile(img: &Raster, cfg: &WorldConfig, p: Position, subject: GlyphKind) -> (Vec<f64>, Vec<f64>) {
    let g = cfg.glyph_size;
    let c = img.channels();
    let mut patch = Vec::with_capacity(g * g * c);
    let mut tile = Vec::with_capacity(g * g * c);
    for y in 0..g {
        for x in 0..g {
            let v = subject.value(y, x, g);
            for ch in 0..c {
                patch.push(img.get(p.row + y, p.col + x, ch));
                tile.push(v);
            }
        }
    }
    (patch, tile)
}

/// Best correlation of `subject`'s tile over the world's positions.
pub fn subject_fidelity(img: &Raster, cfg: &WorldConfig, subject: GlyphKind) -> Result<f64> {
    check_image(img, cfg)?;
    cfg.check_condition(&Condition::subject(subject))?;
    Ok(cfg
        .positions
        .iter()
        .map(|&p| {
            let (patch, tile) = patch_and_tile(img, cfg, p, subject);
            correlation(&patch, &tile)
        })
        .fold(0.0, f64::max))
}

/// Position and subject whose tile correlates best with the image; first wins ties.
pub fn best_subject_box(img: &Raster, cfg: &WorldConfig) -> Result<(Position, GlyphKind, f64)> {
    check_image(img, cfg)?;
    let mut best = (cfg.positions[0], cfg.subjects[0], f64::NEG_INFINITY);
    for &p in &cfg.positions {
        for &g in &cfg.subjects {
            let (patch, tile) = patch_and_tile(img, cfg, p, g);
            let score = correlation(&patch, &tile);
            if score > best.2 {
                best = (p, g, score);
            }
        }
    }
    Ok(best)
}

/// Correlation with the scene template outside the best-matching subject box.
pub fn scene_consistency(img: &Raster, cfg: &WorldConfig, scene: SceneKind) -> Result<f64> {
    check_image(img, cfg)?;
    cfg.check_condition(&Condition::scene(scene))?;
    let (bx, _, _) = best_subject_box(img, cfg)?;
    let template = cfg.scene_template(scene);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            if bx.contains(y, x, cfg.glyph_size) {
                continue;
            }
            for c in 0..cfg.channels {
                a.push(img.get(y, x, c));
                b.push(template.get(y, x, c));
            }
        }
    }
    Ok(correlation(&a, &b))
}

/// Mean in-box and out-of-box softmax salience mass, relative to area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    /// Subject-model salience mass inside the box over the box-area fraction.
    pub subject_ratio: f64,
    /// Scene-model salience mass outside the box over the outside-area fraction.
    pub scene_ratio: f64,
}

/// Averages the per-step softmax of each fusion-stage salience map over the
/// box where `subject` was generated in the final image.
pub fn salience_localization(trace: &SampleTrace, cfg: &WorldConfig, subject: GlyphKind) -> Result<Localization> {
    let records: Vec<_> = trace.fusion_records().collect();
    if records.is_empty() {
        return Err(Error::invalid("trace has no fusion-stage salience records"));
    }
    let img = trace.final_raster();
    check_image(img, cfg)?;
    cfg.check_condition(&Condition::subject(subject))?;
    let bx = cfg
        .positions
        .iter()
        .copied()
        .map(|p| {
            let (patch, tile) = patch_and_tile(img, cfg, p, subject);
            (p, correlation(&patch, &tile))
        })
        .fold((cfg.positions[0], f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        })
        .0;
    let inside = |m: &Raster| -> f64 {
        let mut mass = 0.0;
        for y in 0..m.height() {
            for x in 0..m.width() {
                if bx.contains(y, x, cfg.glyph_size) {
                    mass += m.get(y, x, 0);
                }
            }
        }
        mass
    };
    let frac = cfg.box_fraction();
    let (mut s, mut t) = (0.0, 0.0);
    for r in &records {
        s += inside(&softmax_over_pixels(&r.omega_s)?) / frac;
        t += (1.0 - inside(&softmax_over_pixels(&r.omega_t)?)) / (1.0 - frac);
    }
    let n = records.len() as f64;
    Ok(Localization {
        subject_ratio: s / n,
        scene_ratio: t / n,
    })
}

/// Metrics of one finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub scene: SceneKind,
    pub subject: GlyphKind,
    pub subject_fidelity: f64,
    pub scene_consistency: f64,
    pub localization: Option<Localization>,
}

/// Per-seed metrics and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subject_fidelity: f64,
    pub scene_consistency: f64,
    /// Mean over seeds that had a fusion stage.
    pub salience_subject_ratio: Option<f64>,
    pub salience_scene_ratio: Option<f64>,
    pub per_seed: Vec<SeedMetrics>,
}

impl MetricsReport {
    pub fn from_seeds(per_seed: Vec<SeedMetrics>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::invalid("report needs at least one seed"));
        }
        let n = per_seed.len() as f64;
        let mean = |f: &dyn Fn(&SeedMetrics) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
        let locs: Vec<Localization> = per_seed.iter().filter_map(|s| s.localization).collect();
        let loc_mean = |f: &dyn Fn(&Localization) -> f64| {
            (!locs.is_empty()).then(|| locs.iter().map(f).sum::<f64>() / locs.len() as f64)
        };
        Ok(Self {
            subject_fidelity: mean(&|s| s.subject_fidelity),
            scene_consistency: mean(&|s| s.scene_consistency),
            salience_subject_ratio: loc_mean(&|l| l.subject_ratio),
            salience_scene_ratio: loc_mean(&|l| l.scene_ratio),
            per_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{PipelineConfig, Stage, StepRecord};
    use crate::snf::SnfRecord;
    use crate::world::compose;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cfg() -> WorldConfig {
        WorldConfig::default()
    }

    #[test]
    fn ground_truth_scores_one() {
        let c = cfg();
        for &s in &c.scenes {
            for &g in &c.subjects {
                for &p in &c.positions {
                    let img = compose(&c, s, g, p).unwrap();
                    assert!((subject_fidelity(&img, &c, g).unwrap() - 1.0).abs() < 1e-12);
                    assert!((scene_consistency(&img, &c, s).unwrap() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn wrong_subject_scores_lower() {
        let c = cfg();
        let p = c.positions[1];
        for &s in &c.scenes {
            for &a in &c.subjects {
                let img = compose(&c, s, a, p).unwrap();
                let own = subject_fidelity(&img, &c, a).unwrap();
                for &b in c.subjects.iter().filter(|&&b| b != a) {
                    assert!(subject_fidelity(&img, &c, b).unwrap() < own, "{s} {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn wrong_scene_scores_lower() {
        let c = cfg();
        for &a in &c.scenes {
            let img = c.scene_template(a);
            let own = scene_consistency(&img, &c, a).unwrap();
            for &b in c.scenes.iter().filter(|&&b| b != a) {
                assert!(scene_consistency(&img, &c, b).unwrap() < own, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn absent_subject_falls_below_midpoint_threshold() {
        let c = cfg();
        let mut matched = Vec::new();
        let mut absent = Vec::new();
        for &s in &c.scenes {
            let bare = c.scene_template(s);
            for &g in &c.subjects {
                absent.push(subject_fidelity(&bare, &c, g).unwrap());
                for &p in &c.positions {
                    matched.push(subject_fidelity(&compose(&c, s, g, p).unwrap(), &c, g).unwrap());
                }
            }
        }
        let lo = matched.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = absent.iter().cloned().fold(0.0, f64::max);
        assert!(hi < lo);
        let threshold = 0.5 * (lo + hi);
        assert!(absent.iter().all(|&a| a < threshold));
    }

    #[test]
    fn zero_image_against_flat_scene_is_zero() {
        let c = cfg();
        let z = Raster::zeros(32, 32, 1);
        assert_eq!(scene_consistency(&z, &c, SceneKind::FlatGray).unwrap(), 0.0);
    }

    #[test]
    fn unknown_ids_are_rejected() {
        let c = WorldConfig {
            scenes: vec![SceneKind::FlatGray],
            subjects: vec![GlyphKind::Disk],
            ..WorldConfig::default()
        };
        let img = Raster::zeros(32, 32, 1);
        assert!(subject_fidelity(&img, &c, GlyphKind::Cross).is_err());
        assert!(scene_consistency(&img, &c, SceneKind::Checkerboard).is_err());
    }

    #[test]
    fn metrics_decrease_with_noise() {
        let c = cfg();
        let sigmas = [0.0, 0.01, 0.05, 0.1, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut sf = vec![0.0; sigmas.len()];
        let mut sc = vec![0.0; sigmas.len()];
        for i in 0..30 {
            let s = c.scenes[i % 4];
            let g = c.subjects[(i / 4) % 4];
            let p = c.positions[i % c.positions.len()];
            let clean = compose(&c, s, g, p).unwrap();
            let base = Raster::from_fn(32, 32, 1, |_, _, _| Normal::new(0.0, 1.0).unwrap().sample(&mut rng));
            for (k, &sigma) in sigmas.iter().enumerate() {
                let img = clean.axpy(sigma, &base).unwrap();
                sf[k] += subject_fidelity(&img, &c, g).unwrap() / 30.0;
                sc[k] += scene_consistency(&img, &c, s).unwrap() / 30.0;
            }
        }
        assert!((sf[0] - 1.0).abs() < 1e-12 && (sc[0] - 1.0).abs() < 1e-12);
        for k in 1..sigmas.len() {
            assert!(sf[k] < sf[k - 1], "{sf:?}");
            assert!(sc[k] < sc[k - 1], "{sc:?}");
        }
    }

    fn trace_with(records: Vec<SnfRecord>, final_img: Raster) -> SampleTrace {
        let mut steps: Vec<StepRecord> = records
            .into_iter()
            .map(|r| StepRecord {
                stage: Stage::Fusion,
                t: 500,
                t_prev: 480,
                latent: final_img.clone(),
                salience: Some(r),
            })
            .collect();
        steps.push(StepRecord {
            stage: Stage::SubjectEnhancement,
            t: 20,
            t_prev: 0,
            latent: final_img.clone(),
            salience: None,
        });
        SampleTrace {
            seed: 0,
            scene: Some(SceneKind::FlatGray),
            subject: Some(GlyphKind::Disk),
            config: PipelineConfig::default(),
            initial: final_img,
            steps,
        }
    }

    #[test]
    fn localization_examples() {
        let c = cfg();
        let p = c.positions[2];
        let img = compose(&c, SceneKind::FlatGray, GlyphKind::Disk, p).unwrap();
        let flat = Raster::zeros(32, 32, 1);
        let tr = trace_with(
            vec![
                SnfRecord {
                    omega_t: flat.clone(),
                    omega_s: flat.clone(),
                    mask: flat.clone()
                };
                3
            ],
            img.clone(),
        );
        let l = salience_localization(&tr, &c, GlyphKind::Disk).unwrap();
        assert!((l.subject_ratio - 1.0).abs() < 1e-12 && (l.scene_ratio - 1.0).abs() < 1e-12);

        // Salience that all but vanishes outside the box.
        let peaked = Raster::from_fn(32, 32, 1, |y, x, _| if p.contains(y, x, 10) { 800.0 } else { 0.0 });
        let tr = trace_with(
            vec![SnfRecord {
                omega_t: flat.clone(),
                omega_s: peaked,
                mask: flat.clone(),
            }],
            img.clone(),
        );
        let l = salience_localization(&tr, &c, GlyphKind::Disk).unwrap();
        assert!((l.subject_ratio - 10.24).abs() < 1e-9);

        let none = trace_with(vec![], img);
        assert!(salience_localization(&none, &c, GlyphKind::Disk).is_err());
    }

    #[test]
    fn report_means_match_seeds() {
        let seeds: Vec<SeedMetrics> = (0..7)
            .map(|i| SeedMetrics {
                seed: i,
                scene: SceneKind::FlatGray,
                subject: GlyphKind::Disk,
                subject_fidelity: 0.1 * i as f64,
                scene_consistency: 1.0 / (1.0 + i as f64),
                localization: (i % 2 == 0).then_some(Localization {
                    subject_ratio: i as f64,
                    scene_ratio: 1.0,
                }),
            })
            .collect();
        let r = MetricsReport::from_seeds(seeds.clone()).unwrap();
        let m = seeds.iter().map(|s| s.subject_fidelity).sum::<f64>() / 7.0;
        assert!((r.subject_fidelity - m).abs() < 1e-12);
        assert!((r.salience_subject_ratio.unwrap() - 3.0).abs() < 1e-12);
        assert!(MetricsReport::from_seeds(vec![]).is_err());
    }
}
