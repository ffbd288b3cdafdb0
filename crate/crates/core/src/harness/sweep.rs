//! Grid sweeps over stage fractions, guidance weight and fusion mode.
//!
//! Every cell runs the same seeds, so cells are paired seed by seed.
//! Cells run concurrently on a dedicated pool; results keep grid order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::harness::emit::{write_ppm, RunEntry, RunManifest};
use crate::harness::metrics::MetricsReport;
use crate::harness::{run_condition, run_seed, Lab};
use crate::pipeline::{FusionMode, PipelineConfig, StageSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Use `beta = alpha` for every alpha and ignore `betas`.
    pub tie_beta: bool,
    /// Guidance weight applied to both models.
    pub weights: Vec<f64>,
    pub fusions: Vec<FusionMode>,
    /// Seeded runs per cell.
    pub seeds: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            alphas: vec![0.3],
            betas: vec![0.6],
            tie_beta: false,
            weights: vec![3.0],
            fusions: vec![FusionMode::Snf],
            seeds: 8,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.weights.is_empty() || self.fusions.is_empty() {
            return Err(Error::invalid("sweep grid has an empty axis"));
        }
        if !self.tie_beta && self.betas.is_empty() {
            return Err(Error::invalid("sweep grid has no betas"));
        }
        if self.seeds == 0 {
            return Err(Error::invalid("sweep needs at least one seed per cell"));
        }
        Ok(())
    }

    /// Grid cells in row-major order: alpha, beta, weight, fusion.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &alpha in &self.alphas {
            let betas = if self.tie_beta { vec![alpha] } else { self.betas.clone() };
            for beta in betas {
                for &weight in &self.weights {
                    for &fusion in &self.fusions {
                        out.push(SweepCell {
                            index: out.len(),
                            alpha,
                            beta,
                            weight,
                            fusion,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub index: usize,
    pub alpha: f64,
    pub beta: f64,
    pub weight: f64,
    pub fusion: FusionMode,
}

impl SweepCell {
    pub fn pipeline(&self, base: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            stages: StageSchedule {
                alpha: self.alpha,
                beta: self.beta,
            },
            guidance: GuidanceConfig {
                scene_weight: self.weight,
                subject_weight: self.weight,
                ..base.guidance
            },
            fusion: self.fusion,
            ..base.clone()
        }
    }

    pub fn dir_name(&self) -> String {
        format!("cell-{:04}", self.index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: SweepCell,
    /// The report, or the error message of the first failing run.
    pub report: std::result::Result<MetricsReport, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub cells: Vec<CellResult>,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.report.is_err()).count()
    }

    /// Tab-separated table with one row per cell.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "cell\talpha\tbeta\tweight\tfusion\tseeds\tsubject_fidelity\tscene_consistency\tsalience_subject_ratio\tsalience_scene_ratio\tstatus\n",
        );
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        for c in &self.cells {
            let k = &c.cell;
            write!(
                out,
                "{}\t{}\t{}\t{}\t{}\t",
                k.index,
                k.alpha,
                k.beta,
                k.weight,
                k.fusion.id()
            )
            .unwrap();
            match &c.report {
                Ok(r) => writeln!(
                    out,
                    "{}\t{:.6}\t{:.6}\t{}\t{}\tok",
                    r.per_seed.len(),
                    r.subject_fidelity,
                    r.scene_consistency,
                    opt(r.salience_subject_ratio),
                    opt(r.salience_scene_ratio)
                ),
                Err(e) => writeln!(out, "0\t-\t-\t-\t-\tfailed: {}", e.replace(['\t', '\n'], " ")),
            }
            .unwrap();
        }
        out
    }
}

fn run_cell(lab: &Lab, cell: &SweepCell, seeds: usize, out: Option<&Path>) -> Result<MetricsReport> {
    let pipeline = cell.pipeline(&lab.config.pipeline);
    pipeline.stages.validate()?;
    pipeline.guidance.validate()?;
    let dir = out.map(|o| o.join(cell.dir_name()));
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut config = lab.config.clone();
    config.pipeline = pipeline.clone();
    let mut manifest = RunManifest::new(config);
    let mut per_seed = Vec::with_capacity(seeds);
    for i in 0..seeds {
        let (scene, subject) = run_condition(&lab.config.world, i);
        let trace = lab.run(&pipeline, scene, subject, run_seed(lab.config.seed, i))?;
        let metrics = lab.score(&trace)?;
        let mut images = Vec::new();
        if let Some(d) = &dir {
            let name = format!("seed-{:04}.ppm", i);
            write_ppm(trace.final_raster(), &d.join(&name))?;
            images.push(name);
        }
        manifest.runs.push(RunEntry {
            metrics: metrics.clone(),
            images,
        });
        per_seed.push(metrics);
    }
    if let Some(d) = &dir {
        manifest.write(&d.join("manifest.json"))?;
    }
    MetricsReport::from_seeds(per_seed)
}

/// Runs every cell with up to `workers` threads; `out` receives per-cell
/// directories and `table.tsv`.
pub fn run_sweep(lab: &Lab, spec: &SweepSpec, workers: usize, out: Option<&Path>) -> Result<SweepOutcome> {
    spec.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let cells = spec.cells();
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| CellResult {
                cell: *cell,
                report: run_cell(lab, cell, spec.seeds, out).map_err(|e| e.to_string()),
            })
            .collect()
    });
    let outcome = SweepOutcome { cells: results };
    if let Some(o) = out {
        let path: PathBuf = o.join("table.tsv");
        std::fs::write(&path, outcome.table()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::HarnessConfig;
    use crate::world::{GlyphKind, Position, SceneKind, WorldConfig};

    fn small_lab() -> Lab {
        let world = WorldConfig {
            height: 8,
            width: 8,
            scenes: vec![SceneKind::FlatGray, SceneKind::Checkerboard],
            subjects: vec![GlyphKind::Disk, GlyphKind::Cross],
            positions: vec![Position::new(0, 0), Position::new(4, 4)],
            glyph_size: 4,
            ..WorldConfig::default()
        };
        let mut cfg = HarnessConfig {
            world,
            ..HarnessConfig::default()
        };
        cfg.schedule.inference_steps = 10;
        Lab::new(cfg).unwrap()
    }

    #[test]
    fn cells_enumerate_grid() {
        let spec = SweepSpec {
            alphas: vec![0.1, 0.2],
            betas: vec![0.5, 0.6, 0.7],
            fusions: vec![FusionMode::Snf, FusionMode::Addition],
            ..SweepSpec::default()
        };
        let cells = spec.cells();
        assert_eq!(cells.len(), 12);
        assert!(cells.iter().enumerate().all(|(i, c)| c.index == i));
        let tied = SweepSpec { tie_beta: true, ..spec }.cells();
        assert_eq!(tied.len(), 4);
        assert!(tied.iter().all(|c| c.alpha == c.beta));
    }

    #[test]
    fn single_cell_equals_direct_evaluation() {
        let lab = small_lab();
        let spec = SweepSpec {
            seeds: 3,
            ..SweepSpec::default()
        };
        let out = run_sweep(&lab, &spec, 1, None).unwrap();
        let direct = lab
            .evaluate(&spec.cells()[0].pipeline(&lab.config.pipeline), 3)
            .unwrap();
        assert_eq!(out.cells[0].report.as_ref().unwrap(), &direct);
    }

    #[test]
    fn failed_cells_are_recorded_and_others_finish() {
        let lab = small_lab();
        let spec = SweepSpec {
            alphas: vec![0.3, 0.8],
            betas: vec![0.6],
            seeds: 2,
            ..SweepSpec::default()
        };
        let out = run_sweep(&lab, &spec, 2, None).unwrap();
        assert_eq!(out.failures(), 1);
        assert!(out.cells[0].report.is_ok());
        assert!(out.table().lines().nth(2).unwrap().contains("failed"));
    }

    #[test]
    fn worker_count_does_not_change_results_or_files() {
        let lab = small_lab();
        let spec = SweepSpec {
            alphas: vec![0.0, 0.3],
            betas: vec![0.6, 1.0],
            fusions: vec![FusionMode::Snf, FusionMode::Addition],
            seeds: 2,
            ..SweepSpec::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let one = run_sweep(&lab, &spec, 1, Some(a.path())).unwrap();
        let four = run_sweep(&lab, &spec, 4, Some(b.path())).unwrap();
        assert_eq!(one, four);
        for cell in spec.cells() {
            for f in ["manifest.json", "seed-0000.ppm", "seed-0001.ppm"] {
                let rel = Path::new(&cell.dir_name()).join(f);
                assert_eq!(
                    std::fs::read(a.path().join(&rel)).unwrap(),
                    std::fs::read(b.path().join(&rel)).unwrap()
                );
            }
        }
        assert_eq!(
            std::fs::read(a.path().join("table.tsv")).unwrap(),
            std::fs::read(b.path().join("table.tsv")).unwrap()
        );
    }
}
