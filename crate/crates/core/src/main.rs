//! Command-line driver for the collaborative sampling lab.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use snf_lab::denoiser::{train, DenoiserRole, TrainOutcome};
use snf_lab::grid::Raster;
use snf_lab::guidance::SubjectAnchor;
use snf_lab::harness::emit::{write_ppm, LossCurve, RunEntry, RunManifest};
use snf_lab::harness::{run_seed, run_sweep, validate, HarnessConfig, Lab, ModelKind};
use snf_lab::pipeline::{FusionMode, SampleTrace};
use snf_lab::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_RUN: u8 = 2;
const EXIT_VALIDATION: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "snf-lab",
    version,
    about = "Two-denoiser collaborative diffusion sampling on a synthetic world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One pipeline run: image plus manifest.
    Generate(RunArgs),
    /// Grid sweep from the configuration's `[sweep]` table.
    Sweep(RunArgs),
    /// One run with per-step salience and mask images.
    Salience(RunArgs),
    /// Run the brute-force oracle suites.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the learned denoiser pair and write parameter files.
    Train(RunArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML configuration; defaults apply to anything missing.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    dump_salience: bool,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<FusionMode>,
    /// Base prediction of the subject-model guidance.
    #[arg(long, value_parser = parse_anchor)]
    subject_anchor: Option<SubjectAnchor>,
    /// Record wall-clock duration in the manifest.
    #[arg(long)]
    timing: bool,
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    match s {
        "snf" => Ok(FusionMode::Snf),
        "addition" => Ok(FusionMode::Addition),
        _ => Err(format!("expected snf or addition, got {s}")),
    }
}

fn parse_anchor(s: &str) -> Result<SubjectAnchor, String> {
    match s {
        "unconditional" => Ok(SubjectAnchor::Unconditional),
        "conditional" => Ok(SubjectAnchor::Conditional),
        _ => Err(format!("expected unconditional or conditional, got {s}")),
    }
}

/// A failure with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => EXIT_USAGE,
            _ => EXIT_RUN,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(e: Error) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: e.to_string(),
    }
}

fn load_config(args: &RunArgs) -> Result<HarnessConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => HarnessConfig::load(path).map_err(usage)?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(f) = args.fusion {
        cfg.pipeline.fusion = f;
        cfg.sweep.fusions = vec![f];
    }
    if let Some(a) = args.subject_anchor {
        cfg.pipeline.guidance.subject_anchor = a;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e).into())
}

/// Salience scaled by its maximum so the brightest pixel is white.
fn normalized(r: &Raster) -> Raster {
    let top = r.as_slice().iter().cloned().fold(0.0, f64::max);
    if top > 0.0 {
        r.scale(1.0 / top)
    } else {
        r.clone()
    }
}

fn dump_salience(trace: &SampleTrace, dir: &Path) -> Result<Vec<String>, Failure> {
    let sub = dir.join("salience");
    create_dir(&sub)?;
    let mut names = Vec::new();
    for (i, step) in trace.steps.iter().enumerate() {
        let Some(rec) = &step.salience else { continue };
        for (tag, img) in [
            ("scene", normalized(&rec.omega_t)),
            ("subject", normalized(&rec.omega_s)),
            ("mask", rec.mask.clone()),
        ] {
            let name = format!("salience/step-{i:02}-t{:04}-{tag}.ppm", step.t);
            write_ppm(&img, &dir.join(&name))?;
            names.push(name);
        }
    }
    Ok(names)
}

fn generate(args: &RunArgs, salience: bool) -> Result<(), Failure> {
    let start = Instant::now();
    let cfg = load_config(args)?;
    let lab = Lab::new(cfg.clone())?;
    create_dir(&args.out)?;
    let trace = lab.run(&cfg.pipeline, cfg.run.scene, cfg.run.subject, run_seed(cfg.seed, 0))?;
    let metrics = lab.score(&trace)?;
    write_ppm(trace.final_raster(), &args.out.join("image.ppm"))?;
    let mut images = vec!["image.ppm".to_string()];
    if salience {
        images.extend(dump_salience(&trace, &args.out)?);
    }
    println!(
        "seed {} scene {} subject {}: subject_fidelity {:.6} scene_consistency {:.6}",
        metrics.seed, metrics.scene, metrics.subject, metrics.subject_fidelity, metrics.scene_consistency
    );
    let mut manifest = RunManifest::new(cfg);
    manifest.runs.push(RunEntry { metrics, images });
    if args.timing {
        manifest.duration_secs = Some(start.elapsed().as_secs_f64());
    }
    manifest.write(&args.out.join("manifest.json"))?;
    Ok(())
}

fn sweep(args: &RunArgs) -> Result<(), Failure> {
    let cfg = load_config(args)?;
    if args.workers == 0 {
        return Err(usage(Error::Config("--workers must be positive".into())));
    }
    let lab = Lab::new(cfg.clone())?;
    create_dir(&args.out)?;
    let outcome = run_sweep(&lab, &cfg.sweep, args.workers, Some(&args.out))?;
    print!("{}", outcome.table());
    match outcome.failures() {
        0 => Ok(()),
        n => Err(Failure {
            code: EXIT_RUN,
            message: format!("{n} sweep cell(s) failed"),
        }),
    }
}

fn window_means(losses: &[f64], window: usize) -> Vec<f64> {
    losses
        .chunks(window)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

fn train_models(args: &RunArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let mut cfg = load_config(args)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let lab = Lab::new(HarnessConfig {
        models: Default::default(),
        ..cfg.clone()
    })?;
    create_dir(&args.out)?;
    let mut curves = Vec::new();
    for (role, file) in [
        (DenoiserRole::Scene, "scene.params"),
        (DenoiserRole::SceneSubject, "subject.params"),
    ] {
        let TrainOutcome { model, losses } = train(&lab.gmm, role, &lab.schedule, &cfg.train)?;
        model.save(&args.out.join(file))?;
        let curve = window_means(&losses, 100);
        println!(
            "{file}: {} steps, final windowed loss {:.6}",
            losses.len(),
            curve.last().copied().unwrap_or(f64::NAN)
        );
        curves.push(LossCurve {
            role: match role {
                DenoiserRole::Scene => "scene".into(),
                DenoiserRole::SceneSubject => "scene_subject".into(),
            },
            window: 100,
            losses: curve,
            parameters: file.into(),
        });
    }
    cfg.models.kind = ModelKind::Learned;
    cfg.models.scene_params = Some(args.out.join("scene.params"));
    cfg.models.subject_params = Some(args.out.join("subject.params"));
    let mut manifest = RunManifest::new(cfg);
    manifest.training = curves;
    if args.timing {
        manifest.duration_secs = Some(start.elapsed().as_secs_f64());
    }
    manifest.write(&args.out.join("manifest.json"))?;
    Ok(())
}

fn run_validation(seed: u64) -> Result<(), Failure> {
    let checks = validate::run_all(seed)?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    match checks.iter().filter(|c| !c.passed).count() {
        0 => Ok(()),
        n => Err(Failure {
            code: EXIT_VALIDATION,
            message: format!("{n} oracle suite(s) failed"),
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => generate(a, a.dump_salience),
        Command::Salience(a) => generate(a, true),
        Command::Sweep(a) => sweep(a),
        Command::Train(a) => train_models(a),
        Command::Validate { seed } => run_validation(*seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
