mod config;
mod curves;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::CliConfig;

/// Exit status for bad usage, configuration or input files.
const EXIT_USAGE: u8 = 2;
/// Exit status when training aborts at runtime.
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "siavc", version, about = "Semi-supervised video classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, checkpoints and a report.
    Train(TrainArgs),
    /// Score a checkpoint on the test split and export latent vectors.
    Eval(EvalArgs),
    /// Write a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Plot pseudo-label accuracy and losses from a metrics CSV.
    ExportCurves(CurvesArgs),
}

/// Settings shared by `train` and `eval`. Precedence, lowest first:
/// defaults, `--config`, `SIAVC_OUT`, then the flags below.
#[derive(Args, Clone, Debug, Default)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lr=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Use the built-in synthetic dataset.
    #[arg(long)]
    synthetic: bool,
    /// Dataset manifest (tab-separated path, class, frames[, split]).
    #[arg(long, conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Fraction of the training clips that keep their labels.
    #[arg(long)]
    labels_frac: Option<f64>,
    /// Labeled budget as a clip count.
    #[arg(long, conflicts_with = "labels_frac")]
    labels: Option<usize>,
    /// Total optimisation steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    no_sab: bool,
    #[arg(long)]
    no_vcam: bool,
    #[arg(long)]
    no_fairness: bool,
    /// Replace the self-adaptive threshold with a constant.
    #[arg(long, value_name = "TAU")]
    fixed_threshold: Option<f64>,
    /// Train on the labeled clips only.
    #[arg(long)]
    supervised_only: bool,
    /// Continue from a checkpoint of this run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 9)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct CurvesArgs {
    /// Metrics CSV written by `train`.
    metrics: PathBuf,
    /// Directory for the images and the tidy CSV (default: next to the input).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An error with the exit status it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

type Outcome = Result<(), Failure>;

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: EXIT_USAGE, error: error.into() }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: EXIT_RUNTIME, error: error.into() }
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<CliConfig> {
        let mut cfg = CliConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        if let Some(dir) = std::env::var_os("SIAVC_OUT") {
            cfg.out_dir = PathBuf::from(dir);
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v)?;
        }
        if self.synthetic {
            cfg.synthetic = true;
            cfg.manifest = None;
        }
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
            cfg.synthetic = false;
        }
        if let Some(seed) = self.seed {
            cfg.run.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.finalize();
        Ok(cfg)
    }
}

impl TrainArgs {
    fn resolve(&self) -> anyhow::Result<CliConfig> {
        let mut cfg = self.run.resolve()?;
        if let Some(f) = self.labels_frac {
            cfg.labels_frac = f;
            cfg.labels = None;
        }
        if let Some(n) = self.labels {
            cfg.labels = Some(n);
        }
        if let Some(g) = self.steps {
            cfg.run.total_steps = g;
        }
        let r = &mut cfg.run;
        if self.no_sab {
            r.use_sab = false;
        }
        if self.no_vcam {
            r.use_vcam = false;
        }
        if self.no_fairness {
            r.use_fairness = false;
        }
        if let Some(tau) = self.fixed_threshold {
            r.use_sat = false;
            r.fixed_threshold = tau;
        }
        if self.supervised_only {
            r.use_consistency = false;
            r.use_sat = false;
            r.use_fairness = false;
            r.use_sab = false;
            r.use_vcam = false;
        }
        r.validate()?;
        Ok(cfg)
    }
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve().map_err(usage)?;
            run::train(&cfg, args.resume.as_deref())
        }
        Command::Eval(args) => {
            let cfg = args.run.resolve().map_err(usage)?;
            run::eval(&cfg, &args.checkpoint)
        }
        Command::Synth(a) => {
            let out = a
                .out
                .or_else(|| std::env::var_os("SIAVC_OUT").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("synthetic"));
            run::synth(&out, a.classes, a.per_class, [a.frames, a.height, a.width], a.seed)
        }
        Command::ExportCurves(a) => {
            let out = a.out.unwrap_or_else(|| {
                a.metrics.parent().map(PathBuf::from).unwrap_or_default()
            });
            curves::export(&a.metrics, &out).map_err(usage)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
