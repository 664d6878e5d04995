//! `nssda`: command-line driver for the experiment pipeline.
//!
//! Every run is described by a `RunConfig`; `--config FILE` loads a (possibly
//! partial) JSON config and every CLI flag overrides the corresponding key.
//! Exit code 0 on success; on failure a machine-readable error JSON is
//! printed to stderr and the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nssda_core::pipeline::{
    cmd_assimilate, cmd_evaluate, cmd_free_run, cmd_generate, cmd_reproduce, cmd_train,
    figure_preset, ConfigPatch, RunConfig,
};
use nssda_core::{NssdaError, Result};

#[derive(Parser)]
#[command(name = "nssda", version, about = "Non-intrusive structure-preserving \
sequential data assimilation for 1D conservation laws")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every config-driven subcommand; each one overrides the
/// matching config key.
#[derive(Args, Default)]
struct ConfigFlags {
    /// JSON config file; missing keys take preset defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem preset: dam-break or shu-osher
    #[arg(long)]
    preset: Option<String>,
    /// Observation-grid cell count
    #[arg(long)]
    n: Option<usize>,
    /// Observation interval dt
    #[arg(long)]
    dt: Option<f64>,
    /// Number of observation intervals J
    #[arg(long)]
    steps: Option<usize>,
    /// Training-prefix length L_train
    #[arg(long)]
    l_train: Option<usize>,
    /// Observation noise variance sigma^2
    #[arg(long)]
    sigma2: Option<f64>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Adam learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Ensemble size K
    #[arg(long)]
    k: Option<usize>,
    /// Filter kind: etkf or setkf
    #[arg(long)]
    filter: Option<String>,
    /// Surrogate kind: escfn or node
    #[arg(long)]
    model: Option<String>,
    /// ETKF inflation alpha
    #[arg(long)]
    alpha: Option<f64>,
    /// SETKF structural factor beta
    #[arg(long)]
    beta: Option<f64>,
    /// Seed for the observation-noise stream
    #[arg(long)]
    seed_observation: Option<u64>,
    /// Seed for the ensemble-initialization stream
    #[arg(long)]
    seed_ensemble: Option<u64>,
    /// Seed for the parameter-initialization stream
    #[arg(long)]
    seed_params: Option<u64>,
    /// Wave-speed source: learned or jacobian
    #[arg(long)]
    wavespeed_mode: Option<String>,
    /// Weighted-norm convention: inverse or direct
    #[arg(long)]
    weight_convention: Option<String>,
    /// Also write the pure-prediction trajectory and error column
    #[arg(long)]
    also_free_run: bool,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigFlags {
    fn patch(&self) -> ConfigPatch {
        ConfigPatch {
            preset: self.preset.clone(),
            n: self.n,
            dt: self.dt,
            steps: self.steps,
            l_train: self.l_train,
            sigma2: self.sigma2,
            epochs: self.epochs,
            lr: self.lr,
            k: self.k,
            filter: self.filter.clone(),
            model: self.model.clone(),
            alpha: self.alpha,
            beta: self.beta,
            seed_observation: self.seed_observation,
            seed_ensemble: self.seed_ensemble,
            seed_params: self.seed_params,
            wavespeed_mode: self.wavespeed_mode.clone(),
            weight_convention: self.weight_convention.clone(),
            also_free_run: if self.also_free_run { Some(true) } else { None },
            out: self.out.as_ref().map(|p| p.to_string_lossy().into_owned()),
        }
    }

    /// File patch first, CLI flags on top, preset defaults underneath.
    fn resolve(&self, preset_override: Option<&str>) -> Result<RunConfig> {
        let file_patch: ConfigPatch = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| NssdaError::io(format!("reading {}", path.display()), e))?;
                serde_json::from_str(&text).map_err(|e| NssdaError::Parse {
                    offset: 0,
                    detail: format!("config: {e}"),
                })?
            }
            None => ConfigPatch::default(),
        };
        let cli_patch = self.patch();
        let preset_name = preset_override
            .map(String::from)
            .or_else(|| cli_patch.preset.clone())
            .or_else(|| file_patch.preset.clone())
            .unwrap_or_else(|| "dam-break".to_string());
        let preset = nssda_core::physics::ProblemPreset::parse(&preset_name)?;
        let mut cfg = RunConfig::for_preset(preset);
        file_patch.apply(&mut cfg);
        cli_patch.apply(&mut cfg);
        if let Some(name) = preset_override {
            cfg.preset = name.to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate ground truth and noisy observations
    Generate {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Train a surrogate on an observation file
    Train {
        /// Observation trajectory file (from `generate`)
        #[arg(long)]
        observations: PathBuf,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Run the configured filter over the observation record
    Assimilate {
        /// Trained model checkpoint (from `train`)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Observation trajectory file
        #[arg(long)]
        observations: PathBuf,
        /// Truth trajectory file, for error columns
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Run a surrogate forward with no assimilation
    FreeRun {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Run the full grid of configs behind a figure preset
    Reproduce {
        /// fig-node-vs-escfn, fig-noise-trainsteps, or fig-euler
        figure: String,
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Summarize metrics over existing result bundles
    Evaluate {
        /// Bundle directories (each containing bundle.json)
        dirs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { flags } => {
            let cfg = flags.resolve(None)?;
            let out = cmd_generate(&cfg)?;
            println!(
                "{}",
                serde_json::json!({
                    "truth": out.truth,
                    "observations": out.observations,
                    "out": cfg.out,
                })
            );
        }
        Command::Train {
            observations,
            flags,
        } => {
            let cfg = flags.resolve(None)?;
            let out = cmd_train(&cfg, &observations)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": out.checkpoint,
                    "training_log": out.log,
                    "final_loss": out.record.final_loss(),
                    "out": cfg.out,
                })
            );
        }
        Command::Assimilate {
            checkpoint,
            observations,
            truth,
            flags,
        } => {
            let cfg = flags.resolve(None)?;
            let out = cmd_assimilate(&cfg, &checkpoint, &observations, truth.as_deref())?;
            println!(
                "{}",
                serde_json::json!({
                    "steps": out.result.summaries.len(),
                    "diverged_members": out.result.total_diverged,
                    "out": cfg.out,
                })
            );
        }
        Command::FreeRun {
            checkpoint,
            observations,
            truth,
            flags,
        } => {
            let cfg = flags.resolve(None)?;
            let out = cmd_free_run(&cfg, &checkpoint, &observations, truth.as_deref())?;
            println!(
                "{}",
                serde_json::json!({
                    "steps": out.states.len() - 1,
                    "out": cfg.out,
                })
            );
        }
        Command::Reproduce { figure, flags } => {
            let preset = figure_preset(&figure)?;
            let cfg = flags.resolve(Some(preset.name()))?;
            let manifest = cmd_reproduce(&figure, &cfg)?;
            let failed: Vec<&str> = manifest
                .runs
                .iter()
                .filter(|r| r.status != "ok")
                .map(|r| r.name.as_str())
                .collect();
            println!(
                "{}",
                serde_json::json!({
                    "figure": manifest.figure,
                    "runs": manifest.runs.len(),
                    "failed": failed,
                    "manifest": format!("{}/manifest.json", cfg.out),
                })
            );
            if !failed.is_empty() {
                return Err(NssdaError::Config(format!(
                    "{} of {} sub-runs failed (see manifest)",
                    failed.len(),
                    manifest.runs.len()
                )));
            }
        }
        Command::Evaluate { dirs } => {
            let report = cmd_evaluate(&dirs)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": error_kind(&e) })
            );
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &NssdaError) -> &'static str {
    match e {
        NssdaError::ShapeMismatch { .. } => "shape-mismatch",
        NssdaError::Positivity { .. } => "positivity",
        NssdaError::SolverDivergence { .. } => "solver-divergence",
        NssdaError::TrainingFailure(_) => "training-failure",
        NssdaError::EnsembleCollapse { .. } => "ensemble-collapse",
        NssdaError::Numerical { .. } => "numerical",
        NssdaError::Parse { .. } => "parse",
        NssdaError::Config(_) => "config",
        NssdaError::Io { .. } => "io",
    }
}
