//! File-based experiment runs: run configuration, result bundles, and the
//! generate / train / assimilate / reproduce / evaluate commands.
//!
//! Every command writes its artifacts into the config's output directory and
//! finishes with a `bundle.json` manifest listing the files with sha256
//! checksums, the echoed config, and the software version. Timing-bearing
//! files (the training log's seconds column) are listed without a checksum so
//! that identical configs yield identical manifests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assimilation::{
    assimilate, summaries_to_csv, AssimilationResult, FilterConfig, FilterKind, WeightConvention,
};
use crate::error::{NssdaError, Result};
use crate::grid::Grid1D;
use crate::metric::relative_l2;
use crate::physics::{generate_truth, observe, ProblemPreset, TRUTH_REFINEMENT};
use crate::rng::{RandomStream, StreamPurpose};
use crate::scalar::Real;
use crate::snapshot::Trajectory;
use crate::solver::{KtScheme, SolverConfig, SolverDiagnostics};
use crate::state::{FieldState, Frame};
use crate::surrogate::{
    escfn_step, load_checkpoint, node_step, save_checkpoint, Checkpoint, EscfnModel,
    NeuralOdeModel, WavespeedMode,
};
use crate::system::SystemSpec;
use crate::training::{
    preprocess, train_escfn, train_node, ModelKind, RolloutSetup, TrainConfig, TrainRecord,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Standard deviation of the initial ensemble perturbations.
pub const ENSEMBLE_INIT_STD: f64 = 0.1;
/// Courant number for the surrogate's runtime stability check.
pub const SURROGATE_CFL: f64 = 0.45;

/// Complete description of one experiment run. Enum-like fields are stored as
/// strings so the JSON echo is self-describing; accessors parse them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub n: usize,
    pub dt: f64,
    /// Number of observation intervals J.
    pub steps: usize,
    pub l_train: usize,
    pub sigma2: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Ensemble size K.
    pub k: usize,
    pub filter: String,
    pub alpha: f64,
    pub beta: f64,
    pub seed_observation: u64,
    pub seed_ensemble: u64,
    pub seed_params: u64,
    pub model: String,
    pub wavespeed_mode: String,
    pub weight_convention: String,
    pub also_free_run: bool,
    pub out: String,
}

impl RunConfig {
    /// Canonical defaults for a preset.
    pub fn for_preset(preset: ProblemPreset) -> Self {
        RunConfig {
            preset: preset.name().to_string(),
            n: preset.default_n(),
            dt: preset.default_dt(),
            steps: preset.default_steps(),
            l_train: preset.default_l_train(),
            sigma2: 0.1,
            epochs: preset.default_epochs(),
            lr: 1e-3,
            k: 100,
            filter: FilterKind::Etkf.as_str().to_string(),
            alpha: 1.01,
            beta: 1.0,
            seed_observation: 1,
            seed_ensemble: 2,
            seed_params: 3,
            model: ModelKind::Escfn.as_str().to_string(),
            wavespeed_mode: WavespeedMode::Learned.as_str().to_string(),
            weight_convention: WeightConvention::Inverse.as_str().to_string(),
            also_free_run: false,
            out: "out".to_string(),
        }
    }

    pub fn problem_preset(&self) -> Result<ProblemPreset> {
        ProblemPreset::parse(&self.preset)
    }

    pub fn filter_kind(&self) -> Result<FilterKind> {
        FilterKind::parse(&self.filter)
    }

    pub fn model_kind(&self) -> Result<ModelKind> {
        ModelKind::parse(&self.model)
    }

    pub fn wavespeed(&self) -> Result<WavespeedMode> {
        WavespeedMode::parse(&self.wavespeed_mode)
    }

    pub fn convention(&self) -> Result<WeightConvention> {
        WeightConvention::parse(&self.weight_convention)
    }

    pub fn validate(&self) -> Result<()> {
        self.problem_preset()?;
        self.filter_kind()?;
        self.model_kind()?;
        self.wavespeed()?;
        self.convention()?;
        if self.n < 8 {
            return Err(NssdaError::Config(format!("n = {} too small", self.n)));
        }
        if self.dt <= 0.0 {
            return Err(NssdaError::Config(format!("dt = {} must be > 0", self.dt)));
        }
        if self.steps < 2 {
            return Err(NssdaError::Config(format!(
                "steps = {} must be >= 2",
                self.steps
            )));
        }
        if self.l_train == 0 || self.l_train >= self.steps {
            return Err(NssdaError::Config(format!(
                "l_train = {} must satisfy 0 < l_train < steps = {}",
                self.l_train, self.steps
            )));
        }
        if self.lr <= 0.0 {
            return Err(NssdaError::Config(format!("lr = {} must be > 0", self.lr)));
        }
        if self.k < 2 {
            return Err(NssdaError::Config(format!("k = {} must be >= 2", self.k)));
        }
        if self.sigma2 < 0.0 {
            return Err(NssdaError::Config(format!(
                "sigma2 = {} must be >= 0",
                self.sigma2
            )));
        }
        if self.out.is_empty() {
            return Err(NssdaError::Config("empty output directory".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid1D<Real>> {
        let (a, b) = self.problem_preset()?.domain();
        Grid1D::new(a, b, self.n)
    }

    pub fn system_spec(&self) -> Result<SystemSpec<Real>> {
        self.problem_preset()?.system_spec()
    }

    pub fn filter_config(&self) -> Result<FilterConfig<Real>> {
        let mut fc = FilterConfig::new(self.filter_kind()?, self.sigma2, self.seed_ensemble);
        fc.alpha = self.alpha;
        fc.beta = self.beta;
        fc.convention = self.convention()?;
        fc.validate()?;
        Ok(fc)
    }

    pub fn train_config(&self) -> Result<TrainConfig<Real>> {
        let tc = TrainConfig::new(
            self.l_train,
            self.epochs,
            self.lr,
            self.seed_params,
            self.model_kind()?,
        );
        tc.validate(self.steps)?;
        Ok(tc)
    }

    pub fn rollout_setup(&self) -> Result<RolloutSetup<Real>> {
        let grid = self.grid()?;
        let spec = self.system_spec()?;
        Ok(RolloutSetup {
            scheme: KtScheme::new(grid.dx, spec.boundary.clone()),
            solver: SolverConfig::new(SURROGATE_CFL, self.dt, 1)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("RunConfig serializes")
    }

    /// Parse a possibly-partial JSON config: missing keys take the defaults
    /// of the (possibly defaulted) preset.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: ConfigPatch = serde_json::from_str(text).map_err(|e| NssdaError::Parse {
            offset: 0,
            detail: format!("config: {e}"),
        })?;
        let preset_name = patch
            .preset
            .clone()
            .unwrap_or_else(|| ProblemPreset::DamBreak.name().to_string());
        let mut cfg = RunConfig::for_preset(ProblemPreset::parse(&preset_name)?);
        patch.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Partial overrides: every config key, each optional. Used both for partial
/// JSON config files and for CLI flags layered on top of a config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigPatch {
    pub preset: Option<String>,
    pub n: Option<usize>,
    pub dt: Option<f64>,
    pub steps: Option<usize>,
    pub l_train: Option<usize>,
    pub sigma2: Option<f64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub k: Option<usize>,
    pub filter: Option<String>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub seed_observation: Option<u64>,
    pub seed_ensemble: Option<u64>,
    pub seed_params: Option<u64>,
    pub model: Option<String>,
    pub wavespeed_mode: Option<String>,
    pub weight_convention: Option<String>,
    pub also_free_run: Option<bool>,
    pub out: Option<String>,
}

impl ConfigPatch {
    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        set!(
            preset, n, dt, steps, l_train, sigma2, epochs, lr, k, filter, alpha, beta,
            seed_observation, seed_ensemble, seed_params, model, wavespeed_mode,
            weight_convention, also_free_run, out
        );
    }
}

/// One artifact in a bundle. `sha256` is `None` for files whose bytes carry
/// wall-clock timings and are therefore outside the determinism contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleFile {
    pub name: String,
    pub sha256: Option<String>,
}

/// Manifest written as `bundle.json` next to a command's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub version: String,
    pub config: RunConfig,
    pub files: Vec<BundleFile>,
}

impl ResultBundle {
    /// Checksum `deterministic` files, record `timed` files without one, and
    /// write `bundle.json` in `dir`.
    pub fn create(
        dir: &Path,
        config: &RunConfig,
        deterministic: &[&str],
        timed: &[&str],
    ) -> Result<Self> {
        let mut files = Vec::new();
        for name in deterministic {
            files.push(BundleFile {
                name: name.to_string(),
                sha256: Some(sha256_hex(&dir.join(name))?),
            });
        }
        for name in timed {
            files.push(BundleFile {
                name: name.to_string(),
                sha256: None,
            });
        }
        let bundle = ResultBundle {
            version: VERSION.to_string(),
            config: config.clone(),
            files,
        };
        write_text(
            &dir.join("bundle.json"),
            &serde_json::to_string_pretty(&bundle).expect("bundle serializes"),
        )?;
        Ok(bundle)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("bundle.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| NssdaError::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| NssdaError::Parse {
            offset: 0,
            detail: format!("bundle.json: {e}"),
        })
    }

    /// Re-hash the checksummed files and verify they match the manifest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in &self.files {
            if let Some(expected) = &f.sha256 {
                let actual = sha256_hex(&dir.join(&f.name))?;
                if &actual != expected {
                    return Err(NssdaError::Numerical {
                        context: "bundle verify",
                        detail: format!("{}: checksum mismatch", f.name),
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes =
        fs::read(path).map_err(|e| NssdaError::io(format!("reading {}", path.display()), e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| NssdaError::io(format!("writing {}", path.display()), e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| NssdaError::io(format!("creating {}", dir.display()), e))
}

fn out_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&config.out);
    ensure_dir(&dir)?;
    Ok(dir)
}

fn read_trajectory(path: &Path, config: &RunConfig) -> Result<Trajectory<Real>> {
    let traj = Trajectory::read(path)?;
    if traj.n() != config.n {
        return Err(NssdaError::Config(format!(
            "{}: n = {} does not match config n = {}",
            path.display(),
            traj.n(),
            config.n
        )));
    }
    Ok(traj)
}

/// Either trained surrogate, dispatched uniformly as a one-interval step
/// operator on conserved states.
pub enum Surrogate {
    Escfn(EscfnModel<Real>),
    Node(NeuralOdeModel<Real>),
}

impl Surrogate {
    pub fn from_checkpoint(ckpt: Checkpoint<Real>) -> Self {
        match ckpt {
            Checkpoint::Escfn(m) => Surrogate::Escfn(m),
            Checkpoint::Node(m) => Surrogate::Node(m),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Surrogate::Escfn(_) => ModelKind::Escfn,
            Surrogate::Node(_) => ModelKind::Node,
        }
    }

    pub fn step(
        &self,
        state: &FieldState<Real>,
        setup: &RolloutSetup<Real>,
    ) -> Result<FieldState<Real>> {
        match self {
            Surrogate::Escfn(m) => {
                let mut diag = SolverDiagnostics::default();
                escfn_step(m, state, &setup.scheme, &setup.solver, &mut diag)
            }
            Surrogate::Node(m) => node_step(m, state, setup.solver.dt),
        }
    }
}

fn load_surrogate(path: &Path, config: &RunConfig) -> Result<Surrogate> {
    let surrogate = Surrogate::from_checkpoint(load_checkpoint::<Real>(path)?);
    let expected = config.model_kind()?;
    if surrogate.kind() != expected {
        return Err(NssdaError::Config(format!(
            "checkpoint {} holds a {} model but config asks for {}",
            path.display(),
            surrogate.kind().as_str(),
            expected.as_str()
        )));
    }
    Ok(surrogate)
}

/// Pure prediction from y_0: repeated surrogate steps, physical-frame output,
/// length `steps + 1`. A diverging step freezes the state (time still
/// advances) so downstream error curves stay defined.
pub fn free_run(
    surrogate: &Surrogate,
    setup: &RolloutSetup<Real>,
    spec: &SystemSpec<Real>,
    y0: &FieldState<Real>,
    steps: usize,
) -> Result<Vec<FieldState<Real>>> {
    let (mut u, _) = spec.phi_floored(y0)?;
    let dt = setup.solver.dt;
    let mut out = vec![spec.phi_inverse(&u)?.0];
    for _ in 0..steps {
        u = match surrogate.step(&u, setup) {
            Ok(next) if next.is_finite() => next,
            _ => FieldState::new(Frame::Conserved, u.data.clone(), u.time + dt),
        };
        out.push(spec.phi_inverse(&u)?.0);
    }
    Ok(out)
}

/// CSV float format: 17 significant digits, enough to round-trip any f64.
pub fn fmt_full(v: f64) -> String {
    format!("{v:.16e}")
}

/// Build an error CSV: one row per step j = 1..=steps, one column per
/// (label, channel) pair after `j,t`.
fn errors_csv(
    channels: &[&str],
    columns: &[(&str, &[Vec<Real>])],
    dt: Real,
    steps: usize,
) -> String {
    let mut out = String::from("j,t");
    for (label, _) in columns {
        for c in channels {
            out.push_str(&format!(",{c}_{label}"));
        }
    }
    out.push('\n');
    for j in 1..=steps {
        out.push_str(&format!("{},{}", j, fmt_full(dt * j as Real)));
        for (_, series) in columns {
            for v in &series[j - 1] {
                out.push(',');
                out.push_str(&fmt_full(*v));
            }
        }
        out.push('\n');
    }
    out
}

pub struct GenerateOutput {
    pub truth: PathBuf,
    pub observations: PathBuf,
    pub bundle: ResultBundle,
}

/// Simulate truth on the refined grid, add observation noise, write both
/// trajectories.
pub fn cmd_generate(config: &RunConfig) -> Result<GenerateOutput> {
    config.validate()?;
    let dir = out_dir(config)?;
    let preset = config.problem_preset()?;
    let grid = config.grid()?;
    let (truth_states, _diag) =
        generate_truth(preset, &grid, config.dt, config.steps, TRUTH_REFINEMENT)?;
    let noisy = observe(&truth_states, config.sigma2, config.seed_observation);

    let truth_path = dir.join("truth.csv");
    let obs_path = dir.join("observations.csv");
    Trajectory::new(&config.preset, grid.dx, config.dt, Frame::Physical, truth_states)
        .write(&truth_path)?;
    Trajectory::new(&config.preset, grid.dx, config.dt, Frame::Physical, noisy)
        .write(&obs_path)?;
    write_text(&dir.join("config.json"), &config.to_json())?;
    let bundle = ResultBundle::create(
        &dir,
        config,
        &["truth.csv", "observations.csv", "config.json"],
        &[],
    )?;
    Ok(GenerateOutput {
        truth: truth_path,
        observations: obs_path,
        bundle,
    })
}

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub record: TrainRecord<Real>,
    pub bundle: ResultBundle,
}

/// Preprocess the observation file to the conserved frame, train the
/// configured surrogate on the first `l_train` intervals, write checkpoint
/// and training log.
pub fn cmd_train(config: &RunConfig, observations: &Path) -> Result<TrainOutput> {
    config.validate()?;
    let dir = out_dir(config)?;
    let spec = config.system_spec()?;
    let traj = read_trajectory(observations, config)?;
    let tc = config.train_config()?;
    tc.validate(traj.states.len().saturating_sub(1))?;
    let (snapshots, _floored) = preprocess(&traj.states, &spec)?;
    let setup = config.rollout_setup()?;
    let mut rng = RandomStream::new(config.seed_params, StreamPurpose::ParamInit);

    let (checkpoint, record) = match tc.model_kind {
        ModelKind::Escfn => {
            let model = EscfnModel::init(
                spec.p(),
                config.wavespeed()?,
                &config.preset,
                &mut rng,
                config.seed_params,
            );
            let (trained, record) = train_escfn(&model, &snapshots, &setup, &tc)?;
            (Checkpoint::Escfn(trained), record)
        }
        ModelKind::Node => {
            let model = NeuralOdeModel::init(
                spec.p() * config.n,
                &config.preset,
                &mut rng,
                config.seed_params,
            );
            let (trained, record) = train_node(&model, &snapshots, config.dt, &tc)?;
            (Checkpoint::Node(trained), record)
        }
    };

    let ckpt_path = dir.join("model.ckpt");
    let log_path = dir.join("training_log.csv");
    save_checkpoint(&checkpoint, &ckpt_path)?;
    write_text(&log_path, &record.to_csv())?;
    write_text(&dir.join("config.json"), &config.to_json())?;
    let bundle = ResultBundle::create(
        &dir,
        config,
        &["model.ckpt", "config.json"],
        &["training_log.csv"],
    )?;
    Ok(TrainOutput {
        checkpoint: ckpt_path,
        log: log_path,
        record,
        bundle,
    })
}

pub struct AssimilateOutput {
    pub result: AssimilationResult<Real>,
    pub bundle: ResultBundle,
}

/// Run the configured filter over the whole observation record, starting from
/// t = 0. Writes the per-step filter summary, the posterior-mean trajectory,
/// and (when truth is given) an error time series; with `also_free_run`, the
/// pure prediction trajectory and its error column too.
pub fn cmd_assimilate(
    config: &RunConfig,
    checkpoint: &Path,
    observations: &Path,
    truth: Option<&Path>,
) -> Result<AssimilateOutput> {
    config.validate()?;
    let dir = out_dir(config)?;
    let spec = config.system_spec()?;
    let grid = config.grid()?;
    let setup = config.rollout_setup()?;
    let surrogate = load_surrogate(checkpoint, config)?;
    let traj = read_trajectory(observations, config)?;
    let steps = traj.states.len() - 1;
    let truth_traj = truth.map(|p| read_trajectory(p, config)).transpose()?;

    let fc = config.filter_config()?;
    let step = |u: &FieldState<Real>| surrogate.step(u, &setup);
    let result = assimilate(
        &traj.states,
        &step,
        &spec,
        &fc,
        config.k,
        ENSEMBLE_INIT_STD,
        config.dt,
        grid.dx,
        truth_traj.as_ref().map(|t| t.states.as_slice()),
    )?;

    let channels = spec.physical_channel_names();
    write_text(
        &dir.join("filter_summary.csv"),
        &summaries_to_csv(&result.summaries, &channels),
    )?;
    Trajectory::new(
        &config.preset,
        grid.dx,
        config.dt,
        Frame::Physical,
        result.posterior_means.clone(),
    )
    .write(&dir.join("posterior_mean.csv"))?;

    let mut files: Vec<String> = vec![
        "filter_summary.csv".into(),
        "posterior_mean.csv".into(),
        "config.json".into(),
    ];

    let prediction = if config.also_free_run {
        let states = free_run(&surrogate, &setup, &spec, &traj.states[0], steps)?;
        Trajectory::new(&config.preset, grid.dx, config.dt, Frame::Physical, states.clone())
            .write(&dir.join("prediction.csv"))?;
        files.push("prediction.csv".into());
        Some(states)
    } else {
        None
    };

    if let Some(tr) = &truth_traj {
        let posterior: Vec<Vec<Real>> = result
            .summaries
            .iter()
            .map(|s| s.posterior_err.clone())
            .collect();
        let mut columns: Vec<(&str, &[Vec<Real>])> = vec![("posterior", &posterior)];
        let prediction_err: Vec<Vec<Real>>;
        if let Some(states) = &prediction {
            prediction_err = (1..=steps)
                .map(|j| relative_l2(&states[j], &tr.states[j], grid.dx))
                .collect::<Result<_>>()?;
            columns.push(("prediction", &prediction_err));
        }
        write_text(
            &dir.join("errors.csv"),
            &errors_csv(&channels, &columns, config.dt, steps),
        )?;
        files.push("errors.csv".into());
    }

    write_text(&dir.join("config.json"), &config.to_json())?;
    let names: Vec<&str> = files.iter().map(|s| s.as_str()).collect();
    let bundle = ResultBundle::create(&dir, config, &names, &[])?;
    Ok(AssimilateOutput { result, bundle })
}

pub struct FreeRunOutput {
    pub states: Vec<FieldState<Real>>,
    pub bundle: ResultBundle,
}

/// Pure-prediction bundle: prediction trajectory plus (with truth) its error
/// time series. Used by the reproduce grids' "free-run" outputs.
pub fn cmd_free_run(
    config: &RunConfig,
    checkpoint: &Path,
    observations: &Path,
    truth: Option<&Path>,
) -> Result<FreeRunOutput> {
    config.validate()?;
    let dir = out_dir(config)?;
    let spec = config.system_spec()?;
    let grid = config.grid()?;
    let setup = config.rollout_setup()?;
    let surrogate = load_surrogate(checkpoint, config)?;
    let traj = read_trajectory(observations, config)?;
    let steps = traj.states.len() - 1;
    let truth_traj = truth.map(|p| read_trajectory(p, config)).transpose()?;

    let states = free_run(&surrogate, &setup, &spec, &traj.states[0], steps)?;
    Trajectory::new(&config.preset, grid.dx, config.dt, Frame::Physical, states.clone())
        .write(&dir.join("prediction.csv"))?;
    let mut files: Vec<String> = vec!["prediction.csv".into(), "config.json".into()];

    if let Some(tr) = &truth_traj {
        let channels = spec.physical_channel_names();
        let prediction_err: Vec<Vec<Real>> = (1..=steps)
            .map(|j| relative_l2(&states[j], &tr.states[j], grid.dx))
            .collect::<Result<_>>()?;
        write_text(
            &dir.join("errors.csv"),
            &errors_csv(&channels, &[("prediction", &prediction_err)], config.dt, steps),
        )?;
        files.push("errors.csv".into());
    }

    write_text(&dir.join("config.json"), &config.to_json())?;
    let names: Vec<&str> = files.iter().map(|s| s.as_str()).collect();
    let bundle = ResultBundle::create(&dir, config, &names, &[])?;
    Ok(FreeRunOutput { states, bundle })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceRun {
    pub name: String,
    pub dir: String,
    pub status: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceManifest {
    pub figure: String,
    pub version: String,
    pub runs: Vec<ReproduceRun>,
}

/// Which preset a figure id draws from. Unknown ids are a config error.
pub fn figure_preset(figure: &str) -> Result<ProblemPreset> {
    match figure {
        "fig-node-vs-escfn" | "fig-noise-trainsteps" => Ok(ProblemPreset::DamBreak),
        "fig-euler" => Ok(ProblemPreset::ShuOsher),
        other => Err(NssdaError::Config(format!(
            "unknown figure '{other}' (expected fig-node-vs-escfn, \
             fig-noise-trainsteps, or fig-euler)"
        ))),
    }
}

fn record(
    runs: &mut Vec<ReproduceRun>,
    name: &str,
    dir: &Path,
    result: Result<()>,
) -> bool {
    let ok = result.is_ok();
    runs.push(ReproduceRun {
        name: name.to_string(),
        dir: dir.to_string_lossy().into_owned(),
        status: if ok { "ok" } else { "error" }.to_string(),
        error: result.err().map(|e| e.to_string()),
    });
    ok
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// The three filter-vs-prediction outputs behind every figure panel.
fn run_outputs(
    runs: &mut Vec<ReproduceRun>,
    prefix: &str,
    base: &RunConfig,
    root: &Path,
    ckpt: &Path,
    obs: &Path,
    truth: &Path,
) {
    let free_dir = root.join("free-run");
    let mut fcfg = base.clone();
    fcfg.out = path_str(&free_dir);
    let res = cmd_free_run(&fcfg, ckpt, obs, Some(truth)).map(|_| ());
    record(runs, &format!("{prefix}/free-run"), &free_dir, res);

    for filter in [FilterKind::Etkf, FilterKind::Setkf] {
        let dir = root.join(filter.as_str());
        let mut acfg = base.clone();
        acfg.filter = filter.as_str().to_string();
        acfg.out = path_str(&dir);
        let res = cmd_assimilate(&acfg, ckpt, obs, Some(truth)).map(|_| ());
        record(runs, &format!("{prefix}/{}", filter.as_str()), &dir, res);
    }
}

/// Run the grid of configs behind a named figure. Sub-run failures are
/// recorded in the manifest and the remaining runs continue; runs whose
/// inputs failed are skipped (not listed). The figure fixes preset, L_train,
/// sigma2, and model choice; everything else (n, dt, steps, epochs, K, lr,
/// seeds) comes from `base`.
pub fn cmd_reproduce(figure: &str, base: &RunConfig) -> Result<ReproduceManifest> {
    let preset = figure_preset(figure)?;
    let root = PathBuf::from(&base.out);
    ensure_dir(&root)?;
    let mut runs = Vec::new();

    let mut figure_base = base.clone();
    figure_base.preset = preset.name().to_string();
    figure_base.model = ModelKind::Escfn.as_str().to_string();

    match figure {
        "fig-node-vs-escfn" => {
            figure_base.l_train = base.l_train.min(10);
            figure_base.sigma2 = 0.1;
            let data_dir = root.join("data");
            let mut dcfg = figure_base.clone();
            dcfg.out = path_str(&data_dir);
            let gen = cmd_generate(&dcfg);
            let ok = record(&mut runs, "data", &data_dir, gen.as_ref().map(|_| ()).map_err(clone_err));
            if ok {
                let gen = gen.expect("checked ok");
                for kind in [ModelKind::Escfn, ModelKind::Node] {
                    let model_root = root.join(kind.as_str());
                    let mut tcfg = figure_base.clone();
                    tcfg.model = kind.as_str().to_string();
                    tcfg.out = path_str(&model_root.join("train"));
                    let tr = cmd_train(&tcfg, &gen.observations);
                    let ok = record(
                        &mut runs,
                        &format!("{}/train", kind.as_str()),
                        &model_root.join("train"),
                        tr.as_ref().map(|_| ()).map_err(clone_err),
                    );
                    if ok {
                        let tr = tr.expect("checked ok");
                        run_outputs(
                            &mut runs,
                            kind.as_str(),
                            &tcfg,
                            &model_root,
                            &tr.checkpoint,
                            &gen.observations,
                            &gen.truth,
                        );
                    }
                }
            }
        }
        "fig-noise-trainsteps" => {
            for sigma2 in [0.1, 0.2] {
                let sig_root = root.join(format!("sigma2-{sigma2}"));
                let mut dcfg = figure_base.clone();
                dcfg.sigma2 = sigma2;
                dcfg.l_train = base.l_train.min(10);
                dcfg.out = path_str(&sig_root.join("data"));
                let gen = cmd_generate(&dcfg);
                let ok = record(
                    &mut runs,
                    &format!("sigma2-{sigma2}/data"),
                    &sig_root.join("data"),
                    gen.as_ref().map(|_| ()).map_err(clone_err),
                );
                if !ok {
                    continue;
                }
                let gen = gen.expect("checked ok");
                for l_train in [10, 20, 40] {
                    if l_train >= dcfg.steps {
                        continue;
                    }
                    let cell = format!("sigma2-{sigma2}/l-train-{l_train}");
                    let cell_root = sig_root.join(format!("l-train-{l_train}"));
                    let mut tcfg = dcfg.clone();
                    tcfg.l_train = l_train;
                    tcfg.out = path_str(&cell_root.join("train"));
                    let tr = cmd_train(&tcfg, &gen.observations);
                    let ok = record(
                        &mut runs,
                        &format!("{cell}/train"),
                        &cell_root.join("train"),
                        tr.as_ref().map(|_| ()).map_err(clone_err),
                    );
                    if ok {
                        let tr = tr.expect("checked ok");
                        run_outputs(
                            &mut runs,
                            &cell,
                            &tcfg,
                            &cell_root,
                            &tr.checkpoint,
                            &gen.observations,
                            &gen.truth,
                        );
                    }
                }
            }
        }
        "fig-euler" => {
            figure_base.l_train = base.l_train.min(20);
            figure_base.sigma2 = 0.2;
            let data_dir = root.join("data");
            let mut dcfg = figure_base.clone();
            dcfg.out = path_str(&data_dir);
            let gen = cmd_generate(&dcfg);
            let ok = record(&mut runs, "data", &data_dir, gen.as_ref().map(|_| ()).map_err(clone_err));
            if ok {
                let gen = gen.expect("checked ok");
                let mut tcfg = figure_base.clone();
                tcfg.out = path_str(&root.join("train"));
                let tr = cmd_train(&tcfg, &gen.observations);
                let ok = record(
                    &mut runs,
                    "escfn/train",
                    &root.join("train"),
                    tr.as_ref().map(|_| ()).map_err(clone_err),
                );
                if ok {
                    let tr = tr.expect("checked ok");
                    run_outputs(
                        &mut runs,
                        "escfn",
                        &tcfg,
                        &root,
                        &tr.checkpoint,
                        &gen.observations,
                        &gen.truth,
                    );
                }
            }
        }
        _ => unreachable!("figure_preset validated the id"),
    }

    let manifest = ReproduceManifest {
        figure: figure.to_string(),
        version: VERSION.to_string(),
        runs,
    };
    write_text(
        &root.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

/// Errors are not Clone (io::Error); rebuild a comparable config-level error
/// for manifest recording while the original propagates to the caller.
fn clone_err(e: &NssdaError) -> NssdaError {
    NssdaError::Config(e.to_string())
}

/// Time-averaged value of every error column in an errors.csv text.
pub fn evaluate_errors_csv(text: &str) -> Result<Vec<(String, f64)>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(NssdaError::Parse {
        offset: 0,
        detail: "empty errors.csv".into(),
    })?;
    let names: Vec<&str> = header.split(',').skip(2).collect();
    let mut sums = vec![0.0; names.len()];
    let mut rows = 0usize;
    for (i, line) in lines.enumerate() {
        let values: Vec<f64> = line
            .split(',')
            .skip(2)
            .map(|s| {
                s.parse::<f64>().map_err(|_| NssdaError::Parse {
                    offset: i + 1,
                    detail: format!("bad value '{s}'"),
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != names.len() {
            return Err(NssdaError::Parse {
                offset: i + 1,
                detail: format!("row has {} values, expected {}", values.len(), names.len()),
            });
        }
        for (s, v) in sums.iter_mut().zip(values) {
            *s += v;
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(NssdaError::Parse {
            offset: 0,
            detail: "errors.csv has no data rows".into(),
        });
    }
    Ok(names
        .into_iter()
        .map(String::from)
        .zip(sums.into_iter().map(|s| s / rows as f64))
        .collect())
}

/// Metrics over existing bundles: for each directory, the time-averaged error
/// per column of its errors.csv (or a note if it has none).
pub fn cmd_evaluate(bundle_dirs: &[PathBuf]) -> Result<serde_json::Value> {
    let mut report = serde_json::Map::new();
    for dir in bundle_dirs {
        let bundle = ResultBundle::read(dir)?;
        bundle.verify(dir)?;
        let key = dir.to_string_lossy().into_owned();
        let errors = dir.join("errors.csv");
        let value = if errors.exists() {
            let text = fs::read_to_string(&errors)
                .map_err(|e| NssdaError::io(format!("reading {}", errors.display()), e))?;
            let mut cols = serde_json::Map::new();
            for (name, mean) in evaluate_errors_csv(&text)? {
                cols.insert(name, serde_json::json!(mean));
            }
            serde_json::json!({ "time_averaged_error": cols })
        } else {
            serde_json::json!({ "note": "bundle has no errors.csv" })
        };
        report.insert(key, value);
    }
    Ok(serde_json::Value::Object(report))
}
