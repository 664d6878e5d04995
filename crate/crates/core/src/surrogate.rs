//! Neural surrogates: the flux-form network (ESCFN) with its learned or
//! Jacobian-based wave speed, the Neural ODE baseline, and checkpoint
//! persistence.
//!
//! Networks are plain MLPs with a bias-free final layer. Forward passes run
//! through [`CellOps`], so the same code serves fast evaluation and tape
//! recording; parameters enter the tape as leaves via [`MlpParams::lift`].

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::autodiff::{self, Tape};
use crate::error::{NssdaError, Result};
use crate::ops::{CellOps, PlainOps, TapeOps};
use crate::rng::RandomStream;
use crate::scalar::Scalar;
use crate::solver::{FluxModel, KtScheme, SolverConfig, SolverDiagnostics};
use crate::state::{FieldState, Frame};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"NSSDA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            other => Err(NssdaError::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Feed-forward network parameters. `weights[m]` is d_m x d_{m-1};
/// `biases[m]` is d_m x 1 and exists for every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T: Scalar> {
    pub dims: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array2<T>>,
}

/// Network parameters lifted into an evaluation backend (plain arrays or
/// tape variables).
#[derive(Debug, Clone)]
pub struct LiftedMlp<A> {
    pub activation: Activation,
    pub weights: Vec<A>,
    pub biases: Vec<A>,
}

impl<T: Scalar> MlpParams<T> {
    /// Fan-in uniform initialization in [-1/sqrt(d_in), 1/sqrt(d_in)], drawn
    /// layer by layer (weights row-major, then bias) from `rng`.
    pub fn init(dims: &[usize], activation: Activation, rng: &mut RandomStream) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = dims.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers - 1);
        for m in 0..layers {
            let (d_out, d_in) = (dims[m + 1], dims[m]);
            let bound = T::one() / T::from_usize(d_in).unwrap().sqrt();
            let mut w = Array2::zeros((d_out, d_in));
            for r in 0..d_out {
                for c in 0..d_in {
                    w[(r, c)] = rng.uniform(-bound, bound);
                }
            }
            weights.push(w);
            if m + 1 < layers {
                let mut b = Array2::zeros((d_out, 1));
                for r in 0..d_out {
                    b[(r, 0)] = rng.uniform(-bound, bound);
                }
                biases.push(b);
            }
        }
        MlpParams {
            dims: dims.to_vec(),
            activation,
            weights,
            biases,
        }
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Self {
        let layers = dims.len() - 1;
        MlpParams {
            dims: dims.to_vec(),
            activation,
            weights: (0..layers)
                .map(|m| Array2::zeros((dims[m + 1], dims[m])))
                .collect(),
            biases: (0..layers - 1)
                .map(|m| Array2::zeros((dims[m + 1], 1)))
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Lift into a backend as constants (no gradients).
    pub fn lift<O: CellOps<T>>(&self, ops: &mut O) -> LiftedMlp<O::Arr> {
        LiftedMlp {
            activation: self.activation,
            weights: self.weights.iter().map(|w| ops.constant(w.clone())).collect(),
            biases: self.biases.iter().map(|b| ops.constant(b.clone())).collect(),
        }
    }

    /// Lift onto a tape as leaves, for differentiation with respect to the
    /// parameters.
    pub fn lift_leaves(&self, tape: &mut Tape<T>) -> LiftedMlp<autodiff::DVar> {
        LiftedMlp {
            activation: self.activation,
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Flat parameter payload in layer order: per layer the row-major weight
    /// matrix, then the bias (if any).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for m in 0..self.weights.len() {
            out.extend(self.weights[m].iter().copied());
            if m < self.biases.len() {
                out.extend(self.biases[m].iter().copied());
            }
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(dims: &[usize], activation: Activation, flat: &[T]) -> Result<Self> {
        let mut params = Self::zeros(dims, activation);
        if flat.len() != params.parameter_count() {
            return Err(NssdaError::Parse {
                offset: 0,
                detail: format!(
                    "parameter payload has {} values, expected {}",
                    flat.len(),
                    params.parameter_count()
                ),
            });
        }
        let mut k = 0;
        for m in 0..params.weights.len() {
            for v in params.weights[m].iter_mut() {
                *v = flat[k];
                k += 1;
            }
            if m < params.biases.len() {
                for v in params.biases[m].iter_mut() {
                    *v = flat[k];
                    k += 1;
                }
            }
        }
        Ok(params)
    }
}

/// h^(m) = act(W^(m) h^(m-1) + b^(m)); final layer is bias-free and linear.
pub fn mlp_forward<T: Scalar, O: CellOps<T>>(
    ops: &mut O,
    net: &LiftedMlp<O::Arr>,
    x: &O::Arr,
) -> Result<O::Arr> {
    let last = net.weights.len() - 1;
    let mut h = x.clone();
    for m in 0..last {
        let z = ops.linear(&net.weights[m], &h, &net.biases[m])?;
        h = match net.activation {
            Activation::Silu => ops.silu(&z),
            Activation::Relu => ops.relu(&z),
        };
    }
    ops.matmul(&net.weights[last], &h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavespeedMode {
    /// a = max over the interface pair of |wavespeed-net output|.
    Learned,
    /// a = max over the pair of the spectral radius of dF^theta/du.
    Jacobian,
}

impl WavespeedMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WavespeedMode::Learned => "learned",
            WavespeedMode::Jacobian => "jacobian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(WavespeedMode::Learned),
            "jacobian" => Ok(WavespeedMode::Jacobian),
            other => Err(NssdaError::Config(format!(
                "unknown wavespeed mode '{other}' (expected learned or jacobian)"
            ))),
        }
    }
}

/// Provenance recorded alongside checkpointed parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub system: String,
    pub seed: u64,
    pub epochs_trained: usize,
}

/// The flux-form surrogate: a p -> p flux network and a wave-speed network.
#[derive(Debug, Clone, PartialEq)]
pub struct EscfnModel<T: Scalar> {
    pub flux_net: MlpParams<T>,
    pub wavespeed_net: MlpParams<T>,
    pub mode: WavespeedMode,
    pub meta: ModelMeta,
}

pub const ESCFN_HIDDEN: usize = 64;
pub const ESCFN_FLUX_LAYERS: usize = 5;
pub const ESCFN_WAVESPEED_LAYERS: usize = 2;

impl<T: Scalar> EscfnModel<T> {
    /// Default architecture: flux net p -> 5 x 64 (silu) -> p, wave-speed net
    /// p -> 2 x 64 (relu) -> 1.
    pub fn init(p: usize, mode: WavespeedMode, system: &str, rng: &mut RandomStream, seed: u64) -> Self {
        let mut flux_dims = vec![p];
        flux_dims.extend(std::iter::repeat_n(ESCFN_HIDDEN, ESCFN_FLUX_LAYERS));
        flux_dims.push(p);
        let mut ws_dims = vec![p];
        ws_dims.extend(std::iter::repeat_n(ESCFN_HIDDEN, ESCFN_WAVESPEED_LAYERS));
        ws_dims.push(1);
        EscfnModel {
            flux_net: MlpParams::init(&flux_dims, Activation::Silu, rng),
            wavespeed_net: MlpParams::init(&ws_dims, Activation::Relu, rng),
            mode,
            meta: ModelMeta {
                system: system.to_string(),
                seed,
                epochs_trained: 0,
            },
        }
    }

    pub fn p(&self) -> usize {
        self.dims_p()
    }

    fn dims_p(&self) -> usize {
        *self.flux_net.dims.first().expect("nonempty dims")
    }

    /// Spectral radius of dF^theta/du at one state column, via AD Jacobian
    /// and dense eigenvalues (p <= 3).
    pub fn jacobian_spectral_radius(&self, u: &[T]) -> Result<T> {
        let mut ops = PlainOps;
        let net = self.flux_net.lift::<PlainOps>(&mut ops);
        let jac = autodiff::jacobian(u, |tape, x| {
            let mut tops = TapeOps::new(tape);
            let lifted = LiftedMlp {
                activation: net.activation,
                weights: net.weights.iter().map(|w| tops.constant(w.clone())).collect(),
                biases: net.biases.iter().map(|b| tops.constant(b.clone())).collect(),
            };
            mlp_forward(&mut tops, &lifted, &x)
        })?;
        let p = u.len();
        let flat: Vec<f64> = jac.iter().map(|v| v.to_f64().unwrap()).collect();
        let m = nalgebra::DMatrix::from_row_slice(p, p, &flat);
        let eigs = m.complex_eigenvalues();
        let radius = eigs.iter().fold(0.0f64, |acc, z| acc.max(z.norm()));
        if !radius.is_finite() {
            return Err(NssdaError::Numerical {
                context: "jacobian wave speed",
                detail: "non-finite spectral radius".into(),
            });
        }
        Ok(T::from_f64_c(radius))
    }
}

/// [`FluxModel`] view of an [`EscfnModel`] for one backend. In learned mode
/// the wave speed is differentiable; in jacobian mode it enters as a constant
/// of the forward pass (gradients flow through the central flux term only).
pub struct EscfnFlux<'m, T: Scalar, A> {
    pub model: &'m EscfnModel<T>,
    pub flux: LiftedMlp<A>,
    pub wavespeed: LiftedMlp<A>,
}

impl<T: Scalar> EscfnModel<T> {
    /// Lift parameters as backend constants (evaluation only).
    pub fn flux_model<O: CellOps<T>>(&self, ops: &mut O) -> EscfnFlux<'_, T, O::Arr> {
        EscfnFlux {
            model: self,
            flux: self.flux_net.lift(ops),
            wavespeed: self.wavespeed_net.lift(ops),
        }
    }

    /// Lift parameters as tape leaves (training). The returned lifted nets
    /// expose the leaf handles for gradient retrieval.
    pub fn flux_model_leaves<'m>(&'m self, tape: &mut Tape<T>) -> EscfnFlux<'m, T, autodiff::DVar> {
        EscfnFlux {
            model: self,
            flux: self.flux_net.lift_leaves(tape),
            wavespeed: self.wavespeed_net.lift_leaves(tape),
        }
    }
}

impl<T: Scalar, O: CellOps<T>> FluxModel<T, O> for EscfnFlux<'_, T, O::Arr> {
    fn eval(&self, ops: &mut O, u: &O::Arr) -> Result<O::Arr> {
        mlp_forward(ops, &self.flux, u)
    }

    fn max_wave_speed(&self, ops: &mut O, u_plus: &O::Arr, u_minus: &O::Arr) -> Result<O::Arr> {
        match self.model.mode {
            WavespeedMode::Learned => {
                let (_, m) = ops.shape(u_plus);
                let both = ops.concat_cols(&[u_plus.clone(), u_minus.clone()])?;
                let out = mlp_forward(ops, &self.wavespeed, &both)?;
                let out = ops.abs(&out);
                let a_plus = ops.slice_cols(&out, 0, m)?;
                let a_minus = ops.slice_cols(&out, m, m)?;
                ops.max(&a_plus, &a_minus)
            }
            WavespeedMode::Jacobian => {
                let up = ops.peek(u_plus);
                let um = ops.peek(u_minus);
                let m = up.ncols();
                let mut a = Array2::zeros((1, m));
                for i in 0..m {
                    let sp = self
                        .model
                        .jacobian_spectral_radius(&up.column(i).to_vec())?;
                    let sm = self
                        .model
                        .jacobian_spectral_radius(&um.column(i).to_vec())?;
                    a[(0, i)] = sp.max(sm);
                }
                Ok(ops.constant(a))
            }
        }
    }
}

/// One observation-interval step of the learned operator N (plain backend).
pub fn escfn_step<T: Scalar>(
    model: &EscfnModel<T>,
    state: &FieldState<T>,
    scheme: &KtScheme<T>,
    config: &SolverConfig<T>,
    diag: &mut SolverDiagnostics<T>,
) -> Result<FieldState<T>> {
    state.expect_frame(Frame::Conserved, "escfn_step")?;
    let mut ops = PlainOps;
    let flux = model.flux_model::<PlainOps>(&mut ops);
    let next = scheme.observation_step(&mut ops, &flux, &state.data, config, diag)?;
    if !next.iter().all(|v| v.is_finite()) {
        return Err(NssdaError::SolverDivergence { step: 0 });
    }
    Ok(FieldState::new(Frame::Conserved, next, state.time + config.dt))
}

/// Neural ODE baseline: du/dt = f^theta(u) on the flattened full-grid state,
/// integrated with one fixed RK4 step per observation interval.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralOdeModel<T: Scalar> {
    pub net: MlpParams<T>,
    pub meta: ModelMeta,
}

pub const NODE_HIDDEN: usize = 64;
pub const NODE_LAYERS: usize = 4;

impl<T: Scalar> NeuralOdeModel<T> {
    /// Default architecture: 2n -> 4 x 64 (silu) -> 2n. SWE only.
    pub fn init(state_dim: usize, system: &str, rng: &mut RandomStream, seed: u64) -> Self {
        let mut dims = vec![state_dim];
        dims.extend(std::iter::repeat_n(NODE_HIDDEN, NODE_LAYERS));
        dims.push(state_dim);
        NeuralOdeModel {
            net: MlpParams::init(&dims, Activation::Silu, rng),
            meta: ModelMeta {
                system: system.to_string(),
                seed,
                epochs_trained: 0,
            },
        }
    }

    pub fn state_dim(&self) -> usize {
        *self.net.dims.first().expect("nonempty dims")
    }
}

/// One RK4 step of du/dt = f(u) on a flattened (d x 1) state.
pub fn rk4_step<T: Scalar, O: CellOps<T>>(
    ops: &mut O,
    net: &LiftedMlp<O::Arr>,
    u: &O::Arr,
    dt: T,
) -> Result<O::Arr> {
    let half = T::from_f64_c(0.5);
    let sixth = T::from_f64_c(1.0 / 6.0);
    let k1 = mlp_forward(ops, net, u)?;
    let k1h = ops.scalar_mul(&k1, dt * half);
    let u2 = ops.add(u, &k1h)?;
    let k2 = mlp_forward(ops, net, &u2)?;
    let k2h = ops.scalar_mul(&k2, dt * half);
    let u3 = ops.add(u, &k2h)?;
    let k3 = mlp_forward(ops, net, &u3)?;
    let k3f = ops.scalar_mul(&k3, dt);
    let u4 = ops.add(u, &k3f)?;
    let k4 = mlp_forward(ops, net, &u4)?;
    // u + dt/6 (k1 + 2 k2 + 2 k3 + k4)
    let k2x2 = ops.scalar_mul(&k2, T::from_f64_c(2.0));
    let k3x2 = ops.scalar_mul(&k3, T::from_f64_c(2.0));
    let s = ops.add(&k1, &k2x2)?;
    let s = ops.add(&s, &k3x2)?;
    let s = ops.add(&s, &k4)?;
    let s = ops.scalar_mul(&s, dt * sixth);
    ops.add(u, &s)
}

/// Flatten a p x n conserved state channel-major into a (p n) x 1 column.
pub fn flatten_state<T: Scalar>(data: &Array2<T>) -> Array2<T> {
    let d = data.len();
    Array2::from_shape_vec((d, 1), data.iter().copied().collect()).expect("length matches")
}

/// Inverse of [`flatten_state`].
pub fn unflatten_state<T: Scalar>(col: &Array2<T>, p: usize, n: usize) -> Array2<T> {
    Array2::from_shape_vec((p, n), col.iter().copied().collect()).expect("length matches")
}

/// One observation-interval step of the Neural ODE flow map (plain backend).
pub fn node_step<T: Scalar>(
    model: &NeuralOdeModel<T>,
    state: &FieldState<T>,
    dt: T,
) -> Result<FieldState<T>> {
    state.expect_frame(Frame::Conserved, "node_step")?;
    let (p, n) = state.data.dim();
    if p * n != model.state_dim() {
        return Err(NssdaError::ShapeMismatch {
            op: "node_step",
            expected: format!("{} flattened entries", model.state_dim()),
            got: format!("{}", p * n),
        });
    }
    let mut ops = PlainOps;
    let net = model.net.lift::<PlainOps>(&mut ops);
    let u = flatten_state(&state.data);
    let next = rk4_step(&mut ops, &net, &u, dt)?;
    if !next.iter().all(|v| v.is_finite()) {
        return Err(NssdaError::SolverDivergence { step: 0 });
    }
    Ok(FieldState::new(
        Frame::Conserved,
        unflatten_state(&next, p, n),
        state.time + dt,
    ))
}

/// A persisted model.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint<T: Scalar> {
    Escfn(EscfnModel<T>),
    Node(NeuralOdeModel<T>),
}

impl<T: Scalar> Checkpoint<T> {
    pub fn meta(&self) -> &ModelMeta {
        match self {
            Checkpoint::Escfn(m) => &m.meta,
            Checkpoint::Node(m) => &m.meta,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Checkpoint::Escfn(_) => "escfn",
            Checkpoint::Node(_) => "node",
        }
    }
}

fn dims_string(dims: &[usize]) -> String {
    dims.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_dims(s: &str, offset: usize) -> Result<Vec<usize>> {
    s.split('x')
        .map(|part| {
            part.parse::<usize>().map_err(|_| NssdaError::Parse {
                offset,
                detail: format!("bad dimension '{part}'"),
            })
        })
        .collect()
}

/// Self-describing binary checkpoint: magic "NSSDA1", a u32-LE length-prefixed
/// metadata text block of key=value lines, then the little-endian f64
/// parameter payload in layer order (per network: weights row-major then bias).
pub fn save_checkpoint<T: Scalar>(model: &Checkpoint<T>, path: &Path) -> Result<()> {
    let mut meta = String::new();
    let push = |meta: &mut String, k: &str, v: &str| {
        meta.push_str(k);
        meta.push('=');
        meta.push_str(v);
        meta.push('\n');
    };
    let m = model.meta();
    push(&mut meta, "kind", model.kind());
    push(&mut meta, "system", &m.system);
    push(&mut meta, "seed", &m.seed.to_string());
    push(&mut meta, "epochs", &m.epochs_trained.to_string());
    let payload: Vec<T> = match model {
        Checkpoint::Escfn(e) => {
            push(&mut meta, "flux_dims", &dims_string(&e.flux_net.dims));
            push(&mut meta, "flux_activation", e.flux_net.activation.as_str());
            push(&mut meta, "wavespeed_dims", &dims_string(&e.wavespeed_net.dims));
            push(
                &mut meta,
                "wavespeed_activation",
                e.wavespeed_net.activation.as_str(),
            );
            push(&mut meta, "wavespeed_mode", e.mode.as_str());
            let mut flat = e.flux_net.flatten();
            flat.extend(e.wavespeed_net.flatten());
            flat
        }
        Checkpoint::Node(n) => {
            push(&mut meta, "net_dims", &dims_string(&n.net.dims));
            push(&mut meta, "net_activation", n.net.activation.as_str());
            n.net.flatten()
        }
    };
    let mut bytes = Vec::with_capacity(6 + 4 + meta.len() + payload.len() * 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(meta.as_bytes());
    for v in &payload {
        bytes.extend_from_slice(&v.to_f64().unwrap().to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| NssdaError::io(format!("writing {}", path.display()), e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes =
        fs::read(path).map_err(|e| NssdaError::io(format!("reading {}", path.display()), e))?;
    let fail = |offset: usize, detail: String| NssdaError::Parse { offset, detail };
    if bytes.len() < 10 || &bytes[0..6] != CHECKPOINT_MAGIC {
        return Err(fail(0, "missing NSSDA1 magic".into()));
    }
    let meta_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let meta_end = 10 + meta_len;
    if bytes.len() < meta_end {
        return Err(fail(10, "truncated metadata block".into()));
    }
    let meta = std::str::from_utf8(&bytes[10..meta_end])
        .map_err(|e| fail(10 + e.valid_up_to(), "metadata is not UTF-8".into()))?;
    let mut kv = std::collections::HashMap::new();
    for line in meta.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| fail(10, format!("missing metadata key '{k}'")))
    };
    let payload = &bytes[meta_end..];
    if payload.len() % 8 != 0 {
        return Err(fail(meta_end, "payload is not a whole number of f64s".into()));
    }
    let flat: Vec<T> = payload
        .chunks_exact(8)
        .map(|c| T::from_f64_c(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let meta_struct = ModelMeta {
        system: get("system")?.clone(),
        seed: get("seed")?
            .parse()
            .map_err(|_| fail(10, "bad seed".into()))?,
        epochs_trained: get("epochs")?
            .parse()
            .map_err(|_| fail(10, "bad epochs".into()))?,
    };
    match get("kind")?.as_str() {
        "escfn" => {
            let flux_dims = parse_dims(get("flux_dims")?, 10)?;
            let ws_dims = parse_dims(get("wavespeed_dims")?, 10)?;
            let flux_act = Activation::parse(get("flux_activation")?)?;
            let ws_act = Activation::parse(get("wavespeed_activation")?)?;
            let mode = WavespeedMode::parse(get("wavespeed_mode")?)?;
            let flux_count = MlpParams::<T>::zeros(&flux_dims, flux_act).parameter_count();
            if flat.len() < flux_count {
                return Err(fail(meta_end, "truncated parameter payload".into()));
            }
            let flux_net = MlpParams::unflatten(&flux_dims, flux_act, &flat[..flux_count])?;
            let wavespeed_net = MlpParams::unflatten(&ws_dims, ws_act, &flat[flux_count..])
                .map_err(|_| fail(meta_end, "truncated parameter payload".into()))?;
            Ok(Checkpoint::Escfn(EscfnModel {
                flux_net,
                wavespeed_net,
                mode,
                meta: meta_struct,
            }))
        }
        "node" => {
            let dims = parse_dims(get("net_dims")?, 10)?;
            let act = Activation::parse(get("net_activation")?)?;
            let net = MlpParams::unflatten(&dims, act, &flat)
                .map_err(|_| fail(meta_end, "truncated parameter payload".into()))?;
            Ok(Checkpoint::Node(NeuralOdeModel {
                net,
                meta: meta_struct,
            }))
        }
        other => Err(fail(10, format!("unknown checkpoint kind '{other}'"))),
    }
}
