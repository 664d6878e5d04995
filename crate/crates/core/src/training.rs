//! Recurrent rollout loss, Adam, and the full-batch training loop for the
//! flux-form surrogate and the Neural ODE baseline.
//!
//! Each epoch records one rollout over the training prefix on a fresh tape,
//! takes one Adam step, and drops the tape. Divergent rollouts skip the
//! update and retry the previous update at a halved learning rate.

use std::time::Instant;

use ndarray::Array2;

use crate::autodiff::{DVar, Tape};
use crate::error::{NssdaError, Result};
use crate::ops::{CellOps, PlainOps, TapeOps};
use crate::scalar::Scalar;
use crate::solver::{KtScheme, SolverConfig, SolverDiagnostics};
use crate::state::FieldState;
use crate::surrogate::{rk4_step, flatten_state, EscfnModel, NeuralOdeModel};
use crate::system::SystemSpec;

/// Consecutive learning-rate halvings attempted after divergent epochs before
/// giving up on re-applying the previous update.
const MAX_HALVINGS: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Escfn,
    Node,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Escfn => "escfn",
            ModelKind::Node => "node",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "escfn" => Ok(ModelKind::Escfn),
            "node" => Ok(ModelKind::Node),
            other => Err(NssdaError::Config(format!(
                "unknown model kind '{other}' (expected escfn or node)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T: Scalar> {
    pub l_train: usize,
    pub epochs: usize,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub seed: u64,
    pub differentiate_limiter: bool,
    pub model_kind: ModelKind,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(l_train: usize, epochs: usize, lr: T, seed: u64, model_kind: ModelKind) -> Self {
        TrainConfig {
            l_train,
            epochs,
            lr,
            beta1: T::from_f64_c(0.9),
            beta2: T::from_f64_c(0.999),
            eps: T::from_f64_c(1e-8),
            seed,
            differentiate_limiter: true,
            model_kind,
        }
    }

    /// `trajectory_steps` is J, the number of observation intervals available.
    pub fn validate(&self, trajectory_steps: usize) -> Result<()> {
        if self.l_train == 0 || self.l_train >= trajectory_steps.max(1) {
            return Err(NssdaError::Config(format!(
                "l_train = {} must satisfy 0 < l_train < J = {trajectory_steps}",
                self.l_train
            )));
        }
        if self.lr <= T::zero() {
            return Err(NssdaError::Config(format!("lr = {} must be > 0", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord<T: Scalar> {
    pub epoch: usize,
    /// Rollout loss; infinity on divergent epochs.
    pub loss: T,
    pub divergent: bool,
    pub lr_used: T,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord<T: Scalar> {
    pub epochs: Vec<EpochRecord<T>>,
}

impl<T: Scalar> Default for TrainRecord<T> {
    fn default() -> Self {
        TrainRecord { epochs: Vec::new() }
    }
}

impl<T: Scalar> TrainRecord<T> {
    pub fn final_loss(&self) -> Option<T> {
        self.epochs.iter().rev().find(|e| !e.divergent).map(|e| e.loss)
    }

    /// CSV body: epoch, loss, divergent-flag, lr-used, seconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,divergent,lr_used,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.16e},{},{:.16e},{:.6}\n",
                e.epoch,
                e.loss.to_f64().unwrap(),
                u8::from(e.divergent),
                e.lr_used.to_f64().unwrap(),
                e.seconds
            ));
        }
        out
    }
}

/// Physical-frame observations -> conserved-frame training snapshots
/// (y^u_j = Phi^-1(y^v_j)). Noise can push heights /
/// pressures nonpositive; those cells are floored and counted.
pub fn preprocess<T: Scalar>(
    observations: &[FieldState<T>],
    spec: &SystemSpec<T>,
) -> Result<(Vec<FieldState<T>>, usize)> {
    let mut out = Vec::with_capacity(observations.len());
    let mut floored = 0;
    for obs in observations {
        let (u, f) = spec.phi_floored(obs)?;
        floored += f;
        out.push(u);
    }
    Ok((out, floored))
}

/// Sum of all entries of a (possibly taped) matrix as a 1 x 1 value, via two
/// ones-vector matmuls.
fn sum_all<T: Scalar, O: CellOps<T>>(ops: &mut O, a: &O::Arr) -> Result<O::Arr> {
    let (p, n) = ops.shape(a);
    let ones_row = ops.constant(Array2::from_elem((1, p), T::one()));
    let ones_col = ops.constant(Array2::from_elem((n, 1), T::one()));
    let rowsum = ops.matmul(&ones_row, a)?;
    ops.matmul(&rowsum, &ones_col)
}

/// The recurrent loss L = (1/L_train) sum_{j=1}^{L_train} ||u_j - y_j||^2,
/// rolled out from y_0 by `step`. The j = 0 term is identically zero and not
/// computed. Returns the 1 x 1 loss node.
fn rollout_loss<T, O, S>(ops: &mut O, targets: &[Array2<T>], l_train: usize, mut step: S) -> Result<O::Arr>
where
    T: Scalar,
    O: CellOps<T>,
    S: FnMut(&mut O, &O::Arr) -> Result<O::Arr>,
{
    let mut u = ops.constant(targets[0].clone());
    let mut loss: Option<O::Arr> = None;
    for (j, target) in targets.iter().enumerate().take(l_train + 1).skip(1) {
        u = step(ops, &u)?;
        let forward = ops.peek(&u);
        if !forward.iter().all(|v| v.is_finite()) {
            return Err(NssdaError::SolverDivergence { step: j });
        }
        let y = ops.constant(target.clone());
        let err = ops.sub(&u, &y)?;
        let sq = ops.square(&err);
        let term = sum_all(ops, &sq)?;
        loss = Some(match loss {
            None => term,
            Some(acc) => ops.add(&acc, &term)?,
        });
    }
    let total = loss.expect("l_train >= 1");
    Ok(ops.scalar_mul(&total, T::one() / T::from_usize(l_train).unwrap()))
}

/// Grid/stepping context shared by loss evaluation and training.
#[derive(Debug, Clone)]
pub struct RolloutSetup<T: Scalar> {
    pub scheme: KtScheme<T>,
    pub solver: SolverConfig<T>,
}

fn conserved_data<T: Scalar>(snapshots: &[FieldState<T>], l_train: usize) -> Result<Vec<Array2<T>>> {
    if snapshots.len() < l_train + 1 {
        return Err(NssdaError::Config(format!(
            "need {} snapshots for l_train = {l_train}, have {}",
            l_train + 1,
            snapshots.len()
        )));
    }
    snapshots[..=l_train]
        .iter()
        .map(|s| {
            s.expect_frame(crate::state::Frame::Conserved, "training data")?;
            Ok(s.data.clone())
        })
        .collect()
}

/// Plain (untaped) rollout loss; used by finite-difference oracles.
pub fn escfn_loss<T: Scalar>(
    model: &EscfnModel<T>,
    snapshots: &[FieldState<T>],
    l_train: usize,
    setup: &RolloutSetup<T>,
) -> Result<T> {
    let targets = conserved_data(snapshots, l_train)?;
    let mut ops = PlainOps;
    let flux = model.flux_model::<PlainOps>(&mut ops);
    let mut diag = SolverDiagnostics::default();
    let loss = rollout_loss(&mut ops, &targets, l_train, |ops, u| {
        setup.scheme.observation_step(ops, &flux, u, &setup.solver, &mut diag)
    })?;
    Ok(loss[(0, 0)])
}

/// Taped rollout loss and its gradient with respect to all parameters, in
/// [`escfn_param_arrays`] order.
pub fn escfn_loss_and_grads<T: Scalar>(
    model: &EscfnModel<T>,
    snapshots: &[FieldState<T>],
    l_train: usize,
    setup: &RolloutSetup<T>,
) -> Result<(T, Vec<Array2<T>>)> {
    let targets = conserved_data(snapshots, l_train)?;
    let mut tape = Tape::new();
    let flux = model.flux_model_leaves(&mut tape);
    let leaves: Vec<DVar> = flux
        .flux
        .weights
        .iter()
        .chain(flux.flux.biases.iter())
        .chain(flux.wavespeed.weights.iter())
        .chain(flux.wavespeed.biases.iter())
        .copied()
        .collect();
    let mut ops = TapeOps::new(&mut tape);
    let mut diag = SolverDiagnostics::default();
    let loss = rollout_loss(&mut ops, &targets, l_train, |ops, u| {
        setup.scheme.observation_step(ops, &flux, u, &setup.solver, &mut diag)
    })?;
    let loss_val = tape.value(loss)[(0, 0)];
    if !loss_val.is_finite() {
        return Err(NssdaError::SolverDivergence { step: 0 });
    }
    let grads = tape.backward(loss)?;
    let shapes: Vec<(usize, usize)> = leaves.iter().map(|v| tape.shape(*v)).collect();
    let grad_arrays = leaves
        .iter()
        .zip(shapes.iter())
        .map(|(v, s)| grads.get(*v, *s))
        .collect();
    Ok((loss_val, grad_arrays))
}

pub fn node_loss<T: Scalar>(
    model: &NeuralOdeModel<T>,
    snapshots: &[FieldState<T>],
    l_train: usize,
    dt: T,
) -> Result<T> {
    let targets: Vec<Array2<T>> = conserved_data(snapshots, l_train)?
        .iter()
        .map(flatten_state)
        .collect();
    let mut ops = PlainOps;
    let net = model.net.lift::<PlainOps>(&mut ops);
    let loss = rollout_loss(&mut ops, &targets, l_train, |ops, u| {
        rk4_step(ops, &net, u, dt)
    })?;
    Ok(loss[(0, 0)])
}

pub fn node_loss_and_grads<T: Scalar>(
    model: &NeuralOdeModel<T>,
    snapshots: &[FieldState<T>],
    l_train: usize,
    dt: T,
) -> Result<(T, Vec<Array2<T>>)> {
    let targets: Vec<Array2<T>> = conserved_data(snapshots, l_train)?
        .iter()
        .map(flatten_state)
        .collect();
    let mut tape = Tape::new();
    let net = model.net.lift_leaves(&mut tape);
    let leaves: Vec<DVar> = net.weights.iter().chain(net.biases.iter()).copied().collect();
    let mut ops = TapeOps::new(&mut tape);
    let loss = rollout_loss(&mut ops, &targets, l_train, |ops, u| {
        rk4_step(ops, &net, u, dt)
    })?;
    let loss_val = tape.value(loss)[(0, 0)];
    if !loss_val.is_finite() {
        return Err(NssdaError::SolverDivergence { step: 0 });
    }
    let grads = tape.backward(loss)?;
    let shapes: Vec<(usize, usize)> = leaves.iter().map(|v| tape.shape(*v)).collect();
    let grad_arrays = leaves
        .iter()
        .zip(shapes.iter())
        .map(|(v, s)| grads.get(*v, *s))
        .collect();
    Ok((loss_val, grad_arrays))
}

/// Parameter arrays in the canonical training order: all weights, then all
/// biases, flux net before wave-speed net.
pub fn escfn_param_arrays<T: Scalar>(model: &EscfnModel<T>) -> Vec<Array2<T>> {
    model
        .flux_net
        .weights
        .iter()
        .chain(model.flux_net.biases.iter())
        .chain(model.wavespeed_net.weights.iter())
        .chain(model.wavespeed_net.biases.iter())
        .cloned()
        .collect()
}

pub fn escfn_set_params<T: Scalar>(model: &mut EscfnModel<T>, params: &[Array2<T>]) {
    let slots: Vec<&mut Array2<T>> = model
        .flux_net
        .weights
        .iter_mut()
        .chain(model.flux_net.biases.iter_mut())
        .chain(model.wavespeed_net.weights.iter_mut())
        .chain(model.wavespeed_net.biases.iter_mut())
        .collect();
    assert_eq!(slots.len(), params.len());
    for (slot, value) in slots.into_iter().zip(params.iter()) {
        *slot = value.clone();
    }
}

pub fn node_param_arrays<T: Scalar>(model: &NeuralOdeModel<T>) -> Vec<Array2<T>> {
    model
        .net
        .weights
        .iter()
        .chain(model.net.biases.iter())
        .cloned()
        .collect()
}

pub fn node_set_params<T: Scalar>(model: &mut NeuralOdeModel<T>, params: &[Array2<T>]) {
    let slots: Vec<&mut Array2<T>> = model
        .net
        .weights
        .iter_mut()
        .chain(model.net.biases.iter_mut())
        .collect();
    assert_eq!(slots.len(), params.len());
    for (slot, value) in slots.into_iter().zip(params.iter()) {
        *slot = value.clone();
    }
}

/// First/second Adam moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
    pub t: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Array2<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
            t: 0,
        }
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step<T: Scalar>(
    params: &mut [Array2<T>],
    grads: &[Array2<T>],
    state: &mut AdamState<T>,
    lr: T,
    config: &TrainConfig<T>,
) {
    state.t += 1;
    let t = T::from_usize(state.t).unwrap();
    let (b1, b2) = (config.beta1, config.beta2);
    let bias1 = T::one() - b1.powf(t);
    let bias2 = T::one() - b2.powf(t);
    for k in 0..params.len() {
        ndarray::Zip::from(&mut state.m[k]).and(&grads[k]).for_each(|m, &g| {
            *m = b1 * *m + (T::one() - b1) * g;
        });
        ndarray::Zip::from(&mut state.v[k]).and(&grads[k]).for_each(|v, &g| {
            *v = b2 * *v + (T::one() - b2) * g * g;
        });
        ndarray::Zip::from(&mut params[k])
            .and(&state.m[k])
            .and(&state.v[k])
            .for_each(|p, &m, &v| {
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + config.eps);
            });
    }
}

/// Snapshot taken before an Adam update so a divergence in the next epoch
/// can retry that update at a smaller learning rate.
struct PendingUpdate<T: Scalar> {
    pre_params: Vec<Array2<T>>,
    pre_adam: AdamState<T>,
    grads: Vec<Array2<T>>,
}

/// Generic full-batch training loop: one rollout + one Adam step per epoch.
/// `loss_and_grads` evaluates the current parameters; divergence is signaled
/// by a `SolverDivergence` error and handled by skipping the update and
/// re-applying the previous one at a halved rate.
fn train_loop<T, F>(
    params: &mut Vec<Array2<T>>,
    config: &TrainConfig<T>,
    mut loss_and_grads: F,
) -> Result<TrainRecord<T>>
where
    T: Scalar,
    F: FnMut(&[Array2<T>]) -> Result<(T, Vec<Array2<T>>)>,
{
    let mut adam = AdamState::new(params);
    let mut record = TrainRecord::default();
    let mut pending: Option<PendingUpdate<T>> = None;
    let mut halvings: u32 = 0;
    for epoch in 0..config.epochs {
        let start = Instant::now();
        match loss_and_grads(params) {
            Ok((loss, grads)) => {
                halvings = 0;
                pending = Some(PendingUpdate {
                    pre_params: params.clone(),
                    pre_adam: adam.clone(),
                    grads: grads.clone(),
                });
                adam_step(params, &grads, &mut adam, config.lr, config);
                record.epochs.push(EpochRecord {
                    epoch,
                    loss,
                    divergent: false,
                    lr_used: config.lr,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
            Err(NssdaError::SolverDivergence { .. }) => {
                // The previous update overshot; redo it from its pre-update
                // state at half the rate (repeatedly halving on repeats).
                let mut lr_used = config.lr;
                if let Some(p) = pending.as_ref() {
                    if halvings < MAX_HALVINGS {
                        halvings += 1;
                        lr_used = config.lr / T::from_f64_c(f64::from(1u32 << halvings.min(30)));
                        *params = p.pre_params.clone();
                        adam = p.pre_adam.clone();
                        adam_step(params, &p.grads, &mut adam, lr_used, config);
                    }
                }
                record.epochs.push(EpochRecord {
                    epoch,
                    loss: T::infinity(),
                    divergent: true,
                    lr_used,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
            Err(other) => return Err(other),
        }
    }
    if config.epochs > 0 && record.epochs.iter().all(|e| e.divergent) {
        return Err(NssdaError::TrainingFailure(format!(
            "all {} epochs divergent",
            config.epochs
        )));
    }
    Ok(record)
}

/// Train the flux-form surrogate on conserved-frame snapshots.
pub fn train_escfn<T: Scalar>(
    model: &EscfnModel<T>,
    snapshots: &[FieldState<T>],
    setup: &RolloutSetup<T>,
    config: &TrainConfig<T>,
) -> Result<(EscfnModel<T>, TrainRecord<T>)> {
    let mut setup = setup.clone();
    setup.scheme.freeze_limiter = !config.differentiate_limiter;
    let mut trained = model.clone();
    let mut params = escfn_param_arrays(&trained);
    let record = train_loop(&mut params, config, |p| {
        let mut current = trained.clone();
        escfn_set_params(&mut current, p);
        escfn_loss_and_grads(&current, snapshots, config.l_train, &setup)
    })?;
    escfn_set_params(&mut trained, &params);
    trained.meta.epochs_trained += config.epochs;
    Ok((trained, record))
}

/// Train the Neural ODE baseline on conserved-frame snapshots.
pub fn train_node<T: Scalar>(
    model: &NeuralOdeModel<T>,
    snapshots: &[FieldState<T>],
    dt: T,
    config: &TrainConfig<T>,
) -> Result<(NeuralOdeModel<T>, TrainRecord<T>)> {
    let mut trained = model.clone();
    let mut params = node_param_arrays(&trained);
    let record = train_loop(&mut params, config, |p| {
        let mut current = trained.clone();
        node_set_params(&mut current, p);
        node_loss_and_grads(&current, snapshots, config.l_train, dt)
    })?;
    node_set_params(&mut trained, &params);
    trained.meta.epochs_trained += config.epochs;
    Ok((trained, record))
}
