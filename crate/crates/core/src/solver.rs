//! Kurganov-Tadmor semi-discrete central scheme with minmod reconstruction
//! and TVDRK3 time stepping, generic over the flux provider (analytic or
//! neural) and over the evaluation backend (plain arrays or AD tape).
//!
//! States are p x n conserved-frame matrices. Two ghost cells per side are
//! appended each stage: Dirichlet ghosts hold the fixed boundary states,
//! periodic ghosts wrap (test-only).

use ndarray::Array2;

use crate::error::{NssdaError, Result};
use crate::ops::{CellOps, PlainOps};
use crate::scalar::Scalar;
use crate::state::{FieldState, Frame};
use crate::system::Boundary;

/// Slopes are zeroed where the forward difference is below this (the minmod
/// limit of a flat denominator).
pub const FLAT_GUARD: f64 = 1e-14;

/// Flux provider contract: pointwise flux and local maximum wave speed,
/// evaluated on whole interface batches (p x m).
///
/// Parameterized by the evaluation backend so a neural flux can hold its
/// parameters as tape leaves; analytic fluxes implement it for every backend.
pub trait FluxModel<T: Scalar, O: CellOps<T>> {
    fn eval(&self, ops: &mut O, u: &O::Arr) -> Result<O::Arr>;

    /// Nonnegative local maximum wave speed per interface (1 x m), from the
    /// two interface states.
    fn max_wave_speed(&self, ops: &mut O, u_plus: &O::Arr, u_minus: &O::Arr) -> Result<O::Arr>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig<T: Scalar> {
    /// Courant number used by the runtime stability check.
    pub cfl: T,
    /// Observation interval; one call to the one-step operator advances this far.
    pub dt: T,
    /// TVDRK3 sub-iterations per observation interval.
    pub substeps: usize,
}

impl<T: Scalar> SolverConfig<T> {
    pub fn new(cfl: T, dt: T, substeps: usize) -> Result<Self> {
        if substeps == 0 || dt <= T::zero() || cfl <= T::zero() {
            return Err(NssdaError::Config(format!(
                "invalid solver config: cfl={cfl}, dt={dt}, substeps={substeps}"
            )));
        }
        Ok(SolverConfig { cfl, dt, substeps })
    }
}

/// Runtime counters collected while stepping.
#[derive(Debug, Clone)]
pub struct SolverDiagnostics<T: Scalar> {
    /// Number of substeps whose dt exceeded cfl * dx / max_wave_speed.
    pub cfl_violations: usize,
    /// Largest wave speed observed.
    pub max_wave_speed_seen: T,
    /// When enabled, per-channel accumulated boundary flux difference
    /// dt * sum_stages w_s * (H_{-1/2} - H_{n-1/2}), i.e. the exact change of
    /// sum_i u_i * dx predicted by the scheme.
    pub boundary_flux: Option<Vec<T>>,
}

impl<T: Scalar> Default for SolverDiagnostics<T> {
    fn default() -> Self {
        SolverDiagnostics {
            cfl_violations: 0,
            max_wave_speed_seen: T::zero(),
            boundary_flux: None,
        }
    }
}

impl<T: Scalar> SolverDiagnostics<T> {
    pub fn with_boundary_tracking(p: usize) -> Self {
        SolverDiagnostics {
            boundary_flux: Some(vec![T::zero(); p]),
            ..Default::default()
        }
    }
}

/// The KT scheme on a fixed grid spacing with a fixed boundary policy.
#[derive(Debug, Clone)]
pub struct KtScheme<T: Scalar> {
    pub dx: T,
    /// When set, the limiter values psi(r) from the forward pass are treated
    /// as constants in backward passes (gradients do not flow through psi).
    pub freeze_limiter: bool,
    pub boundary: Boundary<T>,
}

impl<T: Scalar> KtScheme<T> {
    pub fn new(dx: T, boundary: Boundary<T>) -> Self {
        KtScheme {
            dx,
            freeze_limiter: false,
            boundary,
        }
    }
}

/// The minmod-type limiter psi(r) = max(0, min(r, (1+r)/2, 1)).
pub fn minmod_psi<T: Scalar>(r: T) -> T {
    let half = T::from_f64_c(0.5);
    r.min((T::one() + r) * half).min(T::one()).max(T::zero())
}

/// Forward values per stage, for CFL checks and conservation bookkeeping.
struct StageInfo<T> {
    max_speed: T,
    /// (H_left, H_right) per channel: fluxes at the domain boundary interfaces.
    boundary_fluxes: Vec<(T, T)>,
}

impl<T: Scalar> KtScheme<T> {
    /// Append two ghost cells per side.
    fn extend<O: CellOps<T>>(&self, ops: &mut O, u: &O::Arr) -> Result<O::Arr> {
        let (p, n) = ops.shape(u);
        match &self.boundary {
            Boundary::Dirichlet { left, right } => {
                let mut lcol = Array2::zeros((p, 2));
                let mut rcol = Array2::zeros((p, 2));
                for c in 0..p {
                    lcol[(c, 0)] = left[c];
                    lcol[(c, 1)] = left[c];
                    rcol[(c, 0)] = right[c];
                    rcol[(c, 1)] = right[c];
                }
                let l = ops.constant(lcol);
                let r = ops.constant(rcol);
                ops.concat_cols(&[l, u.clone(), r])
            }
            Boundary::Periodic => {
                let l = ops.slice_cols(u, n - 2, 2)?;
                let r = ops.slice_cols(u, 0, 2)?;
                ops.concat_cols(&[l, u.clone(), r])
            }
        }
    }

    /// Minmod-limited slopes in the cancelled form psi(r) * (u_{j+1} - u_j),
    /// for cells j = -1..n (columns of the result).
    pub fn limited_slopes<O: CellOps<T>>(&self, ops: &mut O, extended: &O::Arr) -> Result<O::Arr> {
        let (_, m) = ops.shape(extended); // m = n + 4
        let shifted = ops.slice_cols(extended, 1, m - 1)?;
        let base = ops.slice_cols(extended, 0, m - 1)?;
        let d = ops.sub(&shifted, &base)?; // d[k] = u_{k+1} - u_k, k = -2..n
        let (_, md) = ops.shape(&d); // n + 3
        let d_plus = ops.slice_cols(&d, 1, md - 1)?; // d_j for j = -1..n
        let d_minus = ops.slice_cols(&d, 0, md - 1)?; // d_{j-1}
        if self.freeze_limiter {
            // psi computed from forward values only; it enters the graph as a
            // constant factor on the (differentiable) forward differences.
            let guard = T::from_f64_c(FLAT_GUARD);
            let dp = ops.peek(&d_plus);
            let dm = ops.peek(&d_minus);
            let mut psi_vals = Array2::zeros(dp.raw_dim());
            for (idx, v) in psi_vals.indexed_iter_mut() {
                let denom = dp[idx];
                *v = if denom.abs() < guard {
                    T::zero()
                } else {
                    minmod_psi(dm[idx] / denom)
                };
            }
            let psi = ops.constant(psi_vals);
            return ops.mul(&psi, &d_plus);
        }
        let r = ops.guarded_div(&d_minus, &d_plus, T::from_f64_c(FLAT_GUARD))?;
        // psi(r) = max(0, min(r, (1+r)/2, 1))
        let one = ops.fill_like(&r, T::one());
        let r_plus_one = ops.add(&r, &one)?;
        let half_sum = ops.scalar_mul(&r_plus_one, T::from_f64_c(0.5));
        let inner = ops.min(&r, &half_sum)?;
        let inner = ops.min(&inner, &one)?;
        let zero = ops.fill_like(&r, T::zero());
        let psi = ops.max(&zero, &inner)?;
        ops.mul(&psi, &d_plus)
    }

    /// Interface values (u_plus, u_minus) at interfaces i+1/2 for i = -1..n-1
    /// (n + 1 interfaces).
    pub fn reconstruct_interfaces<O: CellOps<T>>(
        &self,
        ops: &mut O,
        extended: &O::Arr,
        slopes: &O::Arr,
    ) -> Result<(O::Arr, O::Arr)> {
        let (_, m) = ops.shape(extended); // n + 4
        let n_ifaces = m - 3; // n + 1
        let cells = ops.slice_cols(extended, 1, m - 2)?; // cells -1..n
        let half = T::from_f64_c(0.5);
        let half_slopes = ops.scalar_mul(slopes, half);
        // u_minus_{i+1/2} = u_i + s_i / 2
        let u_i = ops.slice_cols(&cells, 0, n_ifaces)?;
        let s_i = ops.slice_cols(&half_slopes, 0, n_ifaces)?;
        let u_minus = ops.add(&u_i, &s_i)?;
        // u_plus_{i+1/2} = u_{i+1} - s_{i+1} / 2
        let u_ip1 = ops.slice_cols(&cells, 1, n_ifaces)?;
        let s_ip1 = ops.slice_cols(&half_slopes, 1, n_ifaces)?;
        let u_plus = ops.sub(&u_ip1, &s_ip1)?;
        Ok((u_plus, u_minus))
    }

    /// Central flux with local Lax-Friedrichs dissipation:
    /// H = (F(u+) + F(u-))/2 - a/2 * (u+ - u-).
    pub fn kt_flux<O: CellOps<T>, F: FluxModel<T, O>>(
        &self,
        ops: &mut O,
        flux: &F,
        u_plus: &O::Arr,
        u_minus: &O::Arr,
    ) -> Result<O::Arr> {
        let (_, m) = ops.shape(u_plus);
        // One batched network/flux evaluation for both interface sides.
        let both = ops.concat_cols(&[u_plus.clone(), u_minus.clone()])?;
        let f_both = flux.eval(ops, &both)?;
        let f_plus = ops.slice_cols(&f_both, 0, m)?;
        let f_minus = ops.slice_cols(&f_both, m, m)?;
        let central = ops.add(&f_plus, &f_minus)?;
        let central = ops.scalar_mul(&central, T::from_f64_c(0.5));
        let a = flux.max_wave_speed(ops, u_plus, u_minus)?;
        let jump = ops.sub(u_plus, u_minus)?;
        let dissipation = ops.mul_row_broadcast(&jump, &a)?;
        let dissipation = ops.scalar_mul(&dissipation, T::from_f64_c(0.5));
        ops.sub(&central, &dissipation)
    }

    /// Tendency d/dt u_i = -(H_{i+1/2} - H_{i-1/2}) / dx for the n interior cells.
    pub fn semidiscrete_rhs<O: CellOps<T>, F: FluxModel<T, O>>(
        &self,
        ops: &mut O,
        flux: &F,
        u: &O::Arr,
    ) -> Result<O::Arr> {
        Ok(self.rhs_with_info(ops, flux, u)?.0)
    }

    fn rhs_with_info<O: CellOps<T>, F: FluxModel<T, O>>(
        &self,
        ops: &mut O,
        flux: &F,
        u: &O::Arr,
    ) -> Result<(O::Arr, StageInfo<T>)> {
        let (_, n) = ops.shape(u);
        let extended = self.extend(ops, u)?;
        let slopes = self.limited_slopes(ops, &extended)?;
        let (u_plus, u_minus) = self.reconstruct_interfaces(ops, &extended, &slopes)?;
        let h = self.kt_flux(ops, flux, &u_plus, &u_minus)?;
        let a = flux.max_wave_speed(ops, &u_plus, &u_minus)?;
        let max_speed = self
            .peek_max(ops, &a)
            .ok_or(NssdaError::SolverDivergence { step: 0 })?;
        let h_vals = ops.peek(&h);
        let boundary_fluxes = (0..h_vals.nrows())
            .map(|c| (h_vals[(c, 0)], h_vals[(c, n)]))
            .collect();
        let h_right = ops.slice_cols(&h, 1, n)?;
        let h_left = ops.slice_cols(&h, 0, n)?;
        let dh = ops.sub(&h_right, &h_left)?;
        let rhs = ops.scalar_mul(&dh, -T::one() / self.dx);
        if !ops.peek(&rhs).iter().all(|v| v.is_finite()) {
            return Err(NssdaError::SolverDivergence { step: 0 });
        }
        Ok((
            rhs,
            StageInfo {
                max_speed,
                boundary_fluxes,
            },
        ))
    }

    fn peek_max<O: CellOps<T>>(&self, ops: &O, a: &O::Arr) -> Option<T> {
        let vals = ops.peek(a);
        let mut best = T::zero();
        for v in vals.iter() {
            if !v.is_finite() {
                return None;
            }
            if *v > best {
                best = *v;
            }
        }
        Some(best)
    }

    /// One TVDRK3 step of size dt_sub:
    /// u1 = u + dt L(u); u2 = 3/4 u + 1/4 (u1 + dt L(u1));
    /// u3 = 1/3 u + 2/3 (u2 + dt L(u2)).
    pub fn tvdrk3_step<O: CellOps<T>, F: FluxModel<T, O>>(
        &self,
        ops: &mut O,
        flux: &F,
        u: &O::Arr,
        dt_sub: T,
        config: &SolverConfig<T>,
        diag: &mut SolverDiagnostics<T>,
    ) -> Result<O::Arr> {
        // Effective weight of each stage's L in the total update.
        let stage_weights = [
            T::from_f64_c(1.0 / 6.0),
            T::from_f64_c(1.0 / 6.0),
            T::from_f64_c(2.0 / 3.0),
        ];
        let euler =
            |ops: &mut O, v: &O::Arr, w: T, diag: &mut SolverDiagnostics<T>| -> Result<O::Arr> {
                let (rhs, info) = self.rhs_with_info(ops, flux, v)?;
                if info.max_speed > diag.max_wave_speed_seen {
                    diag.max_wave_speed_seen = info.max_speed;
                }
                if info.max_speed * dt_sub > config.cfl * self.dx {
                    diag.cfl_violations += 1;
                }
                if let Some(acc) = diag.boundary_flux.as_mut() {
                    for (c, (hl, hr)) in info.boundary_fluxes.iter().enumerate() {
                        acc[c] += dt_sub * w * (*hl - *hr);
                    }
                }
                let du = ops.scalar_mul(&rhs, dt_sub);
                ops.add(v, &du)
            };

        let u1 = euler(ops, u, stage_weights[0], diag)?;
        let u1e = euler(ops, &u1, stage_weights[1], diag)?;
        let u_scaled = ops.scalar_mul(u, T::from_f64_c(0.75));
        let u1e_scaled = ops.scalar_mul(&u1e, T::from_f64_c(0.25));
        let u2 = ops.add(&u_scaled, &u1e_scaled)?;
        let u2e = euler(ops, &u2, stage_weights[2], diag)?;
        let u_scaled = ops.scalar_mul(u, T::from_f64_c(1.0 / 3.0));
        let u2e_scaled = ops.scalar_mul(&u2e, T::from_f64_c(2.0 / 3.0));
        ops.add(&u_scaled, &u2e_scaled)
    }

    /// Advance one observation interval (config.substeps TVDRK3 substeps).
    pub fn observation_step<O: CellOps<T>, F: FluxModel<T, O>>(
        &self,
        ops: &mut O,
        flux: &F,
        u: &O::Arr,
        config: &SolverConfig<T>,
        diag: &mut SolverDiagnostics<T>,
    ) -> Result<O::Arr> {
        let dt_sub = config.dt / T::from_usize(config.substeps).unwrap();
        let mut current = u.clone();
        for _ in 0..config.substeps {
            current = self.tvdrk3_step(ops, flux, &current, dt_sub, config, diag)?;
        }
        Ok(current)
    }

    /// Evolve a conserved-frame state for `steps` observation intervals,
    /// returning the J+1 states including the initial one.
    pub fn evolve<F: FluxModel<T, PlainOps>>(
        &self,
        state0: &FieldState<T>,
        flux: &F,
        config: &SolverConfig<T>,
        steps: usize,
        diag: &mut SolverDiagnostics<T>,
    ) -> Result<Vec<FieldState<T>>> {
        state0.expect_frame(Frame::Conserved, "evolve")?;
        let mut ops = PlainOps;
        let mut out = Vec::with_capacity(steps + 1);
        out.push(state0.clone());
        let mut current = state0.data.clone();
        for j in 0..steps {
            current = self
                .observation_step(&mut ops, flux, &current, config, diag)
                .map_err(|e| match e {
                    NssdaError::SolverDivergence { .. } => NssdaError::SolverDivergence { step: j },
                    other => other,
                })?;
            if !current.iter().all(|v| v.is_finite()) {
                return Err(NssdaError::SolverDivergence { step: j });
            }
            let time = state0.time + config.dt * T::from_usize(j + 1).unwrap();
            out.push(FieldState::new(Frame::Conserved, current.clone(), time));
        }
        Ok(out)
    }
}
