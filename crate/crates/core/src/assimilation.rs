//! ETKF and SETKF sequential filtering with a learned forecast model:
//! surrogate-driven prediction, diagonal weighting matrices, posterior-mean
//! minimization, and the deterministic symmetric square-root transform.
//!
//! States are filtered in the physical frame; the forecast maps each member
//! through Phi^-1, one surrogate step, and Phi back. Linear algebra works on
//! channel-major flattened (n p)-vectors and the K x K member space.

use ndarray::Array2;

use crate::error::{NssdaError, Result};
use crate::metric::relative_l2;
use crate::rng::{RandomStream, StreamPurpose};
use crate::scalar::Scalar;
use crate::state::{FieldState, Frame};
use crate::surrogate::{flatten_state, unflatten_state};
use crate::system::SystemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Etkf,
    Setkf,
}

impl FilterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FilterKind::Etkf => "etkf",
            FilterKind::Setkf => "setkf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "etkf" => Ok(FilterKind::Etkf),
            "setkf" => Ok(FilterKind::Setkf),
            other => Err(NssdaError::Config(format!(
                "unknown filter '{other}' (expected etkf or setkf)"
            ))),
        }
    }
}

/// How the diagonal weight W enters the posterior-mean minimization
/// argmin 1/2 |y - v|^2_Sigma + 1/2 |v - m_hat|^2_W.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightConvention {
    /// |v|^2_A = v^T A^-1 v: W acts as a prior covariance surrogate, so large
    /// W (large gradient variability) trusts the observation more.
    Inverse,
    /// |v|^2_A = v^T A v: the flipped reading; large W trusts the prior more.
    Direct,
}

impl WeightConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightConvention::Inverse => "inverse",
            WeightConvention::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "inverse" => Ok(WeightConvention::Inverse),
            "direct" => Ok(WeightConvention::Direct),
            other => Err(NssdaError::Config(format!(
                "unknown weight convention '{other}' (expected inverse or direct)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig<T: Scalar> {
    pub kind: FilterKind,
    /// ETKF inflation; W = alpha^2 diag(C_hat).
    pub alpha: T,
    /// SETKF structural tuning; W = beta * S_hat.
    pub beta: T,
    /// Observation noise variance (Sigma = sigma2 * I).
    pub sigma2: T,
    /// Minimum diagonal weight; keeps the minimization nonsingular on flat
    /// regions.
    pub w_floor: T,
    pub seed: u64,
    pub convention: WeightConvention,
}

impl<T: Scalar> FilterConfig<T> {
    pub fn new(kind: FilterKind, sigma2: T, seed: u64) -> Self {
        FilterConfig {
            kind,
            alpha: T::from_f64_c(1.01),
            beta: T::one(),
            sigma2,
            w_floor: T::from_f64_c(1e-8),
            seed,
            convention: WeightConvention::Inverse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha <= T::zero() || self.beta <= T::zero() || self.w_floor <= T::zero() {
            return Err(NssdaError::Config(format!(
                "filter parameters must be positive: alpha={}, beta={}, w_floor={}",
                self.alpha, self.beta, self.w_floor
            )));
        }
        if self.sigma2 <= T::zero() {
            return Err(NssdaError::Config(format!(
                "sigma2 = {} must be > 0",
                self.sigma2
            )));
        }
        Ok(())
    }
}

/// K physical-frame members on a shared grid and time.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T: Scalar> {
    pub members: Vec<FieldState<T>>,
}

impl<T: Scalar> Ensemble<T> {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn mean(&self) -> FieldState<T> {
        let first = &self.members[0];
        let mut acc = Array2::zeros(first.data.raw_dim());
        for m in &self.members {
            acc += &m.data;
        }
        let scale = T::one() / T::from_usize(self.k()).unwrap();
        FieldState::new(first.frame, acc.mapv(|v| v * scale), first.time)
    }
}

/// Draw K members v^(k) = m0 + N(0, std^2 I) from the ensemble stream, in
/// (member, channel, cell) order.
pub fn init_ensemble<T: Scalar>(
    m0: &FieldState<T>,
    std: T,
    k: usize,
    seed: u64,
) -> Ensemble<T> {
    let mut rng = RandomStream::new(seed, StreamPurpose::EnsembleInit);
    let (p, n) = m0.data.dim();
    let members = (0..k)
        .map(|_| {
            let mut data = m0.data.clone();
            for c in 0..p {
                for i in 0..n {
                    data[(c, i)] += rng.normal(T::zero(), std);
                }
            }
            FieldState::new(m0.frame, data, m0.time)
        })
        .collect();
    Ensemble { members }
}

/// One observation-interval step of the learned operator on a conserved state.
pub trait ForecastModel<T: Scalar> {
    fn step(&self, state: &FieldState<T>) -> Result<FieldState<T>>;
}

impl<T: Scalar, F: Fn(&FieldState<T>) -> Result<FieldState<T>>> ForecastModel<T> for F {
    fn step(&self, state: &FieldState<T>) -> Result<FieldState<T>> {
        self(state)
    }
}

/// Result of propagating an ensemble: the prior and the count of members that
/// diverged and were frozen at their pre-step state.
pub struct ForecastOutcome<T: Scalar> {
    pub ensemble: Ensemble<T>,
    pub diverged: usize,
}

/// Psi = Phi o N o Phi^-1 applied to every member. Diverged members keep
/// their pre-step value (time is still advanced for uniformity).
pub fn forecast<T: Scalar, M: ForecastModel<T>>(
    ensemble: &Ensemble<T>,
    model: &M,
    spec: &SystemSpec<T>,
    dt: T,
) -> Result<ForecastOutcome<T>> {
    let mut members = Vec::with_capacity(ensemble.k());
    let mut diverged = 0;
    for member in &ensemble.members {
        member.expect_frame(Frame::Physical, "forecast")?;
        let stepped = spec
            .phi_floored(member)
            .and_then(|(u, _)| model.step(&u))
            .and_then(|next| spec.phi_inverse(&next).map(|(v, _)| v));
        match stepped {
            Ok(v) if v.is_finite() => members.push(v),
            Ok(_) | Err(NssdaError::SolverDivergence { .. }) | Err(NssdaError::Positivity { .. }) => {
                diverged += 1;
                members.push(FieldState::new(
                    member.frame,
                    member.data.clone(),
                    member.time + dt,
                ));
            }
            Err(other) => return Err(other),
        }
    }
    Ok(ForecastOutcome {
        ensemble: Ensemble { members },
        diverged,
    })
}

/// Sample mean and the centered deviation factor X_hat ((n p) x K), so that
/// C_hat = X_hat X_hat^T / (K - 1) without ever materializing it.
pub fn prior_stats<T: Scalar>(ensemble: &Ensemble<T>) -> Result<(FieldState<T>, Array2<T>)> {
    if ensemble.k() < 2 {
        return Err(NssdaError::Config(format!(
            "prior statistics need K >= 2 members, have {}",
            ensemble.k()
        )));
    }
    let mean = ensemble.mean();
    let mean_flat = flatten_state(&mean.data);
    let d = mean_flat.len();
    let mut deviations = Array2::zeros((d, ensemble.k()));
    for (k, member) in ensemble.members.iter().enumerate() {
        let flat = flatten_state(&member.data);
        for i in 0..d {
            deviations[(i, k)] = flat[(i, 0)] - mean_flat[(i, 0)];
        }
    }
    Ok((mean, deviations))
}

/// ETKF diagonal: W = alpha^2 diag(C_hat), floored.
pub fn weight_etkf<T: Scalar>(deviations: &Array2<T>, alpha: T, w_floor: T) -> Vec<T> {
    let (d, k) = deviations.dim();
    let denom = T::from_usize(k - 1).unwrap();
    (0..d)
        .map(|i| {
            let var = deviations.row(i).iter().map(|x| *x * *x).sum::<T>() / denom;
            (alpha * alpha * var).max(w_floor)
        })
        .collect()
}

/// SETKF diagonal: W = beta * S_hat where S_hat_{i+1/2} is the ensemble
/// second moment of the finite-difference gradient and cell diagonals average
/// the two adjacent interfaces (one-sided at the boundary). Computed per
/// channel on the physical members.
pub fn weight_setkf<T: Scalar>(ensemble: &Ensemble<T>, beta: T, dx: T, w_floor: T) -> Vec<T> {
    let (p, n) = ensemble.members[0].data.dim();
    let k = ensemble.k();
    let kf = T::from_usize(k).unwrap();
    let half = T::from_f64_c(0.5);
    let mut w = Vec::with_capacity(p * n);
    for c in 0..p {
        // interface second moments S_{i+1/2}, i = 0..n-2
        let mut s_iface = vec![T::zero(); n.saturating_sub(1)];
        for member in &ensemble.members {
            for i in 0..n - 1 {
                let g = (member.data[(c, i + 1)] - member.data[(c, i)]) / dx;
                s_iface[i] += g * g;
            }
        }
        for s in &mut s_iface {
            *s = *s / kf;
        }
        for i in 0..n {
            let s = if n == 1 {
                T::zero()
            } else if i == 0 {
                s_iface[0]
            } else if i == n - 1 {
                s_iface[n - 2]
            } else {
                half * (s_iface[i - 1] + s_iface[i])
            };
            w.push((beta * s).max(w_floor));
        }
    }
    w
}

/// Closed-form minimizer of 1/2 |y - v|^2_Sigma + 1/2 |v - m_hat|^2_W with
/// H = I and diagonal W, elementwise per the configured norm convention.
pub fn analysis_mean<T: Scalar>(
    m_hat: &Array2<T>,
    w: &[T],
    y: &Array2<T>,
    sigma2: T,
    convention: WeightConvention,
) -> Array2<T> {
    let mut m = m_hat.clone();
    for (i, v) in m.iter_mut().enumerate() {
        let wi = w[i];
        *v = match convention {
            WeightConvention::Inverse => (sigma2 * *v + wi * y[(i, 0)]) / (sigma2 + wi),
            WeightConvention::Direct => (wi * *v + sigma2 * y[(i, 0)]) / (sigma2 + wi),
        };
    }
    m
}

/// Deterministic symmetric square-root transform: X <- X T with
/// T = (I_K + X^T X / ((K-1) sigma2))^{-1/2}.
pub fn analysis_transform<T: Scalar>(deviations: &Array2<T>, sigma2: T) -> Result<Array2<T>> {
    let (d, k) = deviations.dim();
    let scale = 1.0 / ((k as f64 - 1.0) * sigma2.to_f64().unwrap());
    let mut inner = nalgebra::DMatrix::<f64>::identity(k, k);
    for a in 0..k {
        for b in a..k {
            let mut dot = 0.0;
            for i in 0..d {
                dot += deviations[(i, a)].to_f64().unwrap() * deviations[(i, b)].to_f64().unwrap();
            }
            let v = dot * scale;
            inner[(a, b)] += v;
            if a != b {
                inner[(b, a)] += v;
            }
        }
    }
    let eig = inner.symmetric_eigen();
    let mut inv_sqrt = nalgebra::DMatrix::<f64>::zeros(k, k);
    for (idx, lambda) in eig.eigenvalues.iter().enumerate() {
        if *lambda <= 0.0 || !lambda.is_finite() {
            return Err(NssdaError::Numerical {
                context: "analysis transform",
                detail: format!(
                    "non-positive eigenvalue {lambda} of I + X^T X / ((K-1) sigma^2)"
                ),
            });
        }
        inv_sqrt[(idx, idx)] = 1.0 / lambda.sqrt();
    }
    let t = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    let mut out = Array2::zeros((d, k));
    for i in 0..d {
        for b in 0..k {
            let mut acc = 0.0;
            for a in 0..k {
                acc += deviations[(i, a)].to_f64().unwrap() * t[(a, b)];
            }
            out[(i, b)] = T::from_f64_c(acc);
        }
    }
    Ok(out)
}

/// Per-step diagnostics written to the summary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterStepSummary<T: Scalar> {
    pub j: usize,
    pub t: T,
    pub prior_err: Vec<T>,
    pub posterior_err: Vec<T>,
    pub w_min: T,
    pub w_max: T,
    pub diverged: usize,
}

pub fn summaries_to_csv<T: Scalar>(
    summaries: &[FilterStepSummary<T>],
    channels: &[&str],
) -> String {
    let mut header = String::from("j,t");
    for c in channels {
        header.push_str(&format!(",prior_err_{c}"));
    }
    for c in channels {
        header.push_str(&format!(",posterior_err_{c}"));
    }
    header.push_str(",w_min,w_max,diverged\n");
    let mut out = header;
    for s in summaries {
        out.push_str(&format!("{},{:.16e}", s.j, s.t.to_f64().unwrap()));
        for v in &s.prior_err {
            out.push_str(&format!(",{:.16e}", v.to_f64().unwrap()));
        }
        for v in &s.posterior_err {
            out.push_str(&format!(",{:.16e}", v.to_f64().unwrap()));
        }
        out.push_str(&format!(
            ",{:.16e},{:.16e},{}\n",
            s.w_min.to_f64().unwrap(),
            s.w_max.to_f64().unwrap(),
            s.diverged
        ));
    }
    out
}

/// Full assimilation output: the posterior-mean trajectory (index 0 is the
/// initial ensemble mean) and per-step summaries.
pub struct AssimilationResult<T: Scalar> {
    pub posterior_means: Vec<FieldState<T>>,
    pub summaries: Vec<FilterStepSummary<T>>,
    pub total_diverged: usize,
}

/// Algorithm: initialize the ensemble around y_0, then for each observation
/// y_{j+1} forecast with the surrogate and apply the mean/transform analysis.
/// `truth` (physical frame, same length as `observations`) is used only for
/// the error columns of the summaries.
#[allow(clippy::too_many_arguments)]
pub fn assimilate<T: Scalar, M: ForecastModel<T>>(
    observations: &[FieldState<T>],
    model: &M,
    spec: &SystemSpec<T>,
    config: &FilterConfig<T>,
    k: usize,
    init_std: T,
    dt: T,
    dx: T,
    truth: Option<&[FieldState<T>]>,
) -> Result<AssimilationResult<T>> {
    config.validate()?;
    if observations.len() < 2 {
        return Err(NssdaError::Config(
            "assimilation needs at least two observation snapshots".into(),
        ));
    }
    let (p, n) = observations[0].data.dim();
    let mut ensemble = init_ensemble(&observations[0], init_std, k, config.seed);
    let mut posterior_means = vec![ensemble.mean()];
    let mut summaries = Vec::with_capacity(observations.len() - 1);
    let mut total_diverged = 0;

    for (j, y_state) in observations.iter().enumerate().skip(1) {
        let outcome = forecast(&ensemble, model, spec, dt)?;
        total_diverged += outcome.diverged;
        if outcome.ensemble.members.iter().all(|m| !m.is_finite()) {
            return Err(NssdaError::EnsembleCollapse { step: j });
        }
        let (prior_mean, deviations) = prior_stats(&outcome.ensemble)?;
        let w = match config.kind {
            FilterKind::Etkf => weight_etkf(&deviations, config.alpha, config.w_floor),
            FilterKind::Setkf => {
                weight_setkf(&outcome.ensemble, config.beta, dx, config.w_floor)
            }
        };
        let m_hat = flatten_state(&prior_mean.data);
        let y = flatten_state(&y_state.data);
        let m = analysis_mean(&m_hat, &w, &y, config.sigma2, config.convention);
        let new_deviations = analysis_transform(&deviations, config.sigma2)?;
        let posterior_mean_data = unflatten_state(&m, p, n);
        let members = (0..k)
            .map(|kk| {
                let mut flat = m.clone();
                for i in 0..flat.nrows() {
                    flat[(i, 0)] += new_deviations[(i, kk)];
                }
                FieldState::new(Frame::Physical, unflatten_state(&flat, p, n), y_state.time)
            })
            .collect();
        ensemble = Ensemble { members };
        let posterior_mean = FieldState::new(Frame::Physical, posterior_mean_data, y_state.time);
        if !posterior_mean.is_finite() {
            return Err(NssdaError::EnsembleCollapse { step: j });
        }

        let (prior_err, posterior_err) = match truth {
            Some(tr) => (
                relative_l2(&prior_mean, &tr[j], dx)?,
                relative_l2(&posterior_mean, &tr[j], dx)?,
            ),
            None => (vec![T::zero(); p], vec![T::zero(); p]),
        };
        let w_min = w.iter().copied().fold(T::infinity(), |a, b| a.min(b));
        let w_max = w.iter().copied().fold(T::zero(), |a, b| a.max(b));
        summaries.push(FilterStepSummary {
            j,
            t: y_state.time,
            prior_err,
            posterior_err,
            w_min,
            w_max,
            diverged: outcome.diverged,
        });
        posterior_means.push(posterior_mean);
    }
    Ok(AssimilationResult {
        posterior_means,
        summaries,
        total_diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{Boundary, System};
    use ndarray::array;

    fn phys(data: Array2<f64>, t: f64) -> FieldState<f64> {
        FieldState::new(Frame::Physical, data, t)
    }

    fn burgers_spec() -> SystemSpec<f64> {
        SystemSpec {
            name: "burgers".into(),
            system: System::BurgersTest,
            boundary: Boundary::Periodic,
        }
    }

    #[test]
    fn init_zero_std_copies_mean() {
        let m0 = phys(array![[1.0, 2.0], [3.0, 4.0]], 0.0);
        let ens = init_ensemble(&m0, 0.0, 5, 7);
        assert_eq!(ens.k(), 5);
        for m in &ens.members {
            assert_eq!(m.data, m0.data);
        }
    }

    #[test]
    fn init_deterministic() {
        let m0 = phys(array![[1.0, 2.0]], 0.0);
        let a = init_ensemble(&m0, 0.1, 10, 42);
        let b = init_ensemble(&m0, 0.1, 10, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn init_sample_std_in_chi2_bounds() {
        // K = 100, std = 0.1: per-cell sample std within [0.07, 0.13] for at
        // least 95% of cells.
        let n = 200;
        let m0 = phys(Array2::zeros((2, n)), 0.0);
        let ens = init_ensemble(&m0, 0.1, 100, 3);
        let mut ok = 0;
        let mut total = 0;
        for c in 0..2 {
            for i in 0..n {
                let vals: Vec<f64> = ens.members.iter().map(|m| m.data[(c, i)]).collect();
                let mean = vals.iter().sum::<f64>() / 100.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 99.0;
                let std = var.sqrt();
                if (0.07..=0.13).contains(&std) {
                    ok += 1;
                }
                total += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * total as f64, "{ok}/{total}");
    }

    #[test]
    fn forecast_identity_model_preserves_members() {
        let spec = burgers_spec();
        let identity = |u: &FieldState<f64>| -> Result<FieldState<f64>> {
            Ok(FieldState::new(u.frame, u.data.clone(), u.time + 0.1))
        };
        let m0 = phys(array![[1.0, -0.5, 2.0]], 0.0);
        let ens = init_ensemble(&m0, 0.2, 4, 5);
        let out = forecast(&ens, &identity, &spec, 0.1).unwrap();
        assert_eq!(out.diverged, 0);
        for (a, b) in out.ensemble.members.iter().zip(ens.members.iter()) {
            assert_eq!(a.data, b.data);
            assert!((a.time - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn forecast_freezes_diverged_members() {
        let spec = burgers_spec();
        let explode = |_: &FieldState<f64>| -> Result<FieldState<f64>> {
            Err(NssdaError::SolverDivergence { step: 0 })
        };
        let m0 = phys(array![[1.0, 2.0]], 0.0);
        let ens = init_ensemble(&m0, 0.1, 3, 5);
        let out = forecast(&ens, &explode, &spec, 0.1).unwrap();
        assert_eq!(out.diverged, 3);
        for (a, b) in out.ensemble.members.iter().zip(ens.members.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn prior_stats_identical_members_zero_deviation() {
        let m0 = phys(array![[1.0, 2.0]], 0.0);
        let ens = init_ensemble(&m0, 0.0, 4, 1);
        let (mean, dev) = prior_stats(&ens).unwrap();
        assert_eq!(mean.data, m0.data);
        assert!(dev.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prior_stats_needs_two_members() {
        let ens = Ensemble {
            members: vec![phys(array![[1.0]], 0.0)],
        };
        assert!(prior_stats(&ens).is_err());
    }

    #[test]
    fn prior_stats_matches_brute_force_covariance() {
        // K = 3, d = 4: compare C = X X^T / (K-1) against the definition.
        let members = vec![
            phys(array![[1.0, 2.0], [0.5, -1.0]], 0.0),
            phys(array![[1.5, 1.0], [0.0, -0.5]], 0.0),
            phys(array![[0.5, 3.0], [1.0, -1.5]], 0.0),
        ];
        let ens = Ensemble { members: members.clone() };
        let (mean, dev) = prior_stats(&ens).unwrap();
        let flat: Vec<Array2<f64>> = members.iter().map(|m| flatten_state(&m.data)).collect();
        let mean_flat = flatten_state(&mean.data);
        for a in 0..4 {
            for b in 0..4 {
                let mut expect = 0.0;
                for f in &flat {
                    expect += (f[(a, 0)] - mean_flat[(a, 0)]) * (f[(b, 0)] - mean_flat[(b, 0)]);
                }
                expect /= 2.0;
                let got: f64 = (0..3).map(|k| dev[(a, k)] * dev[(b, k)]).sum::<f64>() / 2.0;
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn etkf_weights_floor_and_scale() {
        let dev = Array2::<f64>::zeros((3, 4));
        let w = weight_etkf(&dev, 1.0, 1e-8);
        assert!(w.iter().all(|v| *v == 1e-8));

        let dev = array![[1.0f64, -1.0], [0.5, -0.5]];
        let w1 = weight_etkf(&dev, 1.0, 1e-8);
        let w2 = weight_etkf(&dev, 2.0, 1e-8);
        for (a, b) in w1.iter().zip(w2.iter()) {
            assert!((b / a - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn etkf_weights_match_brute_force() {
        let members = vec![
            phys(array![[1.0, 2.0]], 0.0),
            phys(array![[2.0, 1.0]], 0.0),
            phys(array![[3.0, 3.0]], 0.0),
        ];
        let ens = Ensemble { members: members.clone() };
        let (_, dev) = prior_stats(&ens).unwrap();
        let w = weight_etkf(&dev, 1.5, 1e-12);
        for i in 0..2 {
            let vals: Vec<f64> = members.iter().map(|m| m.data[(0, i)]).collect();
            let mean = vals.iter().sum::<f64>() / 3.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0;
            assert!((w[i] - 2.25 * var).abs() < 1e-12);
        }
    }

    #[test]
    fn setkf_single_member_linear_profile() {
        // v = [0, 1, 2], dx = 1: interface second moments all 1, interior
        // diagonal beta * 1, boundary one-sided also 1.
        let ens = Ensemble {
            members: vec![phys(array![[0.0, 1.0, 2.0]], 0.0)],
        };
        let w = weight_setkf(&ens, 2.0, 1.0, 1e-8);
        assert_eq!(w, vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn setkf_constant_members_hit_floor() {
        let ens = Ensemble {
            members: vec![
                phys(Array2::from_elem((1, 5), 3.0), 0.0),
                phys(Array2::from_elem((1, 5), 3.0), 0.0),
            ],
        };
        let w = weight_setkf(&ens, 1.0, 0.5, 1e-8);
        assert!(w.iter().all(|v| *v == 1e-8));
    }

    #[test]
    fn setkf_matches_brute_force() {
        let members = vec![
            phys(array![[0.3, 1.2, -0.4, 0.9], [2.0, 1.5, 1.0, 2.5]], 0.0),
            phys(array![[0.1, 0.8, 0.2, 1.1], [1.8, 2.0, 0.7, 2.1]], 0.0),
        ];
        let dx = 0.25;
        let ens = Ensemble { members: members.clone() };
        let w = weight_setkf(&ens, 1.3, dx, 1e-12);
        for c in 0..2 {
            let s = |i: usize| -> f64 {
                members
                    .iter()
                    .map(|m| ((m.data[(c, i + 1)] - m.data[(c, i)]) / dx).powi(2))
                    .sum::<f64>()
                    / 2.0
            };
            let expect = [s(0), 0.5 * (s(0) + s(1)), 0.5 * (s(1) + s(2)), s(2)];
            for i in 0..4 {
                assert!((w[c * 4 + i] - 1.3 * expect[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn setkf_translation_invariant() {
        let base = vec![
            phys(array![[0.3, 1.2, -0.4]], 0.0),
            phys(array![[0.1, 0.8, 0.2]], 0.0),
        ];
        let shifted = base
            .iter()
            .map(|m| phys(m.data.mapv(|v| v + 5.0), 0.0))
            .collect();
        let w1 = weight_setkf(&Ensemble { members: base }, 1.0, 0.5, 1e-8);
        let w2 = weight_setkf(&Ensemble { members: shifted }, 1.0, 0.5, 1e-8);
        for (a, b) in w1.iter().zip(w2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn analysis_mean_limits_and_convexity() {
        let m_hat = array![[0.0f64], [1.0], [5.0]];
        let y = array![[2.0], [1.0], [-5.0]];
        // tiny W -> trust model
        let m = analysis_mean(&m_hat, &[1e-12, 1e-12, 1e-12], &y, 1.0, WeightConvention::Inverse);
        for i in 0..3 {
            assert!((m[(i, 0)] - m_hat[(i, 0)]).abs() < 1e-9);
        }
        // sigma2 = W = 1: midpoint
        let m = analysis_mean(&m_hat, &[1.0, 1.0, 1.0], &y, 1.0, WeightConvention::Inverse);
        assert!((m[(0, 0)] - 1.0).abs() < 1e-14);
        // convexity for random weights
        let m = analysis_mean(&m_hat, &[0.3, 7.0, 0.01], &y, 0.5, WeightConvention::Inverse);
        for i in 0..3 {
            let lo = m_hat[(i, 0)].min(y[(i, 0)]);
            let hi = m_hat[(i, 0)].max(y[(i, 0)]);
            assert!(m[(i, 0)] >= lo - 1e-14 && m[(i, 0)] <= hi + 1e-14);
        }
    }

    #[test]
    fn analysis_mean_conventions_are_mirrored() {
        let m_hat = array![[0.0f64]];
        let y = array![[1.0]];
        let inv = analysis_mean(&m_hat, &[3.0], &y, 1.0, WeightConvention::Inverse);
        let dir = analysis_mean(&m_hat, &[3.0], &y, 1.0, WeightConvention::Direct);
        assert!((inv[(0, 0)] - 0.75).abs() < 1e-14);
        assert!((dir[(0, 0)] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn analysis_mean_conjugate_gaussian_oracle() {
        // Prior N(mu0, tau2), likelihood N(y, sigma2): posterior mean
        // (sigma2 mu0 + tau2 y)/(sigma2 + tau2). W plays tau2.
        let (mu0, tau2, y, sigma2) = (0.7f64, 0.09, 1.9, 0.25);
        let m = analysis_mean(
            &array![[mu0]],
            &[tau2],
            &array![[y]],
            sigma2,
            WeightConvention::Inverse,
        );
        let expect = (sigma2 * mu0 + tau2 * y) / (sigma2 + tau2);
        assert!((m[(0, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn transform_zero_deviations_noop() {
        let dev = Array2::<f64>::zeros((4, 3));
        let out = analysis_transform(&dev, 0.5).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn transform_large_sigma_is_identity() {
        let dev = array![[1.0f64, -1.0, 0.0], [0.5, 0.0, -0.5]];
        let out = analysis_transform(&dev, 1e12).unwrap();
        for (a, b) in out.iter().zip(dev.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn transform_matches_dense_kalman_update() {
        // K = 3, d = 2: posterior sample covariance must equal
        // (I - K_g) C_hat with K_g = C_hat (C_hat + sigma2 I)^-1, to 1e-10.
        let dev = array![[0.6f64, -0.2, -0.4], [0.1, 0.3, -0.4]];
        let sigma2 = 0.3;
        let out = analysis_transform(&dev, sigma2).unwrap();
        let c_hat = |x: &Array2<f64>| -> nalgebra::DMatrix<f64> {
            let mut c = nalgebra::DMatrix::zeros(2, 2);
            for a in 0..2 {
                for b in 0..2 {
                    c[(a, b)] = (0..3).map(|k| x[(a, k)] * x[(b, k)]).sum::<f64>() / 2.0;
                }
            }
            c
        };
        let prior = c_hat(&dev);
        let s = &prior + nalgebra::DMatrix::identity(2, 2) * sigma2;
        let gain = &prior * s.try_inverse().unwrap();
        let expect = (nalgebra::DMatrix::identity(2, 2) - gain) * &prior;
        let posterior = c_hat(&out);
        for a in 0..2 {
            for b in 0..2 {
                assert!(
                    (posterior[(a, b)] - expect[(a, b)]).abs() < 1e-10,
                    "({a},{b}): {} vs {}",
                    posterior[(a, b)],
                    expect[(a, b)]
                );
            }
        }
    }

    #[test]
    fn transform_shrinks_deviations() {
        // Spectral norm of T is <= 1: column norms cannot grow.
        let dev = array![[0.6f64, -0.2, -0.4], [0.1, 0.3, -0.4]];
        let out = analysis_transform(&dev, 0.1).unwrap();
        let frob = |x: &Array2<f64>| x.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(frob(&out) <= frob(&dev) + 1e-12);
    }

    #[test]
    fn permuting_members_permutes_but_preserves_statistics() {
        let dev = array![[0.6f64, -0.2, -0.4], [0.1, 0.3, -0.4]];
        let perm = array![[-0.4, 0.6, -0.2], [-0.4, 0.1, 0.3]];
        let sigma2 = 0.2;
        let out = analysis_transform(&dev, sigma2).unwrap();
        let out_p = analysis_transform(&perm, sigma2).unwrap();
        // permuted input yields permuted output with identical covariance
        let cov = |x: &Array2<f64>, a: usize, b: usize| -> f64 {
            (0..3).map(|k| x[(a, k)] * x[(b, k)]).sum::<f64>() / 2.0
        };
        for a in 0..2 {
            for b in 0..2 {
                assert!((cov(&out, a, b) - cov(&out_p, a, b)).abs() < 1e-12);
            }
        }
        // columns match under the same permutation (2 -> 0, 0 -> 1, 1 -> 2)
        for i in 0..2 {
            assert!((out_p[(i, 0)] - out[(i, 2)]).abs() < 1e-12);
            assert!((out_p[(i, 1)] - out[(i, 0)]).abs() < 1e-12);
            assert!((out_p[(i, 2)] - out[(i, 1)]).abs() < 1e-12);
        }
    }

    #[test]
    fn assimilate_constant_truth_identity_model() {
        // Zero observation noise on a constant state with the identity
        // surrogate: posterior means equal truth at every step.
        let spec = burgers_spec();
        let identity = |u: &FieldState<f64>| -> Result<FieldState<f64>> {
            Ok(FieldState::new(u.frame, u.data.clone(), u.time + 0.1))
        };
        let obs: Vec<FieldState<f64>> = (0..5)
            .map(|j| phys(Array2::from_elem((1, 4), 2.0), 0.1 * j as f64))
            .collect();
        let config = FilterConfig::new(FilterKind::Etkf, 1e-6, 11);
        let result = assimilate(
            &obs, &identity, &spec, &config, 20, 0.1, 0.1, 1.0, Some(&obs),
        )
        .unwrap();
        assert_eq!(result.posterior_means.len(), 5);
        for mean in &result.posterior_means[1..] {
            for v in mean.data.iter() {
                assert!((v - 2.0).abs() < 0.05, "{v}");
            }
        }
        // errors decrease towards the truth as observations accumulate
        let last = result.summaries.last().unwrap();
        assert!(last.posterior_err[0] < 0.05);
    }

    #[test]
    fn assimilate_tracks_exact_kalman_filter() {
        // Scalar linear system v_{j+1} = 0.9 v_j with exact surrogate:
        // ETKF posterior mean matches the exact Kalman recursion within
        // 3/sqrt(K) over 50 steps. Truth generated per seed; alpha = 1 so the
        // sample covariance plays the exact prior variance role.
        let spec = burgers_spec();
        let a = 0.9f64;
        let model = move |u: &FieldState<f64>| -> Result<FieldState<f64>> {
            Ok(FieldState::new(
                u.frame,
                u.data.mapv(|v| a * v),
                u.time + 1.0,
            ))
        };
        let k = 100;
        let sigma2 = 0.04f64;
        let steps = 50;
        let mut worst: f64 = 0.0;
        for seed in 0..3u64 {
            let mut rng = RandomStream::new(900 + seed, StreamPurpose::ObservationNoise);
            let mut v_true = 1.0f64;
            let mut obs = vec![phys(array![[v_true + rng.normal(0.0, sigma2.sqrt())]], 0.0)];
            for j in 1..=steps {
                v_true *= a;
                obs.push(phys(
                    array![[v_true + rng.normal(0.0, sigma2.sqrt())]],
                    j as f64,
                ));
            }
            let mut config = FilterConfig::new(FilterKind::Etkf, sigma2, 31 + seed);
            config.alpha = 1.0;
            let init_std = 0.1;
            let result = assimilate(
                &obs, &model, &spec, &config, k, init_std, 1.0, 1.0, None,
            )
            .unwrap();
            // exact Kalman recursion from the same initialization
            let mut m = obs[0].data[(0, 0)];
            let mut p = init_std * init_std;
            for j in 1..=steps {
                m *= a;
                p *= a * a;
                let gain = p / (p + sigma2);
                m += gain * (obs[j].data[(0, 0)] - m);
                p *= 1.0 - gain;
                let got = result.posterior_means[j].data[(0, 0)];
                worst = worst.max((got - m).abs());
            }
        }
        let tol = 3.0 / (k as f64).sqrt();
        assert!(worst < tol, "worst deviation {worst} vs tol {tol}");
    }

    #[test]
    fn summary_csv_shape() {
        let summaries = vec![FilterStepSummary {
            j: 1,
            t: 0.005,
            prior_err: vec![0.1, 0.2],
            posterior_err: vec![0.05, 0.1],
            w_min: 1e-8,
            w_max: 0.3,
            diverged: 0,
        }];
        let csv = summaries_to_csv(&summaries, &["h", "u"]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "j,t,prior_err_h,prior_err_u,posterior_err_h,posterior_err_u,w_min,w_max,diverged"
        );
        assert_eq!(lines.next().unwrap().split(',').count(), 9);
    }
}
