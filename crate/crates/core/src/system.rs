//! System descriptions and the physical <-> conserved transforms.

use ndarray::Array2;

use crate::error::{NssdaError, Result};
use crate::scalar::Scalar;
use crate::state::{FieldState, Frame};

/// Floor applied to densities/heights and internal energy before divisions
/// when inverting noisy states.
pub const DENSITY_FLOOR: f64 = 1e-6;

/// Which conservation-law system is being modeled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum System<T: Scalar> {
    /// Shallow water: components (h, hu), gravity g.
    Swe { g: T },
    /// 1D Euler: components (rho, rho*u, E), adiabatic constant gamma.
    Euler { gamma: T },
    /// Scalar Burgers (f = u^2/2). Test-only; physical == conserved.
    BurgersTest,
}

/// Boundary treatment for the finite-volume solver (conserved frame).
#[derive(Debug, Clone, PartialEq)]
pub enum Boundary<T: Scalar> {
    /// Fixed left/right conserved states held in the ghost cells.
    Dirichlet { left: Vec<T>, right: Vec<T> },
    /// Wrap-around. Test-only (conservation/TVD oracles).
    Periodic,
}

/// Everything the rest of the pipeline needs to know about a system:
/// component count, transforms, boundary states.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec<T: Scalar> {
    pub name: String,
    pub system: System<T>,
    pub boundary: Boundary<T>,
}

impl<T: Scalar> SystemSpec<T> {
    pub fn p(&self) -> usize {
        match self.system {
            System::Swe { .. } => 2,
            System::Euler { .. } => 3,
            System::BurgersTest => 1,
        }
    }

    pub fn physical_channel_names(&self) -> Vec<&'static str> {
        match self.system {
            System::Swe { .. } => vec!["h", "u"],
            System::Euler { .. } => vec!["rho", "u", "p"],
            System::BurgersTest => vec!["u"],
        }
    }

    pub fn conserved_channel_names(&self) -> Vec<&'static str> {
        match self.system {
            System::Swe { .. } => vec!["h", "hu"],
            System::Euler { .. } => vec!["rho", "rho_u", "E"],
            System::BurgersTest => vec!["u"],
        }
    }

    /// Map one physical column to conserved variables.
    pub fn phi_cell(&self, v: &[T]) -> Result<Vec<T>> {
        match self.system {
            System::Swe { .. } => {
                let (h, u) = (v[0], v[1]);
                if h <= T::zero() {
                    return Err(NssdaError::Positivity {
                        context: "phi (swe)",
                        detail: format!("h = {h}"),
                    });
                }
                Ok(vec![h, h * u])
            }
            System::Euler { gamma } => {
                let (rho, u, p) = (v[0], v[1], v[2]);
                if rho <= T::zero() || p <= T::zero() {
                    return Err(NssdaError::Positivity {
                        context: "phi (euler)",
                        detail: format!("rho = {rho}, p = {p}"),
                    });
                }
                let e = p / (gamma - T::one()) + T::from_f64_c(0.5) * rho * u * u;
                Ok(vec![rho, rho * u, e])
            }
            System::BurgersTest => Ok(v.to_vec()),
        }
    }

    /// Map one conserved column to physical variables, flooring densities and
    /// internal energy at [`DENSITY_FLOOR`]. Returns the number of floor
    /// events for this cell.
    pub fn phi_inverse_cell(&self, u: &[T]) -> (Vec<T>, usize) {
        let floor = T::from_f64_c(DENSITY_FLOOR);
        match self.system {
            System::Swe { .. } => {
                let (h, nu) = (u[0], u[1]);
                let mut floored = 0;
                let h = if h < floor {
                    floored += 1;
                    floor
                } else {
                    h
                };
                (vec![h, nu / h], floored)
            }
            System::Euler { gamma } => {
                let (rho, nu, e) = (u[0], u[1], u[2]);
                let mut floored = 0;
                let rho = if rho < floor {
                    floored += 1;
                    floor
                } else {
                    rho
                };
                let vel = nu / rho;
                let mut internal = e - T::from_f64_c(0.5) * nu * nu / rho;
                if internal < floor {
                    floored += 1;
                    internal = floor;
                }
                let p = (gamma - T::one()) * internal;
                (vec![rho, vel, p], floored)
            }
            System::BurgersTest => (u.to_vec(), 0),
        }
    }

    /// Map one physical column to conserved variables, flooring nonpositive
    /// heights/densities/pressures at [`DENSITY_FLOOR`] instead of erroring.
    /// Returns the floor-event count. Used on noisy observations, whose noise
    /// can push positive quantities below zero.
    pub fn phi_cell_floored(&self, v: &[T]) -> (Vec<T>, usize) {
        let floor = T::from_f64_c(DENSITY_FLOOR);
        let mut col = v.to_vec();
        let mut floored = 0;
        let positive: &[usize] = match self.system {
            System::Swe { .. } => &[0],
            System::Euler { .. } => &[0, 2],
            System::BurgersTest => &[],
        };
        for &c in positive {
            if col[c] < floor {
                col[c] = floor;
                floored += 1;
            }
        }
        (self.phi_cell(&col).expect("floored column is positive"), floored)
    }

    /// Transform a whole physical-frame state to the conserved frame,
    /// flooring per [`Self::phi_cell_floored`]. Returns the floor-event count.
    pub fn phi_floored(&self, state: &FieldState<T>) -> Result<(FieldState<T>, usize)> {
        state.expect_frame(Frame::Physical, "phi_floored")?;
        let mut out = Array2::zeros(state.data.raw_dim());
        let mut floored = 0;
        for i in 0..state.n() {
            let col: Vec<T> = state.data.column(i).to_vec();
            let (mapped, f) = self.phi_cell_floored(&col);
            floored += f;
            for (c, v) in mapped.into_iter().enumerate() {
                out[(c, i)] = v;
            }
        }
        Ok((FieldState::new(Frame::Conserved, out, state.time), floored))
    }

    /// Transform a whole physical-frame state to the conserved frame.
    pub fn phi(&self, state: &FieldState<T>) -> Result<FieldState<T>> {
        state.expect_frame(Frame::Physical, "phi")?;
        let mut out = Array2::zeros(state.data.raw_dim());
        for i in 0..state.n() {
            let col: Vec<T> = state.data.column(i).to_vec();
            let mapped = self.phi_cell(&col)?;
            for (c, v) in mapped.into_iter().enumerate() {
                out[(c, i)] = v;
            }
        }
        Ok(FieldState::new(Frame::Conserved, out, state.time))
    }

    /// Transform a conserved-frame state to the physical frame.
    /// Returns the state and the total count of floor events.
    pub fn phi_inverse(&self, state: &FieldState<T>) -> Result<(FieldState<T>, usize)> {
        state.expect_frame(Frame::Conserved, "phi_inverse")?;
        let mut out = Array2::zeros(state.data.raw_dim());
        let mut floored = 0;
        for i in 0..state.n() {
            let col: Vec<T> = state.data.column(i).to_vec();
            let (mapped, f) = self.phi_inverse_cell(&col);
            floored += f;
            for (c, v) in mapped.into_iter().enumerate() {
                out[(c, i)] = v;
            }
        }
        Ok((FieldState::new(Frame::Physical, out, state.time), floored))
    }

    /// Conserved-frame Dirichlet boundary values, if the boundary is Dirichlet.
    pub fn dirichlet_conserved(&self) -> Option<(&[T], &[T])> {
        match &self.boundary {
            Boundary::Dirichlet { left, right } => Some((left, right)),
            Boundary::Periodic => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RandomStream, StreamPurpose};
    use ndarray::array;

    fn swe() -> SystemSpec<f64> {
        SystemSpec {
            name: "swe".into(),
            system: System::Swe { g: 1.0 },
            boundary: Boundary::Periodic,
        }
    }

    fn euler() -> SystemSpec<f64> {
        SystemSpec {
            name: "euler".into(),
            system: System::Euler { gamma: 1.4 },
            boundary: Boundary::Periodic,
        }
    }

    #[test]
    fn swe_phi_direct() {
        assert_eq!(swe().phi_cell(&[2.0, 3.0]).unwrap(), vec![2.0, 6.0]);
    }

    #[test]
    fn euler_phi_direct() {
        let u = euler().phi_cell(&[1.0, 2.0, 1.0]).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-15);
        assert!((u[1] - 2.0).abs() < 1e-15);
        assert!((u[2] - 4.5).abs() < 1e-12);
        let rest = euler().phi_cell(&[1.0, 0.0, 1.0]).unwrap();
        assert!((rest[2] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn phi_rejects_nonpositive() {
        assert!(swe().phi_cell(&[-1.0, 0.0]).is_err());
        assert!(euler().phi_cell(&[1.0, 0.0, -2.0]).is_err());
    }

    #[test]
    fn swe_inverse_direct() {
        let (v, f) = swe().phi_inverse_cell(&[2.0, 6.0]);
        assert_eq!(v, vec![2.0, 3.0]);
        assert_eq!(f, 0);
    }

    #[test]
    fn euler_inverse_round_trip() {
        let (v, f) = euler().phi_inverse_cell(&[1.0, 2.0, 4.5]);
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!((v[1] - 2.0).abs() < 1e-15);
        assert!((v[2] - 1.0).abs() < 1e-12);
        assert_eq!(f, 0);
    }

    #[test]
    fn flooring_policy() {
        let (v, f) = swe().phi_inverse_cell(&[1e-9, 0.0]);
        assert_eq!(v[0], DENSITY_FLOOR);
        assert_eq!(v[1], 0.0);
        assert_eq!(f, 1);
    }

    #[test]
    fn round_trip_random_states() {
        let mut rng = RandomStream::new(42, StreamPurpose::ParamInit);
        let specs = [swe(), euler()];
        for _ in 0..10_000 {
            for spec in &specs {
                let v: Vec<f64> = match spec.system {
                    System::Swe { .. } => {
                        vec![rng.uniform(0.1, 5.0), rng.uniform(-3.0, 3.0)]
                    }
                    System::Euler { .. } => vec![
                        rng.uniform(0.1, 5.0),
                        rng.uniform(-3.0, 3.0),
                        rng.uniform(0.1, 12.0),
                    ],
                    System::BurgersTest => unreachable!(),
                };
                let u = spec.phi_cell(&v).unwrap();
                let (back, floored) = spec.phi_inverse_cell(&u);
                assert_eq!(floored, 0);
                for (a, b) in v.iter().zip(back.iter()) {
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn whole_state_transforms() {
        let spec = swe();
        let state = FieldState::new(Frame::Physical, array![[2.0, 1.0], [3.0, -1.0]], 0.0);
        let cons = spec.phi(&state).unwrap();
        assert_eq!(cons.frame, Frame::Conserved);
        assert_eq!(cons.data, array![[2.0, 1.0], [6.0, -1.0]]);
        let (back, f) = spec.phi_inverse(&cons).unwrap();
        assert_eq!(f, 0);
        assert_eq!(back.data, state.data);
    }
}
