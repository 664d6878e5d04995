//! Trajectory snapshot files.
//!
//! One file per trajectory. Header line: `system,n,p,dx,dt,frame`. Then one
//! row per time step with p*n comma-separated values, channel-major (all of
//! channel 0, then channel 1, ...). Values are written with the shortest
//! representation that round-trips exactly, so read(write(t)) is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{NssdaError, Result};
use crate::scalar::Scalar;
use crate::state::{FieldState, Frame};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Scalar> {
    pub system: String,
    pub dx: T,
    pub dt: T,
    pub frame: Frame,
    pub states: Vec<FieldState<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(system: &str, dx: T, dt: T, frame: Frame, states: Vec<FieldState<T>>) -> Self {
        Trajectory {
            system: system.to_string(),
            dx,
            dt,
            frame,
            states,
        }
    }

    pub fn n(&self) -> usize {
        self.states[0].n()
    }

    pub fn p(&self) -> usize {
        self.states[0].p()
    }

    pub fn to_string_repr(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            self.system,
            self.n(),
            self.p(),
            self.dx,
            self.dt,
            self.frame.as_str()
        );
        for state in &self.states {
            let mut first = true;
            for c in 0..state.p() {
                for v in state.channel(c).iter() {
                    if !first {
                        out.push(',');
                    }
                    let _ = write!(out, "{v}");
                    first = false;
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string_repr())
            .map_err(|e| NssdaError::io(format!("writing {}", path.display()), e))
    }

    pub fn from_string_repr(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(NssdaError::Parse {
            offset: 0,
            detail: "empty snapshot file".into(),
        })?;
        let fields: Vec<&str> = header.split(',').collect();
        if fields.len() != 6 {
            return Err(NssdaError::Parse {
                offset: 0,
                detail: format!("header has {} fields, expected 6", fields.len()),
            });
        }
        let system = fields[0].to_string();
        let n: usize = fields[1].parse().map_err(|_| NssdaError::Parse {
            offset: 0,
            detail: format!("bad n '{}'", fields[1]),
        })?;
        let p: usize = fields[2].parse().map_err(|_| NssdaError::Parse {
            offset: 0,
            detail: format!("bad p '{}'", fields[2]),
        })?;
        let parse_t = |s: &str, offset: usize| -> Result<T> {
            s.parse::<T>().map_err(|_| NssdaError::Parse {
                offset,
                detail: format!("bad value '{s}'"),
            })
        };
        let dx = parse_t(fields[3], 0)?;
        let dt = parse_t(fields[4], 0)?;
        let frame = Frame::parse(fields[5])?;

        let mut states = Vec::new();
        let mut offset = header.len() + 1;
        for (j, line) in lines.enumerate() {
            let values: Vec<T> = line
                .split(',')
                .map(|s| parse_t(s, offset))
                .collect::<Result<_>>()?;
            if values.len() != p * n {
                return Err(NssdaError::Parse {
                    offset,
                    detail: format!("row {} has {} values, expected {}", j, values.len(), p * n),
                });
            }
            let data = Array2::from_shape_vec((p, n), values).expect("checked length");
            let time = dt * T::from_usize(j).unwrap();
            states.push(FieldState::new(frame, data, time));
            offset += line.len() + 1;
        }
        if states.is_empty() {
            return Err(NssdaError::Parse {
                offset,
                detail: "snapshot file has no state rows".into(),
            });
        }
        Ok(Trajectory {
            system,
            dx,
            dt,
            frame,
            states,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| NssdaError::io(format!("reading {}", path.display()), e))?;
        Self::from_string_repr(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RandomStream, StreamPurpose};
    use proptest::prelude::*;

    fn random_trajectory(seed: u64, steps: usize, p: usize, n: usize) -> Trajectory<f64> {
        let mut rng = RandomStream::new(seed, StreamPurpose::ObservationNoise);
        let states = (0..steps)
            .map(|j| {
                let data = Array2::from_shape_fn((p, n), |_| rng.normal(0.0, 3.0));
                FieldState::new(Frame::Physical, data, 0.005 * j as f64)
            })
            .collect();
        Trajectory::new("swe", 10.0 / n as f64, 0.005, Frame::Physical, states)
    }

    #[test]
    fn bit_exact_round_trip() {
        let t = random_trajectory(1, 5, 2, 16);
        let text = t.to_string_repr();
        let back = Trajectory::<f64>::from_string_repr(&text).unwrap();
        assert_eq!(t, back);
        assert_eq!(text, back.to_string_repr());
    }

    #[test]
    fn rejects_ragged_rows() {
        let t = random_trajectory(2, 2, 1, 4);
        let mut text = t.to_string_repr();
        text.push_str("1.0,2.0\n");
        assert!(Trajectory::<f64>::from_string_repr(&text).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_extreme_values(v in proptest::num::f64::NORMAL) {
            let data = Array2::from_shape_vec((1, 1), vec![v]).unwrap();
            let t = Trajectory::new(
                "burgers-test", 1.0, 1.0, Frame::Conserved,
                vec![FieldState::new(Frame::Conserved, data, 0.0)],
            );
            let back = Trajectory::<f64>::from_string_repr(&t.to_string_repr()).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}
