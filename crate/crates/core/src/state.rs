use ndarray::Array2;

use crate::error::{NssdaError, Result};
use crate::scalar::Scalar;

/// Which variable set a [`FieldState`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Directly measurable quantities (h, u; rho, u, p).
    Physical,
    /// Quantities evolved by the conservation law (h, hu; rho, rho*u, E).
    Conserved,
}

impl Frame {
    pub fn as_str(self) -> &'static str {
        match self {
            Frame::Physical => "physical",
            Frame::Conserved => "conserved",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "physical" => Ok(Frame::Physical),
            "conserved" => Ok(Frame::Conserved),
            other => Err(NssdaError::Config(format!("unknown frame '{other}'"))),
        }
    }
}

/// Per-cell state of p components at one time instant.
///
/// Stored as a p x n matrix: one row per component, one column per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState<T: Scalar> {
    pub frame: Frame,
    /// p x n component values (cell averages).
    pub data: Array2<T>,
    pub time: T,
}

impl<T: Scalar> FieldState<T> {
    pub fn new(frame: Frame, data: Array2<T>, time: T) -> Self {
        FieldState { frame, data, time }
    }

    pub fn p(&self) -> usize {
        self.data.nrows()
    }

    pub fn n(&self) -> usize {
        self.data.ncols()
    }

    pub fn channel(&self, c: usize) -> ndarray::ArrayView1<'_, T> {
        self.data.row(c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_frame(&self, frame: Frame, op: &'static str) -> Result<()> {
        if self.frame != frame {
            return Err(NssdaError::ShapeMismatch {
                op,
                expected: frame.as_str().to_string(),
                got: self.frame.as_str().to_string(),
            });
        }
        Ok(())
    }
}
