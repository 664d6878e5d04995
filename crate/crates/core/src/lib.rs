//! Non-intrusive structure-preserving sequential data assimilation for 1D
//! hyperbolic conservation laws.
//!
//! The pipeline: generate noisy observations of a simulated trajectory
//! ([`physics`]), train a conservative flux-form neural surrogate on a prefix
//! of it ([`surrogate`], [`training`], differentiated by [`autodiff`] through
//! the finite-volume scheme in [`solver`]), then run ensemble transform
//! Kalman filtering with the surrogate as forecast model ([`assimilation`]).
//! [`pipeline`] wires these into file-based experiment runs.

// Link the system BLAS used by ndarray's matmul.
use blas_src as _;

pub mod assimilation;
pub mod autodiff;
pub mod error;
pub mod grid;
pub mod metric;
pub mod ops;
pub mod physics;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod snapshot;
pub mod solver;
pub mod state;
pub mod surrogate;
pub mod system;
pub mod training;

pub use error::{NssdaError, Result};
pub use scalar::{Real, Scalar};
