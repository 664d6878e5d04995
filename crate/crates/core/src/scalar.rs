//! Scalar abstraction for the numerical kernels.
//!
//! All grid, solver, network, and filter math is generic over [`Scalar`] so the
//! same kernels instantiate at `f32` or `f64`. Experiments run at `f64`
//! ([`Real`]): shock-adjacent cancellation plus long rollouts make 32-bit
//! gradient checks fail.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign};

pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + FromStr
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("constant not representable in scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// The scalar type used by every experiment in this crate.
pub type Real = f64;
