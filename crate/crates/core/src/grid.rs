use crate::error::{NssdaError, Result};
use crate::scalar::Scalar;

/// Uniform cell-centered 1D grid on [a, b] with n cells.
///
/// Cell centers sit at `a + (i + 1/2) dx`; cell averages are identified with
/// center values (second-order consistent).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1D<T: Scalar> {
    pub a: T,
    pub b: T,
    pub n: usize,
    pub dx: T,
}

impl<T: Scalar> Grid1D<T> {
    pub fn new(a: T, b: T, n: usize) -> Result<Self> {
        if n == 0 || b <= a {
            return Err(NssdaError::Config(format!(
                "invalid grid: a={a}, b={b}, n={n}"
            )));
        }
        let dx = (b - a) / T::from_usize(n).unwrap();
        Ok(Grid1D { a, b, n, dx })
    }

    pub fn center(&self, i: usize) -> T {
        self.a + (T::from_usize(i).unwrap() + T::from_f64_c(0.5)) * self.dx
    }

    pub fn centers(&self) -> Vec<T> {
        (0..self.n).map(|i| self.center(i)).collect()
    }

    /// Grid with `factor` times as many cells over the same domain.
    pub fn refined(&self, factor: usize) -> Self {
        Grid1D {
            a: self.a,
            b: self.b,
            n: self.n * factor,
            dx: self.dx / T::from_usize(factor).unwrap(),
        }
    }
}
