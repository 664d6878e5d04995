//! One set of array operations, two evaluation backends.
//!
//! The finite-volume kernel in [`crate::solver`] is written once against
//! [`CellOps`]. [`PlainOps`] evaluates directly on `ndarray` buffers (truth
//! generation, ensemble forecasts); [`TapeOps`] records every operation on a
//! [`Tape`](crate::autodiff::Tape) so the same rollout can be differentiated
//! for training. A consistency test pins the two backends to identical
//! forward values.

use ndarray::{Array2, Axis};

use crate::autodiff::{DVar, Tape};
use crate::error::Result;
use crate::scalar::Scalar;

pub trait CellOps<T: Scalar> {
    type Arr: Clone;

    fn constant(&mut self, value: Array2<T>) -> Self::Arr;
    fn fill_like(&mut self, like: &Self::Arr, v: T) -> Self::Arr;
    fn shape(&self, a: &Self::Arr) -> (usize, usize);
    /// Forward value (a copy); used for diagnostics, never differentiated.
    fn peek(&self, a: &Self::Arr) -> Array2<T>;

    fn add(&mut self, a: &Self::Arr, b: &Self::Arr) -> Result<Self::Arr>;
    fn sub(&mut self, a: &Self::Arr, b: &Self::Arr) -> Result<Self::Arr>;
    fn mul(&mut self, a: &Self::Arr, b: &Self::Arr) -> Result<Self::Arr>;
    fn div(&mut self, a: &Self::Arr, b: &Self::Arr) -> Result<Self::Arr>;
    fn guarded_div(&mut self, a: &Self::Arr, b: &Self::Arr, eps: T) -> Result<Self::Arr>;
    fn scalar_mul(&mut self, a: &Self::Arr, c: T) -> Self::Arr;
    fn max(&mut self, a: &Self::Arr, b: &Self::Arr) -> Result<Self::Arr>;
    fn min(&mut self, a: &Self::Arr, b: &Self::Arr) -> Result<Self::Arr>;
    fn abs(&mut self, a: &Self::Arr) -> Self::Arr;
    fn sqrt(&mut self, a: &Self::Arr) -> Self::Arr;
    fn square(&mut self, a: &Self::Arr) -> Self::Arr;
    fn relu(&mut self, a: &Self::Arr) -> Self::Arr;
    fn sigmoid(&mut self, a: &Self::Arr) -> Self::Arr;
    fn silu(&mut self, a: &Self::Arr) -> Self::Arr;
    fn matmul(&mut self, a: &Self::Arr, b: &Self::Arr) -> Result<Self::Arr>;
    fn linear(&mut self, w: &Self::Arr, x: &Self::Arr, b: &Self::Arr) -> Result<Self::Arr>;
    fn mul_row_broadcast(&mut self, a: &Self::Arr, r: &Self::Arr) -> Result<Self::Arr>;
    fn slice_cols(&mut self, a: &Self::Arr, start: usize, len: usize) -> Result<Self::Arr>;
    fn concat_cols(&mut self, parts: &[Self::Arr]) -> Result<Self::Arr>;
}

/// Direct evaluation on owned buffers.
#[derive(Default)]
pub struct PlainOps;

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> CellOps<T> for PlainOps {
    type Arr = Array2<T>;

    fn constant(&mut self, value: Array2<T>) -> Array2<T> {
        value
    }

    fn fill_like(&mut self, like: &Array2<T>, v: T) -> Array2<T> {
        Array2::from_elem(like.raw_dim(), v)
    }

    fn shape(&self, a: &Array2<T>) -> (usize, usize) {
        a.dim()
    }

    fn peek(&self, a: &Array2<T>) -> Array2<T> {
        a.clone()
    }

    fn add(&mut self, a: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>> {
        Ok(a + b)
    }

    fn sub(&mut self, a: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>> {
        Ok(a - b)
    }

    fn mul(&mut self, a: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>> {
        Ok(a * b)
    }

    fn div(&mut self, a: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>> {
        Ok(a / b)
    }

    fn guarded_div(&mut self, a: &Array2<T>, b: &Array2<T>, eps: T) -> Result<Array2<T>> {
        let mut out = Array2::zeros(a.raw_dim());
        ndarray::Zip::from(&mut out).and(a).and(b).for_each(|o, &x, &y| {
            if y.abs() >= eps {
                *o = x / y;
            }
        });
        Ok(out)
    }

    fn scalar_mul(&mut self, a: &Array2<T>, c: T) -> Array2<T> {
        a.mapv(|x| x * c)
    }

    fn max(&mut self, a: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>> {
        let mut out = a.clone();
        ndarray::Zip::from(&mut out).and(b).for_each(|x, &y| {
            if y > *x {
                *x = y;
            }
        });
        Ok(out)
    }

    fn min(&mut self, a: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>> {
        let mut out = a.clone();
        ndarray::Zip::from(&mut out).and(b).for_each(|x, &y| {
            if y < *x {
                *x = y;
            }
        });
        Ok(out)
    }

    fn abs(&mut self, a: &Array2<T>) -> Array2<T> {
        a.mapv(|x| x.abs())
    }

    fn sqrt(&mut self, a: &Array2<T>) -> Array2<T> {
        a.mapv(|x| x.sqrt())
    }

    fn square(&mut self, a: &Array2<T>) -> Array2<T> {
        a.mapv(|x| x * x)
    }

    fn relu(&mut self, a: &Array2<T>) -> Array2<T> {
        a.mapv(|x| x.max(T::zero()))
    }

    fn sigmoid(&mut self, a: &Array2<T>) -> Array2<T> {
        a.mapv(sigmoid_scalar)
    }

    fn silu(&mut self, a: &Array2<T>) -> Array2<T> {
        a.mapv(|x| x * sigmoid_scalar(x))
    }

    fn matmul(&mut self, a: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>> {
        Ok(a.dot(b))
    }

    fn linear(&mut self, w: &Array2<T>, x: &Array2<T>, b: &Array2<T>) -> Result<Array2<T>> {
        let mut out = w.dot(x);
        let bias = b.column(0).to_owned();
        for mut col in out.columns_mut() {
            col += &bias;
        }
        Ok(out)
    }

    fn mul_row_broadcast(&mut self, a: &Array2<T>, r: &Array2<T>) -> Result<Array2<T>> {
        let mut out = a.clone();
        for (mut col, s) in out.columns_mut().into_iter().zip(r.row(0).iter()) {
            col.mapv_inplace(|x| x * *s);
        }
        Ok(out)
    }

    fn slice_cols(&mut self, a: &Array2<T>, start: usize, len: usize) -> Result<Array2<T>> {
        Ok(a.slice(ndarray::s![.., start..start + len]).to_owned())
    }

    fn concat_cols(&mut self, parts: &[Array2<T>]) -> Result<Array2<T>> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(1), &views).expect("same row count"))
    }
}

/// Tape-recording evaluation.
pub struct TapeOps<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
}

impl<'a, T: Scalar> TapeOps<'a, T> {
    pub fn new(tape: &'a mut Tape<T>) -> Self {
        TapeOps { tape }
    }
}

impl<T: Scalar> CellOps<T> for TapeOps<'_, T> {
    type Arr = DVar;

    fn constant(&mut self, value: Array2<T>) -> DVar {
        self.tape.constant(value)
    }

    fn fill_like(&mut self, like: &DVar, v: T) -> DVar {
        self.tape.constant_like(*like, v)
    }

    fn shape(&self, a: &DVar) -> (usize, usize) {
        self.tape.shape(*a)
    }

    fn peek(&self, a: &DVar) -> Array2<T> {
        self.tape.value(*a).clone()
    }

    fn add(&mut self, a: &DVar, b: &DVar) -> Result<DVar> {
        self.tape.add(*a, *b)
    }

    fn sub(&mut self, a: &DVar, b: &DVar) -> Result<DVar> {
        self.tape.sub(*a, *b)
    }

    fn mul(&mut self, a: &DVar, b: &DVar) -> Result<DVar> {
        self.tape.mul(*a, *b)
    }

    fn div(&mut self, a: &DVar, b: &DVar) -> Result<DVar> {
        self.tape.div(*a, *b)
    }

    fn guarded_div(&mut self, a: &DVar, b: &DVar, eps: T) -> Result<DVar> {
        self.tape.guarded_div(*a, *b, eps)
    }

    fn scalar_mul(&mut self, a: &DVar, c: T) -> DVar {
        self.tape.scalar_mul(*a, c)
    }

    fn max(&mut self, a: &DVar, b: &DVar) -> Result<DVar> {
        self.tape.max(*a, *b)
    }

    fn min(&mut self, a: &DVar, b: &DVar) -> Result<DVar> {
        self.tape.min(*a, *b)
    }

    fn abs(&mut self, a: &DVar) -> DVar {
        self.tape.abs(*a)
    }

    fn sqrt(&mut self, a: &DVar) -> DVar {
        self.tape.sqrt(*a)
    }

    fn square(&mut self, a: &DVar) -> DVar {
        self.tape.square(*a)
    }

    fn relu(&mut self, a: &DVar) -> DVar {
        self.tape.relu(*a)
    }

    fn sigmoid(&mut self, a: &DVar) -> DVar {
        self.tape.sigmoid(*a)
    }

    fn silu(&mut self, a: &DVar) -> DVar {
        self.tape.silu(*a)
    }

    fn matmul(&mut self, a: &DVar, b: &DVar) -> Result<DVar> {
        self.tape.matmul(*a, *b)
    }

    fn linear(&mut self, w: &DVar, x: &DVar, b: &DVar) -> Result<DVar> {
        self.tape.linear(*w, *x, *b)
    }

    fn mul_row_broadcast(&mut self, a: &DVar, r: &DVar) -> Result<DVar> {
        self.tape.mul_row_broadcast(*a, *r)
    }

    fn slice_cols(&mut self, a: &DVar, start: usize, len: usize) -> Result<DVar> {
        self.tape.slice_cols(*a, start, len)
    }

    fn concat_cols(&mut self, parts: &[DVar]) -> Result<DVar> {
        self.tape.concat_cols(parts)
    }
}
