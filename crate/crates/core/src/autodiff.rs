//! Minimal reverse-mode automatic differentiation over dense real matrices.
//!
//! A [`Tape`] records vector-level primitives (one node per array operation)
//! during an eager forward pass, then a single reverse sweep accumulates
//! gradients. Buffers are p x m matrices ([`ndarray::Array2`]); scalars are
//! 1 x 1. Subgradient conventions are fixed so rollout gradients are
//! reproducible: relu'(0) = 0, abs'(0) = 0, and ties in max/min send the
//! gradient to the first argument.
//!
//! A tape is single-threaded; distinct tapes may live on distinct threads.

use ndarray::{Array2, Axis};

use crate::error::{NssdaError, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DVar {
    pub id: usize,
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    /// Differentiation target; gradient is reported.
    Leaf,
    /// Input treated as a constant; no gradient flows into it.
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// Division that is 0 (value and gradient) where |denominator| < eps.
    GuardedDiv(usize, usize, T),
    ScalarMul(usize, T),
    /// W (d x k) times X (k x m).
    MatMul(usize, usize),
    /// W (d x k) times X (k x m) plus column bias b (d x 1) broadcast.
    Linear(usize, usize, usize),
    Max(usize, usize),
    Min(usize, usize),
    Abs(usize),
    Relu(usize),
    Sigmoid(usize),
    /// x * sigmoid(x), fused to keep rollout tapes small.
    Silu(usize),
    Square(usize),
    Sqrt(usize),
    /// Sum of all elements, yielding 1 x 1.
    Sum(usize),
    /// Column range [start, start + len) of the source.
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    /// A (p x m) scaled columnwise by a row vector r (1 x m).
    MulRowBroadcast(usize, usize),
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Array2<T>,
}

/// Gradients of a scalar loss with respect to every leaf.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf node; zero-filled if the leaf never influenced the loss.
    pub fn get(&self, var: DVar, shape: (usize, usize)) -> Array2<T> {
        self.grads
            .get(var.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: DVar) -> &Array2<T> {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: DVar) -> (usize, usize) {
        let d = self.nodes[v.id].value.dim();
        (d.0, d.1)
    }

    fn push(&mut self, op: Op<T>, value: Array2<T>) -> DVar {
        self.nodes.push(Node { op, value });
        DVar {
            id: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Array2<T>) -> DVar {
        self.push(Op::Leaf, value)
    }

    pub fn constant(&mut self, value: Array2<T>) -> DVar {
        self.push(Op::Const, value)
    }

    /// 1 x 1 constant.
    pub fn constant_scalar(&mut self, v: T) -> DVar {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// Constant filled with `v`, shaped like `like`.
    pub fn constant_like(&mut self, like: DVar, v: T) -> DVar {
        let shape = self.shape(like);
        self.constant(Array2::from_elem(shape, v))
    }

    fn check_same_shape(&self, op: &'static str, a: DVar, b: DVar) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NssdaError::ShapeMismatch {
                op,
                expected: format!("{:?}", self.shape(a)),
                got: format!("{:?}", self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: DVar, b: DVar) -> Result<DVar> {
        self.check_same_shape("add", a, b)?;
        let v = &self.nodes[a.id].value + &self.nodes[b.id].value;
        Ok(self.push(Op::Add(a.id, b.id), v))
    }

    pub fn sub(&mut self, a: DVar, b: DVar) -> Result<DVar> {
        self.check_same_shape("sub", a, b)?;
        let v = &self.nodes[a.id].value - &self.nodes[b.id].value;
        Ok(self.push(Op::Sub(a.id, b.id), v))
    }

    pub fn mul(&mut self, a: DVar, b: DVar) -> Result<DVar> {
        self.check_same_shape("mul", a, b)?;
        let v = &self.nodes[a.id].value * &self.nodes[b.id].value;
        Ok(self.push(Op::Mul(a.id, b.id), v))
    }

    pub fn div(&mut self, a: DVar, b: DVar) -> Result<DVar> {
        self.check_same_shape("div", a, b)?;
        let v = &self.nodes[a.id].value / &self.nodes[b.id].value;
        Ok(self.push(Op::Div(a.id, b.id), v))
    }

    /// a / b, forced to 0 where |b| < eps (flat-denominator guard).
    pub fn guarded_div(&mut self, a: DVar, b: DVar, eps: T) -> Result<DVar> {
        self.check_same_shape("guarded_div", a, b)?;
        let av = &self.nodes[a.id].value;
        let bv = &self.nodes[b.id].value;
        let mut v = Array2::zeros(av.raw_dim());
        ndarray::Zip::from(&mut v).and(av).and(bv).for_each(|o, &x, &y| {
            if y.abs() >= eps {
                *o = x / y;
            }
        });
        Ok(self.push(Op::GuardedDiv(a.id, b.id, eps), v))
    }

    pub fn scalar_mul(&mut self, a: DVar, c: T) -> DVar {
        let v = self.nodes[a.id].value.mapv(|x| x * c);
        self.push(Op::ScalarMul(a.id, c), v)
    }

    pub fn matmul(&mut self, a: DVar, b: DVar) -> Result<DVar> {
        if self.shape(a).1 != self.shape(b).0 {
            return Err(NssdaError::ShapeMismatch {
                op: "matmul",
                expected: format!("inner dim {}", self.shape(a).1),
                got: format!("{}", self.shape(b).0),
            });
        }
        let v = self.nodes[a.id].value.dot(&self.nodes[b.id].value);
        Ok(self.push(Op::MatMul(a.id, b.id), v))
    }

    /// W x + b with b a column vector broadcast across the columns of x.
    pub fn linear(&mut self, w: DVar, x: DVar, b: DVar) -> Result<DVar> {
        if self.shape(w).1 != self.shape(x).0
            || self.shape(b) != (self.shape(w).0, 1)
        {
            return Err(NssdaError::ShapeMismatch {
                op: "linear",
                expected: format!("W (d,k), x (k,m), b (d,1); W {:?}", self.shape(w)),
                got: format!("x {:?}, b {:?}", self.shape(x), self.shape(b)),
            });
        }
        let mut v = self.nodes[w.id].value.dot(&self.nodes[x.id].value);
        let bias = self.nodes[b.id].value.column(0).to_owned();
        for mut col in v.columns_mut() {
            col += &bias;
        }
        Ok(self.push(Op::Linear(w.id, x.id, b.id), v))
    }

    pub fn max(&mut self, a: DVar, b: DVar) -> Result<DVar> {
        self.check_same_shape("max", a, b)?;
        let mut v = self.nodes[a.id].value.clone();
        ndarray::Zip::from(&mut v)
            .and(&self.nodes[b.id].value)
            .for_each(|x, &y| {
                if y > *x {
                    *x = y;
                }
            });
        Ok(self.push(Op::Max(a.id, b.id), v))
    }

    pub fn min(&mut self, a: DVar, b: DVar) -> Result<DVar> {
        self.check_same_shape("min", a, b)?;
        let mut v = self.nodes[a.id].value.clone();
        ndarray::Zip::from(&mut v)
            .and(&self.nodes[b.id].value)
            .for_each(|x, &y| {
                if y < *x {
                    *x = y;
                }
            });
        Ok(self.push(Op::Min(a.id, b.id), v))
    }

    pub fn abs(&mut self, a: DVar) -> DVar {
        let v = self.nodes[a.id].value.mapv(|x| x.abs());
        self.push(Op::Abs(a.id), v)
    }

    pub fn relu(&mut self, a: DVar) -> DVar {
        let v = self.nodes[a.id].value.mapv(|x| x.max(T::zero()));
        self.push(Op::Relu(a.id), v)
    }

    pub fn sigmoid(&mut self, a: DVar) -> DVar {
        let v = self.nodes[a.id].value.mapv(sigmoid_scalar);
        self.push(Op::Sigmoid(a.id), v)
    }

    pub fn silu(&mut self, a: DVar) -> DVar {
        let v = self.nodes[a.id].value.mapv(|x| x * sigmoid_scalar(x));
        self.push(Op::Silu(a.id), v)
    }

    pub fn square(&mut self, a: DVar) -> DVar {
        let v = self.nodes[a.id].value.mapv(|x| x * x);
        self.push(Op::Square(a.id), v)
    }

    pub fn sqrt(&mut self, a: DVar) -> DVar {
        let v = self.nodes[a.id].value.mapv(|x| x.sqrt());
        self.push(Op::Sqrt(a.id), v)
    }

    pub fn sum(&mut self, a: DVar) -> DVar {
        let s = self.nodes[a.id].value.iter().copied().fold(T::zero(), |acc, x| acc + x);
        self.push(Op::Sum(a.id), Array2::from_elem((1, 1), s))
    }

    pub fn slice_cols(&mut self, a: DVar, start: usize, len: usize) -> Result<DVar> {
        let (_, m) = self.shape(a);
        if start + len > m {
            return Err(NssdaError::ShapeMismatch {
                op: "slice_cols",
                expected: format!("range within {m} columns"),
                got: format!("[{start}, {})", start + len),
            });
        }
        let v = self.nodes[a.id]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        Ok(self.push(Op::SliceCols(a.id, start, len), v))
    }

    pub fn concat_cols(&mut self, parts: &[DVar]) -> Result<DVar> {
        if parts.is_empty() {
            return Err(NssdaError::ShapeMismatch {
                op: "concat_cols",
                expected: "at least one part".into(),
                got: "0".into(),
            });
        }
        let rows = self.shape(parts[0]).0;
        for part in parts {
            if self.shape(*part).0 != rows {
                return Err(NssdaError::ShapeMismatch {
                    op: "concat_cols",
                    expected: format!("{rows} rows"),
                    got: format!("{}", self.shape(*part).0),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.id].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("checked rows");
        Ok(self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), v))
    }

    /// Scale each column of `a` (p x m) by the matching entry of `r` (1 x m).
    pub fn mul_row_broadcast(&mut self, a: DVar, r: DVar) -> Result<DVar> {
        let (_, m) = self.shape(a);
        if self.shape(r) != (1, m) {
            return Err(NssdaError::ShapeMismatch {
                op: "mul_row_broadcast",
                expected: format!("(1, {m})"),
                got: format!("{:?}", self.shape(r)),
            });
        }
        let rv = self.nodes[r.id].value.row(0).to_owned();
        let mut v = self.nodes[a.id].value.clone();
        for (mut col, s) in v.columns_mut().into_iter().zip(rv.iter()) {
            col.mapv_inplace(|x| x * *s);
        }
        Ok(self.push(Op::MulRowBroadcast(a.id, r.id), v))
    }

    /// Reverse sweep from a scalar (1 x 1) loss. Each node is visited exactly
    /// once; intermediate gradients are dropped as soon as they have been
    /// propagated, so only leaf gradients are retained.
    pub fn backward(&self, loss: DVar) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(NssdaError::ShapeMismatch {
                op: "backward",
                expected: "(1, 1) scalar loss".into(),
                got: format!("{:?}", self.shape(loss)),
            });
        }
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Array2::from_elem((1, 1), T::one()));

        for k in (0..=loss.id).rev() {
            let Some(g) = grads[k].take() else { continue };
            match &self.nodes[k].op {
                Op::Leaf => {
                    grads[k] = Some(g);
                }
                Op::Const => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * &self.nodes[*b].value);
                    accumulate(&mut grads, *b, &g * &self.nodes[*a].value);
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[*b].value;
                    accumulate(&mut grads, *a, &g / bv);
                    let da = &g * &self.nodes[*a].value;
                    let db = (&da / &(bv * bv)).mapv(|x| -x);
                    accumulate(&mut grads, *b, db);
                }
                Op::GuardedDiv(a, b, eps) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let mut ga = Array2::zeros(g.raw_dim());
                    let mut gb = Array2::zeros(g.raw_dim());
                    ndarray::Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(&g)
                        .and(av)
                        .and(bv)
                        .for_each(|ga, gb, &gg, &x, &y| {
                            if y.abs() >= *eps {
                                *ga = gg / y;
                                *gb = -gg * x / (y * y);
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ScalarMul(a, c) => {
                    accumulate(&mut grads, *a, g.mapv(|x| x * *c));
                }
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&self.nodes[*b].value.t()));
                    accumulate(&mut grads, *b, self.nodes[*a].value.t().dot(&g));
                }
                Op::Linear(w, x, b) => {
                    accumulate(&mut grads, *w, g.dot(&self.nodes[*x].value.t()));
                    accumulate(&mut grads, *x, self.nodes[*w].value.t().dot(&g));
                    let db = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *b, db);
                }
                Op::Max(a, b) => {
                    // Tie goes to the first argument.
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let mut ga = Array2::zeros(g.raw_dim());
                    let mut gb = Array2::zeros(g.raw_dim());
                    ndarray::Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(&g)
                        .and(av)
                        .and(bv)
                        .for_each(|ga, gb, &gg, &x, &y| {
                            if x >= y {
                                *ga = gg;
                            } else {
                                *gb = gg;
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Min(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let mut ga = Array2::zeros(g.raw_dim());
                    let mut gb = Array2::zeros(g.raw_dim());
                    ndarray::Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(&g)
                        .and(av)
                        .and(bv)
                        .for_each(|ga, gb, &gg, &x, &y| {
                            if x <= y {
                                *ga = gg;
                            } else {
                                *gb = gg;
                            }
                        });
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Abs(a) => {
                    // abs'(0) = 0
                    let av = &self.nodes[*a].value;
                    let da = ndarray::Zip::from(&g).and(av).map_collect(|&gg, &x| {
                        if x > T::zero() {
                            gg
                        } else if x < T::zero() {
                            -gg
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    // relu'(0) = 0
                    let av = &self.nodes[*a].value;
                    let da = ndarray::Zip::from(&g)
                        .and(av)
                        .map_collect(|&gg, &x| if x > T::zero() { gg } else { T::zero() });
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let sv = &self.nodes[k].value;
                    let da = ndarray::Zip::from(&g)
                        .and(sv)
                        .map_collect(|&gg, &s| gg * s * (T::one() - s));
                    accumulate(&mut grads, *a, da);
                }
                Op::Silu(a) => {
                    // d/dx [x s(x)] = s(x) (1 + x (1 - s(x)))
                    let av = &self.nodes[*a].value;
                    let da = ndarray::Zip::from(&g).and(av).map_collect(|&gg, &x| {
                        let s = sigmoid_scalar(x);
                        gg * s * (T::one() + x * (T::one() - s))
                    });
                    accumulate(&mut grads, *a, da);
                }
                Op::Square(a) => {
                    let av = &self.nodes[*a].value;
                    let two = T::from_f64_c(2.0);
                    let da = ndarray::Zip::from(&g)
                        .and(av)
                        .map_collect(|&gg, &x| gg * two * x);
                    accumulate(&mut grads, *a, da);
                }
                Op::Sqrt(a) => {
                    let sv = &self.nodes[k].value;
                    let half = T::from_f64_c(0.5);
                    let da = ndarray::Zip::from(&g)
                        .and(sv)
                        .map_collect(|&gg, &s| gg * half / s);
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let gg = g[(0, 0)];
                    let shape = self.nodes[*a].value.raw_dim();
                    accumulate(&mut grads, *a, Array2::from_elem(shape, gg));
                }
                Op::SliceCols(a, start, len) => {
                    let shape = self.nodes[*a].value.raw_dim();
                    let mut da = Array2::zeros(shape);
                    da.slice_mut(ndarray::s![.., *start..*start + *len])
                        .assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for part in parts {
                        let m = self.nodes[*part].value.ncols();
                        let da = g.slice(ndarray::s![.., offset..offset + m]).to_owned();
                        accumulate(&mut grads, *part, da);
                        offset += m;
                    }
                }
                Op::MulRowBroadcast(a, r) => {
                    let av = &self.nodes[*a].value;
                    let rv = &self.nodes[*r].value;
                    let mut da = g.clone();
                    for (mut col, s) in da.columns_mut().into_iter().zip(rv.row(0).iter()) {
                        col.mapv_inplace(|x| x * *s);
                    }
                    let dr = (&g * av).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *r, dr);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], id: usize, delta: Array2<T>) {
    match &mut grads[id] {
        Some(g) => *g += &delta,
        slot @ None => *slot = Some(delta),
    }
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Jacobian of a small vector map f: R^p -> R^p built on a fresh tape per
/// output row. Exact to AD precision; intended for p <= 4.
pub fn jacobian<T, F>(u: &[T], f: F) -> Result<Array2<T>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, DVar) -> Result<DVar>,
{
    let p_in = u.len();
    // Probe the output dimension once.
    let p_out = {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_shape_vec((p_in, 1), u.to_vec()).expect("shape"));
        let y = f(&mut tape, x)?;
        let (rows, cols) = tape.shape(y);
        if cols != 1 {
            return Err(NssdaError::ShapeMismatch {
                op: "jacobian",
                expected: "column-vector output".into(),
                got: format!("({rows}, {cols})"),
            });
        }
        rows
    };
    let mut jac = Array2::zeros((p_out, p_in));
    for row in 0..p_out {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_shape_vec((p_in, 1), u.to_vec()).expect("shape"));
        let y = f(&mut tape, x)?;
        let mut selector = Array2::zeros((1, p_out));
        selector[(0, row)] = T::one();
        let sel = tape.constant(selector);
        let scalar = tape.matmul(sel, y)?;
        let grads = tape.backward(scalar)?;
        let gx = grads.get(x, (p_in, 1));
        for col in 0..p_in {
            jac[(row, col)] = gx[(col, 0)];
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{RandomStream, StreamPurpose};
    use ndarray::array;

    type T64 = Tape<f64>;

    #[test]
    fn record_add_values() {
        let mut t = T64::new();
        let x = t.leaf(array![[3.0]]);
        let y = t.leaf(array![[4.0]]);
        let z = t.add(x, y).unwrap();
        assert_eq!(t.value(z)[(0, 0)], 7.0);
    }

    #[test]
    fn record_matvec_identity() {
        let mut t = T64::new();
        let eye = t.constant(Array2::eye(3));
        let v = t.leaf(array![[1.0], [2.0], [3.0]]);
        let out = t.matmul(eye, v).unwrap();
        assert_eq!(t.value(out), t.value(v));
    }

    #[test]
    fn record_relu_values() {
        let mut t = T64::new();
        let x = t.leaf(array![[-2.0, 5.0]]);
        let y = t.relu(x);
        assert_eq!(t.value(y), &array![[0.0, 5.0]]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = T64::new();
        let a = t.leaf(array![[1.0, 2.0]]);
        let b = t.leaf(array![[1.0], [2.0]]);
        assert!(t.add(a, b).is_err());
        assert!(t.backward(a).is_err()); // non-scalar loss
    }

    #[test]
    fn backward_square() {
        let mut t = T64::new();
        let x = t.leaf(array![[3.0]]);
        let loss = t.square(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x, (1, 1))[(0, 0)], 6.0);
    }

    #[test]
    fn backward_relu_subgradient() {
        let mut t = T64::new();
        let x = t.leaf(array![[-1.0, 2.0]]);
        let r = t.relu(x);
        let loss = t.sum(r);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x, (1, 2)), array![[0.0, 1.0]]);
        // relu'(0) = 0
        let mut t = T64::new();
        let x = t.leaf(array![[0.0]]);
        let r = t.relu(x);
        let loss = t.sum(r);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x, (1, 1))[(0, 0)], 0.0);
    }

    #[test]
    fn max_tie_goes_to_first_argument() {
        let mut t = T64::new();
        let a = t.leaf(array![[2.0]]);
        let b = t.leaf(array![[2.0]]);
        let m = t.max(a, b).unwrap();
        let loss = t.sum(m);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(a, (1, 1))[(0, 0)], 1.0);
        assert_eq!(g.get(b, (1, 1))[(0, 0)], 0.0);
    }

    #[test]
    fn jacobian_identity() {
        let j = jacobian(&[1.0, 2.0, 3.0], |_t, x| Ok(x)).unwrap();
        assert_eq!(j, Array2::<f64>::eye(3));
    }

    #[test]
    fn jacobian_analytic_case() {
        // f(u) = [u1 u2, u1^2] at (2, 3) -> [[3, 2], [4, 0]]
        let j = jacobian(&[2.0, 3.0], |t, x| {
            let u1 = t.slice_rows_helper(x, 0)?;
            let u2 = t.slice_rows_helper(x, 1)?;
            let a = t.mul(u1, u2)?;
            let b = t.square(u1);
            t.concat_rows_helper(&[a, b])
        })
        .unwrap();
        assert_eq!(j, array![[3.0, 2.0], [4.0, 0.0]]);
    }

    // Small helpers used only by tests: row extraction/stacking via matmul
    // with constant selector matrices.
    impl Tape<f64> {
        fn slice_rows_helper(&mut self, x: DVar, row: usize) -> Result<DVar> {
            let (rows, _) = self.shape(x);
            let mut sel = Array2::zeros((1, rows));
            sel[(0, row)] = 1.0;
            let sel = self.constant(sel);
            self.matmul(sel, x)
        }

        fn concat_rows_helper(&mut self, parts: &[DVar]) -> Result<DVar> {
            // Stack 1x1 scalars into a column vector.
            let n = parts.len();
            let mut out = None;
            for (i, part) in parts.iter().enumerate() {
                let mut sel = Array2::zeros((n, 1));
                sel[(i, 0)] = 1.0;
                let sel = self.constant(sel);
                let lifted = self.matmul(sel, *part)?;
                out = Some(match out {
                    None => lifted,
                    Some(acc) => self.add(acc, lifted)?,
                });
            }
            Ok(out.unwrap())
        }
    }

    /// Central finite differences of a scalar-valued closure.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    /// Builds sum of a chain exercising one primitive on a 1 x m input.
    fn primitive_loss(name: &str, t: &mut T64, x: DVar, y: DVar) -> DVar {
        match name {
            "add" => {
                let z = t.add(x, y).unwrap();
                t.sum(z)
            }
            "sub" => {
                let z = t.sub(x, y).unwrap();
                t.sum(z)
            }
            "mul" => {
                let z = t.mul(x, y).unwrap();
                t.sum(z)
            }
            "div" => {
                let z = t.div(x, y).unwrap();
                t.sum(z)
            }
            "max" => {
                let z = t.max(x, y).unwrap();
                t.sum(z)
            }
            "min" => {
                let z = t.min(x, y).unwrap();
                t.sum(z)
            }
            "abs" => {
                let z = t.abs(x);
                t.sum(z)
            }
            "sigmoid" => {
                let z = t.sigmoid(x);
                t.sum(z)
            }
            "silu" => {
                let z = t.silu(x);
                t.sum(z)
            }
            "relu" => {
                let z = t.relu(x);
                t.sum(z)
            }
            "square" => {
                let z = t.square(x);
                t.sum(z)
            }
            "scalar_mul" => {
                let z = t.scalar_mul(x, 1.7);
                t.sum(z)
            }
            other => panic!("unknown primitive {other}"),
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let prims = [
            "add", "sub", "mul", "div", "max", "min", "abs", "sigmoid", "silu", "relu",
            "square", "scalar_mul",
        ];
        let mut rng = RandomStream::new(11, StreamPurpose::ParamInit);
        let m = 6;
        for name in prims {
            for _ in 0..20 {
                // Keep inputs away from kinks (0 for abs/relu, ties for
                // max/min, tiny denominators for div) so central differences
                // are valid.
                let xs: Vec<f64> = (0..m)
                    .map(|_| {
                        let mut v: f64 = rng.uniform(-2.0, 2.0);
                        while v.abs() < 0.05 {
                            v = rng.uniform(-2.0, 2.0);
                        }
                        v
                    })
                    .collect();
                let ys: Vec<f64> = xs
                    .iter()
                    .map(|x| {
                        let mut v: f64 = rng.uniform(-2.0, 2.0);
                        while v.abs() < 0.05 || (v - x).abs() < 0.05 {
                            v = rng.uniform(-2.0, 2.0);
                        }
                        v
                    })
                    .collect();

                let eval = |xv: &[f64], yv: &[f64]| -> f64 {
                    let mut t = T64::new();
                    let x = t.leaf(Array2::from_shape_vec((1, m), xv.to_vec()).unwrap());
                    let y = t.leaf(Array2::from_shape_vec((1, m), yv.to_vec()).unwrap());
                    let loss = primitive_loss(name, &mut t, x, y);
                    t.value(loss)[(0, 0)]
                };

                let mut t = T64::new();
                let x = t.leaf(Array2::from_shape_vec((1, m), xs.clone()).unwrap());
                let y = t.leaf(Array2::from_shape_vec((1, m), ys.clone()).unwrap());
                let loss = primitive_loss(name, &mut t, x, y);
                let g = t.backward(loss).unwrap();
                let gx = g.get(x, (1, m));
                let gy = g.get(y, (1, m));

                let h = 1e-6;
                let fx = fd_grad(&|v: &[f64]| eval(v, &ys), &xs, h);
                let fy = fd_grad(&|v: &[f64]| eval(&xs, v), &ys, h);
                for i in 0..m {
                    let check = |ad: f64, fd: f64| {
                        let denom = fd.abs().max(1e-8);
                        assert!(
                            (ad - fd).abs() / denom < 1e-5,
                            "{name}: ad {ad} vs fd {fd}"
                        );
                    };
                    check(gx[(0, i)], fx[i]);
                    check(gy[(0, i)], fy[i]);
                }
            }
        }
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = RandomStream::new(3, StreamPurpose::ParamInit);
        let (d_in, d_h, d_out, m) = (2usize, 5usize, 2usize, 4usize);
        let w1: Vec<f64> = (0..d_h * d_in).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b1: Vec<f64> = (0..d_h).map(|_| rng.uniform(-0.5, 0.5)).collect();
        let w2: Vec<f64> = (0..d_out * d_h).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xs: Vec<f64> = (0..d_in * m).map(|_| rng.uniform(-2.0, 2.0)).collect();

        let eval = |w1v: &[f64], b1v: &[f64], w2v: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>, Vec<f64>)>) {
            let mut t = T64::new();
            let w1 = t.leaf(Array2::from_shape_vec((d_h, d_in), w1v.to_vec()).unwrap());
            let b1 = t.leaf(Array2::from_shape_vec((d_h, 1), b1v.to_vec()).unwrap());
            let w2 = t.leaf(Array2::from_shape_vec((d_out, d_h), w2v.to_vec()).unwrap());
            let x = t.constant(Array2::from_shape_vec((d_in, m), xs.clone()).unwrap());
            let h = t.linear(w1, x, b1).unwrap();
            let h = t.silu(h);
            let out = t.matmul(w2, h).unwrap();
            let sq = t.square(out);
            let loss = t.sum(sq);
            let value = t.value(loss)[(0, 0)];
            let g = t.backward(loss).unwrap();
            let gw1 = g.get(w1, (d_h, d_in)).into_raw_vec_and_offset().0;
            let gb1 = g.get(b1, (d_h, 1)).into_raw_vec_and_offset().0;
            let gw2 = g.get(w2, (d_out, d_h)).into_raw_vec_and_offset().0;
            (value, Some((gw1, gb1, gw2)))
        };

        let (_, grads) = eval(&w1, &b1, &w2);
        let (gw1, gb1, gw2) = grads.unwrap();
        let h = 1e-6;
        let fd_w1 = fd_grad(&|v: &[f64]| eval(v, &b1, &w2).0, &w1, h);
        let fd_b1 = fd_grad(&|v: &[f64]| eval(&w1, v, &w2).0, &b1, h);
        let fd_w2 = fd_grad(&|v: &[f64]| eval(&w1, &b1, v).0, &w2, h);
        let check_all = |ad: &[f64], fd: &[f64], what: &str| {
            for (a, f) in ad.iter().zip(fd.iter()) {
                let denom = f.abs().max(1e-8);
                assert!((a - f).abs() / denom < 1e-5, "{what}: {a} vs {f}");
            }
        };
        check_all(&gw1, &fd_w1, "w1");
        check_all(&gb1, &fd_b1, "b1");
        check_all(&gw2, &fd_w2, "w2");
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = RandomStream::new(9, StreamPurpose::ParamInit);
        let xs: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let (a, b) = (1.7, -0.4);

        let grad_of = |wa: f64, wb: f64| -> Array2<f64> {
            let mut t = T64::new();
            let x = t.leaf(Array2::from_shape_vec((1, 4), xs.clone()).unwrap());
            let f = t.square(x);
            let f = t.sum(f);
            let g = t.sigmoid(x);
            let g = t.sum(g);
            let fa = t.scalar_mul(f, wa);
            let gb = t.scalar_mul(g, wb);
            let loss = t.add(fa, gb).unwrap();
            t.backward(loss).unwrap().get(x, (1, 4))
        };

        let gf = grad_of(1.0, 0.0);
        let gg = grad_of(0.0, 1.0);
        let combined = grad_of(a, b);
        let expect = gf.mapv(|v| a * v) + gg.mapv(|v| b * v);
        for (c, e) in combined.iter().zip(expect.iter()) {
            assert!((c - e).abs() <= 1e-15 * e.abs().max(1.0));
        }
    }

    #[test]
    fn forward_backward_bitwise_deterministic() {
        let mut rng = RandomStream::new(5, StreamPurpose::ParamInit);
        let xs: Vec<f64> = (0..8).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let run = || -> (f64, Array2<f64>) {
            let mut t = T64::new();
            let x = t.leaf(Array2::from_shape_vec((2, 4), xs.clone()).unwrap());
            let s = t.silu(x);
            let q = t.square(s);
            let loss = t.sum(q);
            let v = t.value(loss)[(0, 0)];
            (v, t.backward(loss).unwrap().get(x, (2, 4)))
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert!(v1 == v2);
        assert!(g1 == g2);
    }

    #[test]
    fn jacobian_mlp_matches_finite_differences() {
        let mut rng = RandomStream::new(21, StreamPurpose::ParamInit);
        let (p, d_h) = (2usize, 6usize);
        let w1 = Array2::from_shape_fn((d_h, p), |_| rng.uniform(-1.0, 1.0));
        let b1 = Array2::from_shape_fn((d_h, 1), |_| rng.uniform(-0.5, 0.5));
        let w2 = Array2::from_shape_fn((p, d_h), |_| rng.uniform(-1.0, 1.0));
        let u = [0.3, -0.7];

        let flux = |t: &mut T64, x: DVar| -> Result<DVar> {
            let w1 = t.constant(w1.clone());
            let b1 = t.constant(b1.clone());
            let w2 = t.constant(w2.clone());
            let h = t.linear(w1, x, b1)?;
            let h = t.silu(h);
            t.matmul(w2, h)
        };
        let jac = jacobian(&u, flux).unwrap();

        let eval = |uv: &[f64]| -> Vec<f64> {
            let mut t = T64::new();
            let x = t.leaf(Array2::from_shape_vec((p, 1), uv.to_vec()).unwrap());
            let y = flux(&mut t, x).unwrap();
            t.value(y).column(0).to_vec()
        };
        let h = 1e-6;
        for col in 0..p {
            let mut up = u.to_vec();
            let mut um = u.to_vec();
            up[col] += h;
            um[col] -= h;
            let fp = eval(&up);
            let fm = eval(&um);
            for row in 0..p {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                let ad = jac[(row, col)];
                let denom = fd.abs().max(1e-8);
                assert!((ad - fd).abs() / denom < 1e-5, "({row},{col}): {ad} vs {fd}");
            }
        }
    }
}
