//! Define-by-run reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation eagerly. Leaves either borrow their value
//! (weights owned by a model that outlives the tape) or own it. Calling
//! [`Tape::backward`] on a `1x1` output walks the record in reverse and returns
//! gradients for every node that depends on a leaf marked as requiring grad.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::{Matrix, Scalar};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<T>, rstd: Vec<T> },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { x: Var, index: Arc<[usize]> },
    Reshape(Var),
    RowCosineDistance { a: Var, b: Var, dot: Vec<T>, na: Vec<T>, nb: Vec<T> },
    Sum(Var),
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record. Not `Sync`; build one tape per sample/thread.
pub struct Tape<'a, T: Scalar> {
    nodes: RefCell<Vec<Node<'a, T>>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Cow<'a, Matrix<T>>, op: Op<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn owned(&self, value: Matrix<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.0].requires_grad)
        };
        self.push(Cow::Owned(value), op, rg)
    }

    /// Leaf with an owned value.
    pub fn leaf(&self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Leaf borrowing its value.
    pub fn borrowed(&self, value: &'a Matrix<T>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Matrix<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix<T>> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    // ---- linear algebra -------------------------------------------------

    /// `op(a) * op(b)`
    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            va.matmul_t(ta, &vb, tb)
        };
        self.owned(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Matrix::from_vec(va.rows(), va.cols(), data)
        };
        self.owned(out, op, &[a, b])
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&self, x: Var, row: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let out = {
            let (vx, vr) = (self.value(x), self.value(row));
            assert_eq!(vr.rows(), 1, "broadcast operand must be a row vector");
            assert_eq!(vr.cols(), vx.cols(), "broadcast width mismatch");
            let mut out = (*vx).clone();
            for r in 0..out.rows() {
                for (o, &b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                    *o = f(*o, b);
                }
            }
            out
        };
        self.owned(out, op, &[x, row])
    }

    /// `x + 1ᵀ row` (bias add).
    pub fn add_row(&self, x: Var, row: Var) -> Var {
        self.row_broadcast(x, row, |a, b| a + b, Op::AddRow(x, row))
    }

    /// `x ⊙ 1ᵀ row` (per-channel scale).
    pub fn mul_row(&self, x: Var, row: Var) -> Var {
        self.row_broadcast(x, row, |a, b| a * b, Op::MulRow(x, row))
    }

    pub fn scale(&self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.owned(out, Op::Scale(x, s), &[x])
    }

    pub fn abs(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.owned(out, Op::Abs(x), &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self, x: Var) -> Var {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(x)
            .map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        self.owned(out, Op::Gelu(x), &[x])
    }

    /// Row-wise softmax.
    pub fn softmax(&self, x: Var) -> Var {
        let out = {
            let mut out = (*self.value(x)).clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            out
        };
        self.owned(out, Op::Softmax(x), &[x])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (both `1 x D`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (out, xhat, rstd) = {
            let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
            let d = vx.cols();
            assert_eq!(vg.shape(), (1, d), "layer norm gamma shape");
            assert_eq!(vb.shape(), (1, d), "layer norm beta shape");
            let dn = T::of(d as f64);
            let mut xhat = Matrix::zeros(vx.rows(), d);
            let mut out = Matrix::zeros(vx.rows(), d);
            let mut rstd = Vec::with_capacity(vx.rows());
            for r in 0..vx.rows() {
                let row = vx.row(r);
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let rs = T::one() / (var + T::of(eps)).sqrt();
                rstd.push(rs);
                let xh = xhat.row_mut(r);
                for (h, &v) in xh.iter_mut().zip(row) {
                    *h = (v - mean) * rs;
                }
                let o = out.row_mut(r);
                for j in 0..d {
                    o[j] = xh[j] * vg.data()[j] + vb.data()[j];
                }
            }
            (out, xhat, rstd)
        };
        self.owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Var {
        let out = {
            let vx = self.value(x);
            assert!(start + len <= vx.cols(), "column slice out of range");
            Matrix::from_fn(vx.rows(), len, |r, c| vx.get(r, start + c))
        };
        self.owned(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&self, x: Var, start: usize, len: usize) -> Var {
        let out = {
            let vx = self.value(x);
            assert!(start + len <= vx.rows(), "row slice out of range");
            let c = vx.cols();
            Matrix::from_vec(len, c, vx.data()[start * c..(start + len) * c].to_vec())
        };
        self.owned(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let rows = vals[0].rows();
            assert!(vals.iter().all(|v| v.rows() == rows), "concat_cols row mismatch");
            let cols: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Matrix::from_vec(rows, cols, data)
        };
        self.owned(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let cols = vals[0].cols();
            assert!(vals.iter().all(|v| v.cols() == cols), "concat_rows column mismatch");
            let rows: usize = vals.iter().map(|v| v.rows()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for v in &vals {
                data.extend_from_slice(v.data());
            }
            Matrix::from_vec(rows, cols, data)
        };
        self.owned(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `rows x cols`.
    pub fn gather(&self, x: Var, index: Arc<[usize]>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let out = {
            let vx = self.value(x);
            let src = vx.data();
            Matrix::from_vec(rows, cols, index.iter().map(|&i| src[i]).collect())
        };
        self.owned(out, Op::Gather { x, index }, &[x])
    }

    pub fn reshape(&self, x: Var, rows: usize, cols: usize) -> Var {
        let out = (*self.value(x)).clone().reshape(rows, cols);
        self.owned(out, Op::Reshape(x), &[x])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let out = Matrix::from_vec(1, 1, vec![self.value(x).sum()]);
        self.owned(out, Op::Sum(x), &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Per-row cosine distance `1 - cos(a_r, b_r)` as an `L x 1` column.
    ///
    /// Rows where either vector has zero norm get distance 1 and no gradient.
    /// Bitwise-identical rows give exactly 0, also without gradient (it vanishes there).
    pub fn row_cosine_distance(&self, a: Var, b: Var) -> Var {
        let (out, dot, na, nb) = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.shape(), vb.shape(), "cosine distance shape mismatch");
            let l = va.rows();
            let mut out = Matrix::zeros(l, 1);
            let (mut dot, mut na, mut nb) = (Vec::new(), Vec::new(), Vec::new());
            for r in 0..l {
                let (ra, rb) = (va.row(r), vb.row(r));
                let d: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                let a2: T = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
                let b2: T = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
                let (dist, a2) = if a2 == T::zero() || b2 == T::zero() {
                    (T::one(), a2)
                } else if ra == rb {
                    // identical rows: exact zero distance, and a zero norm
                    // marker so the (vanishing) gradient is skipped
                    (T::zero(), T::zero())
                } else {
                    let c = (d / (a2 * b2)).max(-T::one()).min(T::one());
                    (T::one() - c, a2)
                };
                out.set(r, 0, dist);
                dot.push(d);
                na.push(a2);
                nb.push(b2);
            }
            (out, dot, na, nb)
        };
        self.owned(out, Op::RowCosineDistance { a, b, dot, na, nb }, &[a, b])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a `1x1` output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.0].value.shape(),
            (1, 1),
            "backward expects a scalar output"
        );
        let mut grads: Vec<Option<Matrix<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        for id in (0..=output.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = node.value.as_ref();
            let rg = |v: Var| nodes[v.0].requires_grad;
            let vof = |v: Var| nodes[v.0].value.as_ref();
            match &node.op {
                Op::Leaf => {}
                &Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (vof(a), vof(b));
                    if rg(a) {
                        // C = op(A) op(B); dA = dC op(B)^T (transposed back when ta)
                        let da = if ta {
                            vb.matmul_t(tb, &g, true)
                        } else {
                            g.matmul_t(false, vb, !tb)
                        };
                        accumulate(&mut grads, a, da);
                    }
                    if rg(b) {
                        let db = if tb {
                            g.matmul_t(true, va, ta)
                        } else {
                            va.matmul_t(!ta, &g, false)
                        };
                        accumulate(&mut grads, b, db);
                    }
                }
                &Op::Add(a, b) => {
                    if rg(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if rg(b) {
                        accumulate(&mut grads, b, g);
                    }
                }
                &Op::Sub(a, b) => {
                    if rg(a) {
                        accumulate(&mut grads, a, g.clone());
                    }
                    if rg(b) {
                        accumulate(&mut grads, b, g.map(|v| -v));
                    }
                }
                &Op::Mul(a, b) => {
                    let (va, vb) = (vof(a), vof(b));
                    if rg(a) {
                        accumulate(&mut grads, a, zip_map(&g, vb, |x, y| x * y));
                    }
                    if rg(b) {
                        accumulate(&mut grads, b, zip_map(&g, va, |x, y| x * y));
                    }
                }
                &Op::AddRow(x, row) => {
                    if rg(row) {
                        accumulate(&mut grads, row, column_sums(&g));
                    }
                    if rg(x) {
                        accumulate(&mut grads, x, g);
                    }
                }
                &Op::MulRow(x, row) => {
                    let (vx, vr) = (vof(x), vof(row));
                    if rg(row) {
                        accumulate(&mut grads, row, column_sums(&zip_map(&g, vx, |a, b| a * b)));
                    }
                    if rg(x) {
                        let mut dx = g;
                        for r in 0..dx.rows() {
                            for (d, &s) in dx.row_mut(r).iter_mut().zip(vr.data()) {
                                *d *= s;
                            }
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
                &Op::Scale(x, s) => {
                    if rg(x) {
                        accumulate(&mut grads, x, g.map(|v| v * s));
                    }
                }
                &Op::Abs(x) => {
                    if rg(x) {
                        let dx = zip_map(&g, vof(x), |d, v| {
                            if v > T::zero() {
                                d
                            } else if v < T::zero() {
                                -d
                            } else {
                                T::zero()
                            }
                        });
                        accumulate(&mut grads, x, dx);
                    }
                }
                &Op::Gelu(x) => {
                    if rg(x) {
                        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
                        let inv_sqrt2pi = T::of(0.398_942_280_401_432_7);
                        let half = T::of(0.5);
                        let dx = zip_map(&g, vof(x), |d, v| {
                            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                            let pdf = inv_sqrt2pi * (-half * v * v).exp();
                            d * (cdf + v * pdf)
                        });
                        accumulate(&mut grads, x, dx);
                    }
                }
                &Op::Softmax(x) => {
                    if rg(x) {
                        let mut dx = Matrix::zeros(val.rows(), val.cols());
                        for r in 0..val.rows() {
                            let (y, dy) = (val.row(r), g.row(r));
                            let s: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                            for (o, (&yy, &dd)) in dx.row_mut(r).iter_mut().zip(y.iter().zip(dy)) {
                                *o = yy * (dd - s);
                            }
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    if rg(beta) {
                        accumulate(&mut grads, beta, column_sums(&g));
                    }
                    if rg(gamma) {
                        accumulate(&mut grads, gamma, column_sums(&zip_map(&g, xhat, |a, b| a * b)));
                    }
                    if rg(x) {
                        let vg = vof(gamma);
                        let d = xhat.cols();
                        let dn = T::of(d as f64);
                        let mut dx = Matrix::zeros(xhat.rows(), d);
                        for r in 0..xhat.rows() {
                            let (xh, dy) = (xhat.row(r), g.row(r));
                            let dxh: Vec<T> =
                                dy.iter().zip(vg.data()).map(|(&a, &b)| a * b).collect();
                            let m1 = dxh.iter().copied().sum::<T>() / dn;
                            let m2 = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                            for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                                *o = rstd[r] * (dxh[j] - m1 - xh[j] * m2);
                            }
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
                &Op::SliceCols { x, start } => {
                    if rg(x) {
                        let vx = vof(x);
                        let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                        for r in 0..g.rows() {
                            dx.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
                &Op::SliceRows { x, start } => {
                    if rg(x) {
                        let vx = vof(x);
                        let c = vx.cols();
                        let mut dx = Matrix::zeros(vx.rows(), c);
                        dx.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                        accumulate(&mut grads, x, dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = vof(p).cols();
                        if rg(p) {
                            let dp = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, offset + c));
                            accumulate(&mut grads, p, dp);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let h = vof(p).rows();
                        if rg(p) {
                            let dp = Matrix::from_vec(
                                h,
                                c,
                                g.data()[offset * c..(offset + h) * c].to_vec(),
                            );
                            accumulate(&mut grads, p, dp);
                        }
                        offset += h;
                    }
                }
                Op::Gather { x, index } => {
                    let x = *x;
                    if rg(x) {
                        let vx = vof(x);
                        let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                        let dd = dx.data_mut();
                        for (&i, &gv) in index.iter().zip(g.data()) {
                            dd[i] += gv;
                        }
                        accumulate(&mut grads, x, dx);
                    }
                }
                &Op::Reshape(x) => {
                    if rg(x) {
                        let (r, c) = vof(x).shape();
                        accumulate(&mut grads, x, g.reshape(r, c));
                    }
                }
                &Op::Sum(x) => {
                    if rg(x) {
                        let (r, c) = vof(x).shape();
                        accumulate(&mut grads, x, Matrix::filled(r, c, g.get(0, 0)));
                    }
                }
                Op::RowCosineDistance { a, b, dot, na, nb } => {
                    let (a, b) = (*a, *b);
                    let (va, vb) = (vof(a), vof(b));
                    let cols = va.cols();
                    let mut da = Matrix::zeros(va.rows(), cols);
                    let mut db = Matrix::zeros(va.rows(), cols);
                    for r in 0..va.rows() {
                        if na[r] == T::zero() || nb[r] == T::zero() {
                            continue;
                        }
                        let gr = g.get(r, 0);
                        let inv = T::one() / (na[r] * nb[r]);
                        let c = dot[r] * inv;
                        let (ra, rb) = (va.row(r), vb.row(r));
                        let (ia2, ib2) = (T::one() / (na[r] * na[r]), T::one() / (nb[r] * nb[r]));
                        let (oa, ob) = (da.row_mut(r), db.row_mut(r));
                        for j in 0..cols {
                            // d(1 - c)/da = -(b/(|a||b|) - c a/|a|^2)
                            oa[j] = -gr * (rb[j] * inv - c * ra[j] * ia2);
                        }
                        for j in 0..cols {
                            ob[j] = -gr * (ra[j] * inv - c * rb[j] * ib2);
                        }
                    }
                    if rg(a) {
                        accumulate(&mut grads, a, da);
                    }
                    if rg(b) {
                        accumulate(&mut grads, b, db);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(T::one(), &g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Binds model weights onto a tape, deduplicating by address so a weight used
/// twice maps to one leaf. Trainable binders mark leaves as requiring grad.
pub struct Binder<'t, 'a, T: Scalar> {
    tape: &'t Tape<'a, T>,
    trainable: bool,
    bound: RefCell<HashMap<*const Matrix<T>, Var>>,
}

impl<'t, 'a, T: Scalar> Binder<'t, 'a, T> {
    pub fn trainable(tape: &'t Tape<'a, T>) -> Self {
        Self {
            tape,
            trainable: true,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn frozen(tape: &'t Tape<'a, T>) -> Self {
        Self {
            tape,
            trainable: false,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<'a, T> {
        self.tape
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&self, m: &'a Matrix<T>) -> Var {
        let key = m as *const Matrix<T>;
        if let Some(&v) = self.bound.borrow().get(&key) {
            return v;
        }
        let v = self.tape.borrowed(m, self.trainable);
        self.bound.borrow_mut().insert(key, v);
        v
    }

    /// Leaf bound for `m`, if `m` was used in the forward pass.
    pub fn lookup(&self, m: &Matrix<T>) -> Option<Var> {
        self.bound.borrow().get(&(m as *const Matrix<T>)).copied()
    }
}
