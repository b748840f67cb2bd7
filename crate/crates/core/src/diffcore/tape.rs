//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node to the tape, so node indices are already a
//! topological order. [`Tape::backward`] walks them once in reverse.

use std::cell::RefCell;
use std::sync::Arc;

use super::matrix::Matrix;
use crate::error::{Result, ScdError};

/// Additive guard for logarithms and cosine denominators.
pub const GUARD_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Gather { src: Var, idx: Arc<[usize]> },
    ScatterAdd { src: Var, idx: Arc<[usize]> },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    MulCol { x: Var, w: Var },
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Var, Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SegmentSoftmax { x: Var, offsets: Arc<[usize]> },
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    Cosine(Var, Var),
    Diag(Var),
    SqNorm(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the output w.r.t. `v`; zeros when `v` does not reach the output.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

fn shape_err(op: &'static str, detail: String) -> ScdError {
    ScdError::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Input node: parameters and constants alike.
    pub fn leaf(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Matrix {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn with_value<T>(&self, v: Var, f: impl FnOnce(&Matrix) -> T) -> T {
        f(&self.nodes.borrow()[v.0].value)
    }

    /// Rows of `src` selected by `idx` (one-hot row lookup).
    pub fn gather(&self, src: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let out = {
            let nodes = self.nodes.borrow();
            let s = &nodes[src.0].value;
            let mut out = Matrix::zeros(idx.len(), s.cols());
            for (r, &i) in idx.iter().enumerate() {
                if i >= s.rows() {
                    return Err(shape_err(
                        "gather",
                        format!("index {i} out of {} rows", s.rows()),
                    ));
                }
                out.row_mut(r).copy_from_slice(s.row(i));
            }
            out
        };
        Ok(self.push(out, Op::Gather { src, idx }))
    }

    /// Sums row `r` of `src` into output row `idx[r]`; output has `n_rows` rows.
    pub fn scatter_add(
        &self,
        src: Var,
        idx: impl Into<Arc<[usize]>>,
        n_rows: usize,
    ) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let out = {
            let nodes = self.nodes.borrow();
            let s = &nodes[src.0].value;
            if s.rows() != idx.len() {
                return Err(shape_err(
                    "scatter_add",
                    format!("{} rows vs {} indices", s.rows(), idx.len()),
                ));
            }
            let mut out = Matrix::zeros(n_rows, s.cols());
            for (r, &i) in idx.iter().enumerate() {
                if i >= n_rows {
                    return Err(shape_err(
                        "scatter_add",
                        format!("target {i} out of {n_rows} rows"),
                    ));
                }
                for (o, x) in out.row_mut(i).iter_mut().zip(s.row(r)) {
                    *o += x;
                }
            }
            out
        };
        Ok(self.push(out, Op::ScatterAdd { src, idx }))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.cols() != y.rows() {
                return Err(shape_err(
                    "matmul",
                    format!("{:?} x {:?}", x.shape(), y.shape()),
                ));
            }
            x.matmul(y)
        };
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x
            .as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Matrix::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_row(&self, x: Var, bias: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (m, b) = (&nodes[x.0].value, &nodes[bias.0].value);
            if b.rows() != 1 || b.cols() != m.cols() {
                return Err(shape_err(
                    "add_row",
                    format!("{:?} + row {:?}", m.shape(), b.shape()),
                ));
            }
            let mut out = m.clone();
            for r in 0..out.rows() {
                for (o, v) in out.row_mut(r).iter_mut().zip(b.as_slice()) {
                    *o += v;
                }
            }
            out
        };
        Ok(self.push(out, Op::AddRow { x, bias }))
    }

    /// Scales row `r` of `x` by `w[r]` where `w` is an `r x 1` column.
    pub fn mul_col(&self, x: Var, w: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (m, c) = (&nodes[x.0].value, &nodes[w.0].value);
            if c.cols() != 1 || c.rows() != m.rows() {
                return Err(shape_err(
                    "mul_col",
                    format!("{:?} * col {:?}", m.shape(), c.shape()),
                ));
            }
            let mut out = m.clone();
            for r in 0..out.rows() {
                let s = c.get(r, 0);
                for o in out.row_mut(r) {
                    *o *= s;
                }
            }
            out
        };
        Ok(self.push(out, Op::MulCol { x, w }))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = self.with_value(x, |m| m.map(|v| v * c));
        self.push(out, Op::Scale(x, c))
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let out = self.with_value(x, |m| m.map(|v| v + c));
        self.push(out, Op::AddScalar(x))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.rows() != y.rows() {
                return Err(shape_err(
                    "concat_cols",
                    format!("{:?} | {:?}", x.shape(), y.shape()),
                ));
            }
            let mut out = Matrix::zeros(x.rows(), x.cols() + y.cols());
            for r in 0..x.rows() {
                let row = out.row_mut(r);
                row[..x.cols()].copy_from_slice(x.row(r));
                row[x.cols()..].copy_from_slice(y.row(r));
            }
            out
        };
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.with_value(x, |m| m.map(sigmoid));
        self.push(out, Op::Sigmoid(x))
    }

    /// Natural log with the input floored at [`GUARD_EPS`].
    pub fn log(&self, x: Var) -> Var {
        let out = self.with_value(x, |m| m.map(|v| v.max(GUARD_EPS).ln()));
        self.push(out, Op::Log(x))
    }

    pub fn exp(&self, x: Var) -> Var {
        let out = self.with_value(x, |m| m.map(f64::exp));
        self.push(out, Op::Exp(x))
    }

    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.with_value(x, |m| m.map(|v| v.clamp(lo, hi)));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// Softmax of an `n x 1` column within contiguous segments
    /// `offsets[h]..offsets[h + 1]`. Empty segments are allowed.
    pub fn segment_softmax(&self, x: Var, offsets: impl Into<Arc<[usize]>>) -> Result<Var> {
        let offsets: Arc<[usize]> = offsets.into();
        let out = {
            let nodes = self.nodes.borrow();
            let m = &nodes[x.0].value;
            if m.cols() != 1 || offsets.last().copied().unwrap_or(0) != m.rows() {
                return Err(shape_err(
                    "segment_softmax",
                    format!("{:?} with segment end {:?}", m.shape(), offsets.last()),
                ));
            }
            let mut out = Matrix::zeros(m.rows(), 1);
            let src = m.as_slice();
            let dst = out.as_mut_slice();
            for w in offsets.windows(2) {
                softmax_into(&src[w[0]..w[1]], &mut dst[w[0]..w[1]]);
            }
            out
        };
        Ok(self.push(out, Op::SegmentSoftmax { x, offsets }))
    }

    /// `r x c` to `r x 1`.
    pub fn row_sum(&self, x: Var) -> Var {
        let out = self.with_value(x, |m| {
            let data = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
            Matrix::from_vec(m.rows(), 1, data).expect("row_sum shape")
        });
        self.push(out, Op::RowSum(x))
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = self.with_value(x, |m| Matrix::scalar(m.sum()));
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let out = self.with_value(x, |m| {
            if m.is_empty() {
                None
            } else {
                Some(Matrix::scalar(m.sum() / m.len() as f64))
            }
        });
        let out = out.ok_or_else(|| shape_err("mean", "empty input".into()))?;
        Ok(self.push(out, Op::Mean(x)))
    }

    /// Pairwise cosine similarity of the rows of `a` (`n x d`) and `b`
    /// (`m x d`), giving `n x m`. Norm products below `1e-12` are raised to
    /// it, so zero rows give 0.
    pub fn cosine(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.cols() != y.cols() {
                return Err(shape_err(
                    "cosine",
                    format!("{:?} vs {:?}", x.shape(), y.shape()),
                ));
            }
            let nx = row_norms(x);
            let ny = row_norms(y);
            let mut out = Matrix::zeros(x.rows(), y.rows());
            for i in 0..x.rows() {
                for j in 0..y.rows() {
                    let dot = dot(x.row(i), y.row(j));
                    out.set(i, j, dot / (nx[i] * ny[j]).max(GUARD_EPS));
                }
            }
            out
        };
        Ok(self.push(out, Op::Cosine(a, b)))
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&self, x: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let m = &nodes[x.0].value;
            if m.rows() != m.cols() {
                return Err(shape_err("diag", format!("{:?}", m.shape())));
            }
            Matrix::column(&(0..m.rows()).map(|i| m.get(i, i)).collect::<Vec<_>>())
        };
        Ok(self.push(out, Op::Diag(x)))
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self, x: Var) -> Var {
        let out = self.with_value(x, |m| Matrix::scalar(m.sq_norm()));
        self.push(out, Op::SqNorm(x))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.0].value.shape();
        if out_shape != (1, 1) {
            return Err(shape_err("backward", format!("output {out_shape:?}")));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[output.0] = Some(Matrix::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Gather { src, idx } => {
            let s = val(*src);
            let mut gs = Matrix::zeros(s.rows(), s.cols());
            for (r, &i) in idx.iter().enumerate() {
                for (o, x) in gs.row_mut(i).iter_mut().zip(g.row(r)) {
                    *o += x;
                }
            }
            accumulate(grads, *src, gs);
        }
        Op::ScatterAdd { src, idx } => {
            let s = val(*src);
            let mut gs = Matrix::zeros(s.rows(), s.cols());
            for (r, &i) in idx.iter().enumerate() {
                gs.row_mut(r).copy_from_slice(g.row(i));
            }
            accumulate(grads, *src, gs);
        }
        Op::MatMul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            accumulate(grads, *a, g.matmul(&y.transpose()));
            accumulate(grads, *b, x.transpose().matmul(g));
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (x, y) = (val(*a), val(*b));
            accumulate(grads, *a, elementwise(g, y, |p, q| p * q));
            accumulate(grads, *b, elementwise(g, x, |p, q| p * q));
        }
        Op::AddRow { x, bias } => {
            let mut gb = Matrix::zeros(1, g.cols());
            for r in 0..g.rows() {
                for (o, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            accumulate(grads, *x, g.clone());
            accumulate(grads, *bias, gb);
        }
        Op::MulCol { x, w } => {
            let (m, c) = (val(*x), val(*w));
            let mut gx = g.clone();
            let mut gw = Matrix::zeros(c.rows(), 1);
            for r in 0..m.rows() {
                let s = c.get(r, 0);
                gw.set(r, 0, dot(g.row(r), m.row(r)));
                for o in gx.row_mut(r) {
                    *o *= s;
                }
            }
            accumulate(grads, *x, gx);
            accumulate(grads, *w, gw);
        }
        Op::Scale(x, c) => accumulate(grads, *x, g.map(|v| v * c)),
        Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
        Op::ConcatCols(a, b) => {
            let ca = val(*a).cols();
            let cb = val(*b).cols();
            let mut ga = Matrix::zeros(g.rows(), ca);
            let mut gb = Matrix::zeros(g.rows(), cb);
            for r in 0..g.rows() {
                ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
        Op::Sigmoid(x) => {
            let y = &node.value;
            accumulate(grads, *x, elementwise(g, y, |p, s| p * s * (1.0 - s)));
        }
        Op::Log(x) => {
            let inp = val(*x);
            accumulate(
                grads,
                *x,
                elementwise(g, inp, |p, v| if v > GUARD_EPS { p / v } else { 0.0 }),
            );
        }
        Op::Exp(x) => {
            accumulate(grads, *x, elementwise(g, &node.value, |p, e| p * e));
        }
        Op::Clamp { x, lo, hi } => {
            let inp = val(*x);
            accumulate(
                grads,
                *x,
                elementwise(g, inp, |p, v| if v >= *lo && v <= *hi { p } else { 0.0 }),
            );
        }
        Op::SegmentSoftmax { x, offsets } => {
            let a = node.value.as_slice();
            let gs = g.as_slice();
            let mut gx = Matrix::zeros(a.len(), 1);
            let out = gx.as_mut_slice();
            for w in offsets.windows(2) {
                let seg = w[0]..w[1];
                let inner: f64 = a[seg.clone()].iter().zip(&gs[seg.clone()]).map(|(p, q)| p * q).sum();
                for j in seg {
                    out[j] = a[j] * (gs[j] - inner);
                }
            }
            accumulate(grads, *x, gx);
        }
        Op::RowSum(x) => {
            let m = val(*x);
            let mut gx = Matrix::zeros(m.rows(), m.cols());
            for r in 0..m.rows() {
                let s = g.get(r, 0);
                gx.row_mut(r).fill(s);
            }
            accumulate(grads, *x, gx);
        }
        Op::Sum(x) => {
            let (r, c) = val(*x).shape();
            accumulate(grads, *x, Matrix::filled(r, c, g.item()));
        }
        Op::Mean(x) => {
            let (r, c) = val(*x).shape();
            accumulate(grads, *x, Matrix::filled(r, c, g.item() / (r * c) as f64));
        }
        Op::Cosine(a, b) => {
            let (x, y) = (val(*a), val(*b));
            let (gx, gy) = cosine_backward(x, y, g);
            accumulate(grads, *a, gx);
            accumulate(grads, *b, gy);
        }
        Op::Diag(x) => {
            let n = val(*x).rows();
            let mut gx = Matrix::zeros(n, n);
            for i in 0..n {
                gx.set(i, i, g.get(i, 0));
            }
            accumulate(grads, *x, gx);
        }
        Op::SqNorm(x) => {
            let s = 2.0 * g.item();
            accumulate(grads, *x, val(*x).map(|v| s * v));
        }
    }
}

fn cosine_backward(x: &Matrix, y: &Matrix, g: &Matrix) -> (Matrix, Matrix) {
    let nx = row_norms(x);
    let ny = row_norms(y);
    let mut gx = Matrix::zeros(x.rows(), x.cols());
    let mut gy = Matrix::zeros(y.rows(), y.cols());
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            let gij = g.get(i, j);
            if gij == 0.0 {
                continue;
            }
            let (xi, yj) = (x.row(i), y.row(j));
            let prod = nx[i] * ny[j];
            let d = prod.max(GUARD_EPS);
            // d cos / d x_i = y_j / D - dot * ny_j * x_i / (nx_i * D^2); the
            // second term vanishes where the guard holds D constant
            let (cx, cy) = if prod > GUARD_EPS {
                let dotp = dot(xi, yj);
                (dotp * ny[j] / (nx[i] * d * d), dotp * nx[i] / (ny[j] * d * d))
            } else {
                (0.0, 0.0)
            };
            for k in 0..x.cols() {
                let gxi = gx.row_mut(i);
                gxi[k] += gij * (yj[k] / d - cx * xi[k]);
            }
            for k in 0..y.cols() {
                let gyj = gy.row_mut(j);
                gyj[k] += gij * (xi[k] / d - cy * yj[k]);
            }
        }
    }
    (gx, gy)
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&p, &q)| f(p, q))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("elementwise shape")
}

fn row_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of `src` into `dst`.
pub fn softmax_into(src: &[f64], dst: &mut [f64]) {
    if src.is_empty() {
        return;
    }
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}
