//! Define-by-run reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape. Every forward operation pushes a node
//! holding its value and the handles of its operands, so node order is a
//! topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use nrr_core::autodiff::Graph;
//! use nrr_core::Matrix;
//!
//! let mut g = Graph::new();
//! let x = g.param(Matrix::row_vector(&[1.0, 2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().as_slice(), &[2.0, 4.0]);
//! ```
//!
//! Gradients are zeroed at the start of every `backward` call; calling it
//! twice yields the same gradients rather than accumulating.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Lower clamp applied by [`Graph::ln_clamped`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    RowSoftmax(Tensor),
    LnClamp(Tensor, f64),
    Square(Tensor),
    Relu(Tensor),
    RowMin(Tensor, Vec<usize>),
    RowMax(Tensor, Vec<usize>),
    RowSum(Tensor),
    ColSum(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    RepeatRows(Tensor, usize),
    SliceRows(Tensor, usize),
    HConcat(Vec<Tensor>),
    Tanh(Tensor),
    Broadcast(Tensor),
    AddConst(Tensor),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.0].value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.nodes[t.0].value.shape()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `t`, if `t`
    /// requires gradients and was reached.
    pub fn grad(&self, t: Tensor) -> Option<&Matrix> {
        self.grads.get(t.0).and_then(Option::as_ref)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Tensor {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Matrix, op: Op, parents: &[Tensor]) -> Tensor {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.push_op(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Tensor, s: f64) -> Tensor {
        let v = self.value(a).map(|x| x * s);
        self.push_op(v, Op::Scale(a, s), &[a])
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push_op(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).transpose();
        self.push_op(v, Op::Transpose(a), &[a])
    }

    pub fn row_softmax(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).row_softmax();
        self.push_op(v, Op::RowSoftmax(a), &[a])
    }

    /// `ln(max(x, LOG_FLOOR))`; clamped entries receive zero gradient.
    pub fn ln_clamped(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        self.push_op(v, Op::LnClamp(a, LOG_FLOOR), &[a])
    }

    pub fn square(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).map(|x| x * x);
        self.push_op(v, Op::Square(a), &[a])
    }

    /// `max(x, 0)`; the kink routes zero gradient.
    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push_op(v, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).map(f64::tanh);
        self.push_op(v, Op::Tanh(a), &[a])
    }

    /// `rows x 1` row minima. Gradient flows to the earliest attaining column.
    pub fn row_min(&mut self, a: Tensor) -> Tensor {
        let x = self.value(a);
        let idx = x.row_argmin();
        let vals: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        self.push_op(Matrix::column(&vals), Op::RowMin(a, idx), &[a])
    }

    /// `rows x 1` row maxima. Gradient flows to the earliest attaining column.
    pub fn row_max(&mut self, a: Tensor) -> Tensor {
        let x = self.value(a);
        let idx = x.row_argmax();
        let vals: Vec<f64> = idx.iter().enumerate().map(|(r, &c)| x.get(r, c)).collect();
        self.push_op(Matrix::column(&vals), Op::RowMax(a, idx), &[a])
    }

    pub fn row_sum(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).row_sums();
        self.push_op(v, Op::RowSum(a), &[a])
    }

    pub fn col_sum(&mut self, a: Tensor) -> Tensor {
        let v = self.value(a).col_sums();
        self.push_op(v, Op::ColSum(a), &[a])
    }

    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let v = Matrix::scalar(self.value(a).sum());
        self.push_op(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let x = self.value(a);
        let v = Matrix::scalar(x.sum() / x.len() as f64);
        self.push_op(v, Op::Mean(a), &[a])
    }

    /// Vertical stack of `k` copies of `a`.
    pub fn repeat_rows(&mut self, a: Tensor, k: usize) -> Result<Tensor> {
        if k == 0 {
            return Err(Error::invalid("repeat_rows needs k >= 1"));
        }
        let v = self.value(a).repeat_rows(k);
        Ok(self.push_op(v, Op::RepeatRows(a, k), &[a]))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Tensor, start: usize, end: usize) -> Result<Tensor> {
        let rows = self.shape(a).0;
        if start >= end || end > rows {
            return Err(Error::invalid(format!(
                "row range {start}..{end} out of bounds for {rows} rows"
            )));
        }
        let v = self.value(a).slice_rows(start, end);
        Ok(self.push_op(v, Op::SliceRows(a, start), &[a]))
    }

    pub fn hconcat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("hconcat of nothing"))?;
        for &p in &parts[1..] {
            if self.shape(p).0 != self.shape(first).0 {
                return Err(Error::ShapeMismatch {
                    op: "hconcat",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::hconcat(&values);
        Ok(self.push_op(v, Op::HConcat(parts.to_vec()), parts))
    }

    /// Vertical concatenation, expressed as transpose / hconcat / transpose.
    pub fn vconcat(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let transposed: Vec<Tensor> = parts.iter().map(|&p| self.transpose(p)).collect();
        let joined = self.hconcat(&transposed)?;
        Ok(self.transpose(joined))
    }

    /// Expands a `1 x c`, `r x 1` or `1 x 1` tensor to `rows x cols`.
    pub fn broadcast(&mut self, a: Tensor, rows: usize, cols: usize) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if !((r == 1 || r == rows) && (c == 1 || c == cols)) {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                left: (r, c),
                right: (rows, cols),
            });
        }
        let v = self.value(a).broadcast_to(rows, cols);
        Ok(self.push_op(v, Op::Broadcast(a), &[a]))
    }

    /// `a + c` where `c` is treated as a constant.
    pub fn add_const(&mut self, a: Tensor, c: &Matrix) -> Result<Tensor> {
        if self.shape(a) != c.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_const",
                left: self.shape(a),
                right: c.shape(),
            });
        }
        let v = self.value(a).zip_map(c, |x, y| x + y);
        Ok(self.push_op(v, Op::AddConst(a), &[a]))
    }

    pub fn add_scalar(&mut self, a: Tensor, s: f64) -> Tensor {
        let v = self.value(a).map(|x| x + s);
        self.push_op(v, Op::AddConst(a), &[a])
    }

    /// Reverse sweep from a scalar `loss`. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let (lower, upper) = self.grads.split_at_mut(idx);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |t: Tensor, contribution: Matrix| {
                if nodes[t.0].requires_grad {
                    match &mut lower[t.0] {
                        Some(existing) => existing.add_assign(&contribution),
                        slot @ None => *slot = Some(contribution),
                    }
                }
            };
            let val = |t: Tensor| &nodes[t.0].value;
            let wants = |t: Tensor| nodes[t.0].requires_grad;

            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        acc(*a, g.zip_map(val(*b), |x, y| x * y));
                    }
                    if wants(*b) {
                        acc(*b, g.zip_map(val(*a), |x, y| x * y));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if wants(*a) {
                        acc(*a, g.zip_map(bv, |x, y| x / y));
                    }
                    if wants(*b) {
                        // d(a/b)/db = -a / b^2 = -out / b
                        let q = node.value.zip_map(bv, |o, y| -o / y);
                        acc(*b, g.zip_map(&q, |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        acc(*a, g.matmul(&val(*b).transpose()));
                    }
                    if wants(*b) {
                        acc(*b, val(*a).transpose().matmul(g));
                    }
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut out = g.zip_map(y, |x, yy| x * yy);
                    for r in 0..y.rows() {
                        let dot: f64 = out.row(r).iter().sum();
                        for c in 0..y.cols() {
                            out.set(r, c, out.get(r, c) - y.get(r, c) * dot);
                        }
                    }
                    acc(*a, out);
                }
                Op::LnClamp(a, floor) => {
                    let floor = *floor;
                    acc(
                        *a,
                        g.zip_map(val(*a), |x, y| if y > floor { x / y } else { 0.0 }),
                    );
                }
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
                Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
                Op::RowMin(a, idx) | Op::RowMax(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut out = Matrix::zeros(r, c);
                    for (row, &col) in idx.iter().enumerate() {
                        out.set(row, col, g.get(row, 0));
                    }
                    acc(*a, out);
                }
                Op::RowSum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, g.broadcast_to(r, c));
                }
                Op::ColSum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, g.broadcast_to(r, c));
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64));
                }
                Op::RepeatRows(a, k) => {
                    let n = val(*a).rows();
                    let mut out = g.slice_rows(0, n);
                    for block in 1..*k {
                        out.add_assign(&g.slice_rows(block * n, (block + 1) * n));
                    }
                    acc(*a, out);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = val(*a).shape();
                    let mut out = Matrix::zeros(r, c);
                    let len = g.len();
                    out.as_mut_slice()[start * c..start * c + len].copy_from_slice(g.as_slice());
                    acc(*a, out);
                }
                Op::HConcat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        if wants(p) {
                            let mut out = Matrix::zeros(r, c);
                            for row in 0..r {
                                for col in 0..c {
                                    out.set(row, col, g.get(row, offset + col));
                                }
                            }
                            acc(p, out);
                        }
                        offset += c;
                    }
                }
                Op::Broadcast(a) => {
                    let (r, c) = val(*a).shape();
                    let reduced = match (r == g.rows(), c == g.cols()) {
                        (true, true) => g.clone(),
                        (true, false) => g.row_sums(),
                        (false, true) => g.col_sums(),
                        (false, false) => Matrix::scalar(g.sum()),
                    };
                    acc(*a, reduced);
                }
                Op::AddConst(a) => acc(*a, g.clone()),
            }
        }
        Ok(())
    }
}

/// Compares reverse-mode gradients against central finite differences.
///
/// `f` builds a scalar loss from parameter tensors registered on a fresh
/// graph. Returns the maximum over all parameter entries of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_difference_check<F>(f: F, params: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let eval = |values: &[Matrix]| -> Result<(f64, Graph, Vec<Tensor>, Tensor)> {
        let mut g = Graph::new();
        let handles: Vec<Tensor> = values.iter().map(|m| g.param(m.clone())).collect();
        let loss = f(&mut g, &handles)?;
        let shape = g.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        Ok((g.value(loss).get(0, 0), g, handles, loss))
    };

    let (base, mut g, handles, loss) = eval(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite { param: 0, entry: 0 });
    }
    g.backward(loss)?;

    let mut worst = 0.0_f64;
    let mut probe = params.to_vec();
    for (p, h) in handles.iter().enumerate() {
        let analytic = g.grad(*h).cloned().unwrap_or_else(|| {
            let (r, c) = params[p].shape();
            Matrix::zeros(r, c)
        });
        for e in 0..params[p].len() {
            let orig = params[p].as_slice()[e];
            probe[p].as_mut_slice()[e] = orig + step;
            let plus = eval(&probe)?.0;
            probe[p].as_mut_slice()[e] = orig - step;
            let minus = eval(&probe)?.0;
            probe[p].as_mut_slice()[e] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::NonFinite { param: p, entry: e });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.as_slice()[e];
            let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
