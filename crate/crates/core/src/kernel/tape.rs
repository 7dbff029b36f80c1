//! Reverse-mode tape over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` simply walks it in reverse. A graph is
//! built per forward pass; call [`Graph::reset`] before reusing one.

use super::matrix::{layer_norm_rows, softmax_rows, Matrix, Scalar};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable custom reduction `S ↦ scalar` whose gradient is computed
/// together with the value.
pub trait ScalarLoss<T: Scalar> {
    fn value_and_grad(&self, input: &Matrix<T>) -> Result<(T, Matrix<T>)>;
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Transpose(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Matrix<T>,
        targets: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Custom {
        x: Var,
        grad: Matrix<T>,
    },
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Matrix<T>) -> Matrix<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => self.needs(*a) || self.needs(*b),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Transpose(a)
            | Op::SliceCols(a, ..)
            | Op::SoftmaxRows(a)
            | Op::MeanRows(a)
            | Op::Sum(a) => self.needs(*a),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(|v| self.needs(*v)),
            Op::LayerNorm { x, gain, bias, .. } => {
                self.needs(*x) || self.needs(*gain) || self.needs(*bias)
            }
            Op::CrossEntropy { logits, .. } => self.needs(*logits),
            Op::L2NormalizeRows { x, .. } | Op::Custom { x, .. } => self.needs(*x),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "param")?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Matrix<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "input")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        self.push(v, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::Shape(format!("add {:?} + {:?}", x.shape(), y.shape())));
        }
        let mut v = x.clone();
        v.add_assign(y);
        self.push(v, Op::Add(a, b), "add")
    }

    /// Adds the `1×n` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::Shape(format!(
                "row bias {:?} for {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut v = x.clone();
        for r in 0..v.rows() {
            for (o, &bv) in v.row_mut(r).iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
        self.push(v, Op::AddRow(a, bias), "add_row")
    }

    /// `a · w + b` with `w: in×out`, `b: 1×out`.
    pub fn affine(&mut self, a: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(a, w)?;
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), "transpose")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Error::Shape(format!(
                "column slice {start}..{end} of width {}",
                x.cols()
            )));
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row(r)[start..end]);
        }
        let v = Matrix::from_vec(x.rows(), end - start, data)?;
        self.push(v, Op::SliceCols(a, start, end), "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(Error::Shape("concat_cols with differing row counts".into()));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        self.push(v, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |p| self.value(*p).cols());
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(Error::Shape("concat_rows with differing widths".into()));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            rows += self.value(*p).rows();
            data.extend_from_slice(self.value(*p).data());
        }
        let v = Matrix::from_vec(rows, cols, data)?;
        self.push(v, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = softmax_rows(self.value(a))?;
        self.push(v, Op::SoftmaxRows(a), "softmax")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (v, xhat, inv_std) =
            layer_norm_rows(self.value(x), self.value(gain), self.value(bias), eps)?;
        self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Mean over rows, giving a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.rows() == 0 {
            return Err(Error::Empty("mean over zero rows".into()));
        }
        let n = T::of(x.rows() as f64);
        let mut out = Matrix::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o = *o + v;
            }
        }
        let out = out.map(|v| v / n);
        self.push(out, Op::MeanRows(a), "mean_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a), "sum")
    }

    /// Mean over rows of `−log softmax(logits_r)[targets_r]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if targets.len() != x.rows() || targets.iter().any(|&t| t >= x.cols()) {
            return Err(Error::Shape(format!(
                "cross entropy targets {targets:?} for logits {:?}",
                x.shape()
            )));
        }
        let probs = softmax_rows(x)?;
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss = loss + lse - row[t];
        }
        let loss = loss / T::of(targets.len() as f64);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            "cross_entropy",
        )
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            if n == T::zero() {
                return Err(Error::Degenerate("cannot normalize a zero row".into()));
            }
            for x in row.iter_mut() {
                *x = *x / n;
            }
            norms.push(n);
        }
        self.push(v, Op::L2NormalizeRows { x: a, norms }, "l2_normalize")
    }

    /// Applies a scalar-valued loss whose gradient the loss itself supplies.
    pub fn custom_loss(&mut self, x: Var, loss: &dyn ScalarLoss<T>) -> Result<Var> {
        let (value, grad) = loss.value_and_grad(self.value(x))?;
        if grad.shape() != self.value(x).shape() {
            return Err(Error::Shape("custom loss gradient shape".into()));
        }
        self.push(Matrix::filled(1, 1, value), Op::Custom { x, grad }, "custom_loss")
    }

    /// Reverse pass from a `1×1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let acc = |v: Var, delta: Matrix<T>, grads: &mut Vec<Option<Matrix<T>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        acc(*a, g.matmul_t(self.value(*b))?, &mut grads);
                    }
                    if self.needs(*b) {
                        acc(*b, self.value(*a).t_matmul(&g)?, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddRow(a, b) => {
                    let mut col_sums = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in col_sums.data_mut().iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                    acc(*b, col_sums, &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Scale(a, s) => acc(*a, g.map(|v| v * *s), &mut grads),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= T::zero() {
                            *dv = T::zero();
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.transpose(), &mut grads),
                Op::SliceCols(a, start, end) => {
                    let x = self.value(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        d.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        acc(*p, Matrix::from_vec(g.rows(), w, data)?, &mut grads);
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (h, w) = self.value(*p).shape();
                        let data = g.data()[offset * w..(offset + h) * w].to_vec();
                        acc(*p, Matrix::from_vec(h, w, data)?, &mut grads);
                        offset += h;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let inner = super::matrix::dot(yr, d.row(r));
                        for (dv, &yv) in d.row_mut(r).iter_mut().zip(yr) {
                            *dv = yv * (*dv - inner);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = g.shape();
                    let n = T::of(cols as f64);
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for c in 0..cols {
                            dgain.data_mut()[c] = dgain.data()[c] + gr[c] * xr[c];
                            dbias.data_mut()[c] = dbias.data()[c] + gr[c];
                            let dxh = gr[c] * gv.data()[c];
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xr[c];
                        }
                        let k = inv_std[r] / n;
                        for c in 0..cols {
                            let dxh = gr[c] * gv.data()[c];
                            dx[(r, c)] = k * (n * dxh - sum_dxhat - xr[c] * sum_dxhat_xhat);
                        }
                    }
                    acc(*x, dx, &mut grads);
                    acc(*gain, dgain, &mut grads);
                    acc(*bias, dbias, &mut grads);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    let n = T::of(rows as f64);
                    let mut d = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        for (o, &v) in d.row_mut(r).iter_mut().zip(g.data()) {
                            *o = v / n;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let (rows, cols) = self.value(*a).shape();
                    acc(*a, Matrix::filled(rows, cols, g.data()[0]), &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    probs,
                    targets,
                } => {
                    let scale = g.data()[0] / T::of(targets.len() as f64);
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        d[(r, t)] = d[(r, t)] - T::one();
                    }
                    acc(*logits, d.map(|v| v * scale), &mut grads);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut d = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let inner = super::matrix::dot(yr, d.row(r));
                        for (dv, &yv) in d.row_mut(r).iter_mut().zip(yr) {
                            *dv = (*dv - yv * inner) / norms[r];
                        }
                    }
                    acc(*x, d, &mut grads);
                }
                Op::Custom { x, grad } => {
                    let s = g.data()[0];
                    acc(*x, grad.map(|v| v * s), &mut grads);
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }
}
