//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Tape::backward`] sweeps the nodes in reverse order, so the
//! recording order is already a topological order.

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate defects in backward rules, used to confirm that gradient
/// checking detects a broken derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the sigmoid derivative by 1.1.
    SigmoidDerivative,
}

/// Entry mask for [`Tape::softmax_rows`].
///
/// Rows flagged as padding may be fully masked and produce zero rows; a fully
/// masked real row is an error.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxMask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
    real_rows: Vec<bool>,
}

impl SoftmaxMask {
    /// Keeps entry `(i, j)` iff both `row_real[i]` and `col_real[j]` hold.
    pub fn outer(row_real: &[bool], col_real: &[bool]) -> Self {
        let keep = row_real
            .iter()
            .flat_map(|&r| col_real.iter().map(move |&c| r && c))
            .collect();
        Self {
            rows: row_real.len(),
            cols: col_real.len(),
            keep,
            real_rows: row_real.to_vec(),
        }
    }

    /// Arbitrary entry mask; every row is treated as real.
    pub fn dense(rows: usize, cols: usize, keep: Vec<bool>) -> Self {
        assert_eq!(keep.len(), rows * cols, "mask length");
        Self {
            rows,
            cols,
            keep,
            real_rows: vec![true; rows],
        }
    }

    pub fn keeps(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut keep = vec![false; self.keep.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                keep[c * self.rows + r] = self.keep[r * self.cols + c];
            }
        }
        let real_rows = (0..self.cols)
            .map(|c| (0..self.rows).any(|r| self.keep[r * self.cols + c]))
            .collect();
        Self {
            rows: self.cols,
            cols: self.rows,
            keep,
            real_rows,
        }
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    /// `x[u x n] + b[1 x n]` with `b` repeated down the rows.
    AddRow(Var, Var),
    /// `x[u x n]` with row `i` multiplied by `g[i]`, `g: [u x 1]`.
    ScaleRows(Var, Var),
    Affine(Var, T),
    MulConst(Var, Vec<T>),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    Sum(Var),
    Nll {
        probs: Var,
        targets: Vec<Option<usize>>,
        scale: T,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Probability floor applied inside the log of the negative log-likelihood.
pub const NLL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<BackwardFault>,
}

type Res = Result<Var, TensorError>;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient in [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Res {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Res {
        let out = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Res {
        let out = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Res {
        let out = self.value(a).zip_with(self.value(b), "hadamard", |x, y| x * y)?;
        Ok(self.push(out, Op::Hadamard(a, b), &[a, b]))
    }

    /// Adds the row vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Res {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.rows != 1 || sb.cols != sx.cols {
            return Err(TensorError::Shape {
                op: "add_row",
                left: sx,
                right: sb,
            });
        }
        let bias = self.value(b).data().to_vec();
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(sx.cols.max(1)) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o = *o + bb;
            }
        }
        let out = Tensor::from_vec(sx.rows, sx.cols, data)?;
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    /// Multiplies row `i` of `x` by the scalar `g[i]`, where `g` is `u x 1`.
    pub fn scale_rows(&mut self, x: Var, g: Var) -> Res {
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sg.cols != 1 || sg.rows != sx.rows {
            return Err(TensorError::Shape {
                op: "scale_rows",
                left: sx,
                right: sg,
            });
        }
        let gv = self.value(g).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (row, &s) in data.chunks_mut(sx.cols.max(1)).zip(&gv) {
            for o in row {
                *o = *o * s;
            }
        }
        let out = Tensor::from_vec(sx.rows, sx.cols, data)?;
        Ok(self.push(out, Op::ScaleRows(x, g), &[x, g]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Res {
        let out = self.value(x).map(|v| scale * v + shift);
        Ok(self.push(out, Op::Affine(x, scale), &[x]))
    }

    /// Elementwise product with a fixed, non-differentiable factor.
    pub fn mul_const(&mut self, x: Var, factor: Tensor<T>) -> Res {
        let out = self.value(x).zip_with(&factor, "mul_const", |a, b| a * b)?;
        Ok(self.push(out, Op::MulConst(x, factor.into_data()), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Res {
        let first = *parts.first().ok_or_else(|| TensorError::Contract {
            op: "concat_cols",
            reason: "empty part list".into(),
        })?;
        let rows = self.shape(first).rows;
        for &p in parts {
            if self.shape(p).rows != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        if parts.len() == 1 {
            return Ok(first);
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks `1 x n` rows into an `m x n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Res {
        let first = *rows.first().ok_or_else(|| TensorError::Contract {
            op: "stack_rows",
            reason: "empty row list".into(),
        })?;
        let s0 = self.shape(first);
        for &r in rows {
            let s = self.shape(r);
            if s.rows != 1 || s != s0 {
                return Err(TensorError::Shape {
                    op: "stack_rows",
                    left: s0,
                    right: s,
                });
            }
        }
        let mut data = Vec::with_capacity(rows.len() * s0.cols);
        for &r in rows {
            data.extend_from_slice(self.value(r).data());
        }
        let out = Tensor::from_vec(rows.len(), s0.cols, data)?;
        Ok(self.push(out, Op::StackRows(rows.to_vec()), rows))
    }

    /// Row `index` of `x` as a `1 x n` tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Res {
        let s = self.shape(x);
        if index >= s.rows {
            return Err(TensorError::Contract {
                op: "row",
                reason: format!("row {index} out of range for {s}"),
            });
        }
        let out = Tensor::from_vec(1, s.cols, self.value(x).row(index).to_vec())?;
        Ok(self.push(out, Op::Row(x, index), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Res {
        let out = self.value(x).transpose();
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Res {
        let out = self.value(x).map(T::tanh);
        Ok(self.push(out, Op::Tanh(x), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Res {
        let out = self.value(x).map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Res {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        Ok(self.push(out, Op::Relu(x), &[x]))
    }

    /// Row-wise softmax, stabilised by subtracting the row maximum over kept
    /// entries. Masked entries are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&SoftmaxMask>) -> Res {
        let s = self.shape(x);
        if let Some(m) = mask {
            if m.rows != s.rows || m.cols != s.cols {
                return Err(TensorError::Shape {
                    op: "softmax_rows",
                    left: s,
                    right: Shape::new(m.rows, m.cols),
                });
            }
        }
        let xv = self.value(x);
        let mut data = vec![T::zero(); s.numel()];
        for r in 0..s.rows {
            let kept = |c: usize| mask.is_none_or(|m| m.keeps(r, c));
            let row = xv.row(r);
            let mut max = T::neg_infinity();
            for (c, &v) in row.iter().enumerate() {
                if kept(c) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                // No surviving entry in this row.
                if mask.is_some_and(|m| m.real_rows[r]) && s.cols > 0 {
                    return Err(TensorError::DegenerateMask { row: r });
                }
                continue;
            }
            let out = &mut data[r * s.cols..(r + 1) * s.cols];
            let mut total = T::zero();
            for (c, &v) in row.iter().enumerate() {
                if kept(c) {
                    let e = (v - max).exp();
                    out[c] = e;
                    total = total + e;
                }
            }
            for o in out.iter_mut() {
                *o = *o / total;
            }
        }
        let out = Tensor::from_vec(s.rows, s.cols, data)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Res {
        let out = Tensor::scalar(self.value(x).sum());
        Ok(self.push(out, Op::Sum(x), &[x]))
    }

    /// `scale * sum_i -ln(max(p[i, t_i], 1e-12))` over rows with a target.
    ///
    /// Rows whose target is `None` contribute nothing.
    pub fn nll(&mut self, probs: Var, targets: &[Option<usize>], scale: T) -> Res {
        let s = self.shape(probs);
        if targets.len() != s.rows {
            return Err(TensorError::Contract {
                op: "nll",
                reason: format!("{} targets for {s} probabilities", targets.len()),
            });
        }
        let floor = T::of(NLL_FLOOR);
        let pv = self.value(probs);
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= s.cols {
                    return Err(TensorError::Contract {
                        op: "nll",
                        reason: format!("class {t} out of range for {s}"),
                    });
                }
                total = total - pv.get(r, t).max(floor).ln();
            }
        }
        let out = Tensor::scalar(scale * total);
        Ok(self.push(
            out,
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                scale,
            },
            &[probs],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of trainable leaves are
    /// added to whatever they already hold.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let s = self.shape(loss);
        if s.numel() != 1 {
            return Err(TensorError::Contract {
                op: "backward",
                reason: format!("loss must be a scalar, got {s}"),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(&g) {
                            *a = *a + d;
                        }
                    }
                    None => {
                        let sh = node.value.shape();
                        node.grad = Some(Tensor::from_vec(sh.rows, sh.cols, g)?);
                    }
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let ys = node.value.shape();
        // Accumulates `f(k)` into the gradient of `v` for every element `k`.
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = dC * B^T
                acc(*a, &|ga| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            let mut s = T::zero();
                            for (&x, &w) in grow.iter().zip(brow) {
                                s = s + x * w;
                            }
                            ga[r * k + p] = ga[r * k + p] + s;
                        }
                    }
                });
                // dB = A^T * dC
                acc(*b, &|gb| {
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let a_rp = av.data()[r * k + p];
                            if a_rp == T::zero() {
                                continue;
                            }
                            let out = &mut gb[p * n..(p + 1) * n];
                            for (o, &x) in out.iter_mut().zip(grow) {
                                *o = *o + a_rp * x;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| {
                    for (o, &d) in gb.iter_mut().zip(g) {
                        *o = *o - d;
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|ga| {
                    for ((o, &d), &w) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + d * w;
                    }
                });
                acc(*b, &|gb| {
                    for ((o, &d), &w) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + d * w;
                    }
                });
            }
            Op::AddRow(x, b) => {
                acc(*x, &|gx| add_into(gx, g));
                acc(*b, &|gb| {
                    for row in g.chunks(ys.cols.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::ScaleRows(x, s) => {
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                let cols = ys.cols.max(1);
                acc(*x, &|gx| {
                    for (r, (orow, grow)) in gx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        for (o, &d) in orow.iter_mut().zip(grow) {
                            *o = *o + d * sv[r];
                        }
                    }
                });
                acc(*s, &|gs| {
                    for (r, (xrow, grow)) in xv.chunks(cols).zip(g.chunks(cols)).enumerate() {
                        let dot: T = xrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        gs[r] = gs[r] + dot;
                    }
                });
            }
            Op::Affine(x, scale) => {
                acc(*x, &|gx| {
                    for (o, &d) in gx.iter_mut().zip(g) {
                        *o = *o + *scale * d;
                    }
                });
            }
            Op::MulConst(x, factor) => {
                acc(*x, &|gx| {
                    for ((o, &d), &f) in gx.iter_mut().zip(g).zip(factor) {
                        *o = *o + d * f;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).cols;
                    acc(p, &|gp| {
                        for r in 0..ys.rows {
                            let src = &g[r * ys.cols + offset..r * ys.cols + offset + pc];
                            add_into(&mut gp[r * pc..(r + 1) * pc], src);
                        }
                    });
                    offset += pc;
                }
            }
            Op::StackRows(rows) => {
                for (r, &v) in rows.iter().enumerate() {
                    acc(v, &|gv| add_into(gv, &g[r * ys.cols..(r + 1) * ys.cols]));
                }
            }
            Op::Row(x, index) => {
                let cols = ys.cols;
                acc(*x, &|gx| add_into(&mut gx[index * cols..(index + 1) * cols], g));
            }
            Op::Transpose(x) => {
                // y is cols x rows of x
                let (xr, xc) = (ys.cols, ys.rows);
                acc(*x, &|gx| {
                    for r in 0..xr {
                        for c in 0..xc {
                            gx[r * xc + c] = gx[r * xc + c] + g[c * xr + r];
                        }
                    }
                });
            }
            Op::Tanh(x) => {
                acc(*x, &|gx| {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(y) {
                        *o = *o + d * (T::one() - v * v);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let bump = match self.fault {
                    Some(BackwardFault::SigmoidDerivative) => T::of(1.1),
                    None => T::one(),
                };
                acc(*x, &|gx| {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(y) {
                        *o = *o + d * v * (T::one() - v) * bump;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|gx| {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *o = *o + d;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = ys.cols.max(1);
                acc(*x, &|gx| {
                    for ((orow, grow), yrow) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((o, &d), &p) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o = *o + p * (d - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                acc(*x, &|gx| {
                    for o in gx.iter_mut() {
                        *o = *o + g[0];
                    }
                });
            }
            Op::Nll { probs, targets, scale } => {
                let pv = self.value(*probs);
                let cols = pv.cols();
                let floor = T::of(NLL_FLOOR);
                acc(*probs, &|gp| {
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let p = pv.get(r, t);
                            if p > floor {
                                let k = r * cols + t;
                                gp[k] = gp[k] - g[0] * *scale / p;
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o = *o + s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
