//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation pushes one record holding its output value and the rule
//! needed to route gradients back to its inputs. Records are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Tape::backward`] visits each record exactly once, in reverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{NnError, Result};
use crate::functional::{self, gelu, gelu_grad, sigmoid};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Backward rule for an operation defined outside this crate.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` for inputs that receive none).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Input,
    Leaf,
    Param,
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>, Axis),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Dropout(Var, Vec<T>),
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    Bce(Var, Vec<T>),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Input | Leaf | Param => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            Affine(x, w, b) => vec![*x, *w, *b],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Scale(a, _)
            | SliceCols(a, _)
            | SliceRows(a, _)
            | GatherRows(a, _)
            | Transpose(a)
            | Reshape(a)
            | Softmax(a)
            | Gelu(a)
            | Tanh(a)
            | Sigmoid(a)
            | Relu(a)
            | Dropout(a, _)
            | Sum(a)
            | Mean(a)
            | SumCols(a)
            | Bce(a, _) => vec![*a],
            Concat(parts, _) => parts.clone(),
            Custom(parts, _) => parts.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape for one forward/backward pass.
///
/// A tape is single-threaded by construction; build one per sample or batch.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
    bound: Vec<Option<Var>>,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NnError {
    NnError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn col_sums<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let (r, c) = g.dims2().expect("rank checked at record time");
    let mut out = vec![T::zero(); c];
    for i in 0..r {
        for (o, &x) in out.iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    Tensor::row_vector(out)
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            bound: Vec::new(),
        }
    }

    /// Training-mode tape whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Input => false,
            Op::Leaf | Op::Param => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient flows into it).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a differentiable leaf not owned by a [`ParamStore`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter, recording it on first use only.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let slot = id.index();
        if self.bound.len() <= slot {
            self.bound.resize(slot + 1, None);
        }
        if let Some(v) = self.bound[slot] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.bound[slot] = Some(v);
        v
    }

    /// Records an externally computed value with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var {
        self.push(output, Op::Custom(inputs, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x · w + b` with `x: [m, k]`, `w: [k, n]`, `b: [1, n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(x)?;
        let (k2, n) = self.dims(w)?;
        let (br, bc) = self.dims(b)?;
        if k != k2 {
            return Err(mismatch("affine", self.shape(x), self.shape(w)));
        }
        if br != 1 || bc != n {
            return Err(mismatch("affine bias", self.shape(w), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        let bias = self.value(b).data();
        for row in out.chunks_mut(n.max(1)) {
            row.copy_from_slice(bias);
        }
        T::gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            true,
        );
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::Affine(x, w, b)))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds the `[1, n]` row `r` to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let (rr, rc) = self.dims(r)?;
        if rr != 1 || rc != n {
            return Err(mismatch("add_row", self.shape(a), self.shape(r)));
        }
        let row = self.value(r).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (x, &y) in out.row_mut(i).iter_mut().zip(&row) {
                *x += y;
            }
        }
        Ok(self.push(out, Op::AddRow(a, r)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        Ok(self.push(out, Op::Scale(a, c)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(NnError::Invalid("concat of zero tensors".into()));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.dims(p)).collect::<Result<_>>()?;
        let out = match axis {
            Axis::Rows => {
                let cols = dims[0].1;
                let mut data = Vec::new();
                for (&p, d) in parts.iter().zip(&dims) {
                    if d.1 != cols {
                        return Err(mismatch("concat rows", self.shape(parts[0]), self.shape(p)));
                    }
                    data.extend_from_slice(self.value(p).data());
                }
                let rows = dims.iter().map(|d| d.0).sum();
                Tensor::matrix(rows, cols, data)?
            }
            Axis::Cols => {
                let rows = dims[0].0;
                for (&p, d) in parts.iter().zip(&dims) {
                    if d.0 != rows {
                        return Err(mismatch("concat cols", self.shape(parts[0]), self.shape(p)));
                    }
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::matrix(rows, cols, data)?
            }
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if start > end || end > n {
            return Err(NnError::OutOfBounds {
                op: "slice_cols",
                index: end,
                extent: n,
            });
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let out = Tensor::matrix(m, end - start, data)?;
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if start > end || end > m {
            return Err(NnError::OutOfBounds {
                op: "slice_rows",
                index: end,
                extent: m,
            });
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let out = Tensor::matrix(end - start, n, data)?;
        Ok(self.push(out, Op::SliceRows(a, start)))
    }

    /// Row lookup: output row `r` is row `idx[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(NnError::OutOfBounds {
                    op: "gather_rows",
                    index: i,
                    extent: m,
                });
            }
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::matrix(idx.len(), n, data)?;
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Row-wise softmax; `-inf` entries are masked to exactly zero.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.dims(a)?;
        let mut out = self.value(a).clone();
        for i in 0..m {
            functional::softmax_in_place(out.row_mut(i)).map_err(|_| NnError::FullyMasked { row: i })?;
        }
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Per-row normalization over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        for p in [gain, bias] {
            if self.dims(p)? != (1, n) {
                return Err(mismatch("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = T::lit(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = src.row(i);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        Ok(self.push(out, Op::Gelu(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        Ok(self.push(out, Op::Tanh(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        Ok(self.push(out, Op::Sigmoid(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        Ok(self.push(out, Op::Relu(a)))
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
    /// Identity when the tape is not training or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Invalid(format!("dropout rate {p} outside [0, 1)")));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.push(out, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(NnError::Invalid("mean of empty tensor".into()));
        }
        let out = Tensor::scalar(self.value(a).sum() / T::lit(n as f64));
        Ok(self.push(out, Op::Mean(a)))
    }

    /// Sums each row: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.dims(a)?;
        let src = self.value(a);
        let data = (0..m).map(|i| src.row(i).iter().copied().sum()).collect();
        let out = Tensor::matrix(m, 1, data)?;
        Ok(self.push(out, Op::SumCols(a)))
    }

    /// Mean binary cross-entropy with logits over all entries of `logits`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let src = self.value(logits);
        if src.len() != targets.len() || targets.is_empty() {
            return Err(mismatch("bce_with_logits", src.shape(), &[targets.len()]));
        }
        let total: T = src
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| functional::bce_with_logits(x, y))
            .sum();
        let out = Tensor::scalar(total / T::lit(targets.len() as f64));
        Ok(self.push(out, Op::Bce(logits, targets.to_vec())))
    }

    /// Runs the reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(NnError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_value.shape().to_vec()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::Input => {}
                op => self.route(op, &node.value, &g, &mut grads)?,
            }
        }

        let params = self
            .bound
            .iter()
            .enumerate()
            .filter_map(|(slot, v)| v.map(|v| (ParamId::from_index(slot), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn route(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut send = |v: Var, t: Tensor<T>| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match op {
            Op::Input | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2()?;
                let n = tb.cols();
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, tb.data(), true, &mut ga, false);
                    send(*a, Tensor::new(ta.shape().to_vec(), ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, ta.data(), true, g.data(), false, &mut gb, false);
                    send(*b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
            }
            Op::Affine(x, w, b) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (m, k) = tx.dims2()?;
                let n = tw.cols();
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, tw.data(), true, &mut gx, false);
                    send(*x, Tensor::new(tx.shape().to_vec(), gx)?);
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, tx.data(), true, g.data(), false, &mut gw, false);
                    send(*w, Tensor::new(tw.shape().to_vec(), gw)?);
                }
                if self.needs(*b) {
                    let gb = col_sums(g).reshape(self.shape(*b).to_vec())?;
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    send(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    send(*b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::AddRow(a, r) => {
                send(*a, g.clone());
                if self.needs(*r) {
                    send(*r, col_sums(g).reshape(self.shape(*r).to_vec())?);
                }
            }
            Op::Scale(a, c) => send(*a, g.map(|x| x * *c)),
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let piece = g.data()[offset..offset + len].to_vec();
                        offset += len;
                        if self.needs(p) {
                            let rows = if cols == 0 { 0 } else { len / cols };
                            let t = Tensor::matrix(rows, cols, piece)?
                                .reshape(self.shape(p).to_vec())?;
                            send(p, t);
                        }
                    }
                }
                Axis::Cols => {
                    let rows = g.rows();
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            let mut d = Vec::with_capacity(rows * w);
                            for i in 0..rows {
                                d.extend_from_slice(&g.row(i)[start..start + w]);
                            }
                            send(p, Tensor::matrix(rows, w, d)?.reshape(self.shape(p).to_vec())?);
                        }
                        start += w;
                    }
                }
            },
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let (m, n) = src.dims2()?;
                let w = out.cols();
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                }
                send(*a, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let n = src.cols();
                let mut d = vec![T::zero(); src.len()];
                d[start * n..start * n + g.len()].copy_from_slice(g.data());
                send(*a, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let n = src.cols();
                let mut d = vec![T::zero(); src.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, &x) in d[i * n..(i + 1) * n].iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                send(*a, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::Transpose(a) => {
                let t = g.transpose()?.reshape(self.shape(*a).to_vec())?;
                send(*a, t);
            }
            Op::Reshape(a) => send(*a, g.clone().reshape(self.shape(*a).to_vec())?),
            Op::Softmax(a) => {
                let (m, n) = out.dims2()?;
                let mut d = vec![T::zero(); m * n];
                for i in 0..m {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let dot: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        d[i * n + j] = y[j] * (gy[j] - dot);
                    }
                }
                send(*a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, n) = out.dims2()?;
                let gv = self.value(*gain).data();
                if self.needs(*x) {
                    let nf = T::lit(n as f64);
                    let mut d = vec![T::zero(); m * n];
                    for i in 0..m {
                        let gy = g.row(i);
                        let h = &xhat[i * n..(i + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            let dh = gy[j] * gv[j];
                            s1 += dh;
                            s2 += dh * h[j];
                        }
                        for j in 0..n {
                            let dh = gy[j] * gv[j];
                            d[i * n + j] = rstd[i] / nf * (nf * dh - s1 - h[j] * s2);
                        }
                    }
                    send(*x, Tensor::new(self.shape(*x).to_vec(), d)?);
                }
                if self.needs(*gain) {
                    let mut d = vec![T::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            d[j] += g.row(i)[j] * xhat[i * n + j];
                        }
                    }
                    send(*gain, Tensor::new(self.shape(*gain).to_vec(), d)?);
                }
                if self.needs(*bias) {
                    send(*bias, col_sums(g).reshape(self.shape(*bias).to_vec())?);
                }
            }
            Op::Gelu(a) => {
                let src = self.value(*a);
                let d = g.data().iter().zip(src.data()).map(|(&gy, &x)| gy * gelu_grad(x)).collect();
                send(*a, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::Tanh(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gy, &y)| gy * (T::one() - y * y)).collect();
                send(*a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(&gy, &y)| gy * y * (T::one() - y)).collect();
                send(*a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Relu(a) => {
                let src = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(src.data())
                    .map(|(&gy, &x)| if x > T::zero() { gy } else { T::zero() })
                    .collect();
                send(*a, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::Dropout(a, mask) => {
                let d = g.data().iter().zip(mask).map(|(&gy, &m)| gy * m).collect();
                send(*a, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::Sum(a) => send(*a, Tensor::full(self.shape(*a).to_vec(), g.item())),
            Op::Mean(a) => {
                let n = T::lit(self.value(*a).len() as f64);
                send(*a, Tensor::full(self.shape(*a).to_vec(), g.item() / n));
            }
            Op::SumCols(a) => {
                let src = self.value(*a);
                let (m, n) = src.dims2()?;
                let mut d = Vec::with_capacity(m * n);
                for i in 0..m {
                    d.extend(std::iter::repeat(g.data()[i]).take(n));
                }
                send(*a, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::Bce(a, targets) => {
                let src = self.value(*a);
                let scale = g.item() / T::lit(targets.len() as f64);
                let d = src
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| (sigmoid(x) - y) * scale)
                    .collect();
                send(*a, Tensor::new(src.shape().to_vec(), d)?);
            }
            Op::Custom(inputs, rule) => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let routed = rule.backward(&values, out, g);
                if routed.len() != inputs.len() {
                    return Err(NnError::Invalid(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        rule.name(),
                        routed.len(),
                        inputs.len()
                    )));
                }
                for (&v, t) in inputs.iter().zip(routed) {
                    if let Some(t) = t {
                        if t.shape() != self.shape(v) {
                            return Err(mismatch(rule.name(), t.shape(), self.shape(v)));
                        }
                        send(v, t);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep: gradients of differentiable leaves.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds parameter gradients into `acc` (aligned with the store order).
    pub fn accumulate_into(&self, acc: &mut [Tensor<T>]) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                acc[id.index()].add_assign(g);
            }
        }
    }

    /// Parameter gradients aligned with `store`; unused parameters get zeros.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut acc = store.zeros_like();
        self.accumulate_into(&mut acc);
        acc
    }
}
