//! Wengert tape: reverse-mode AD via operation recording.
//!
//! Every primitive records a node holding its output value and enough
//! information to replay the chain rule in reverse. Nodes only reference
//! earlier nodes, so creation order is already topological and `backward`
//! visits each node exactly once.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::NumericsError;

/// Handle to a tape node. Cheap to copy; only valid for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    SoftmaxLastDim(Var),
    LogSoftmaxLastDim(Var),
    LayerNorm { input: Var, gamma: Var, beta: Var, normed: Tensor, inv_std: Vec<f64> },
    ConcatLastDim(Var, Var),
    ConcatRows(Var, Var),
    Reshape(Var),
    SliceLastDim { input: Var, start: usize, len: usize },
    SelectRows { input: Var, indices: Vec<usize> },
    Gather { input: Var, indices: Vec<usize> },
    MaskedFill { input: Var, mask: Tensor },
    AddBias(Var, Var),
    Sum(Var),
    Mean(Var),
    Rope { input: Var, base: f64 },
    Dropout { input: Var, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), NumericsError> {
    if a.shape() != b.shape() {
        return Err(NumericsError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    /// Insert a value that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Insert a trainable leaf; `backward` will populate its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`.
    /// `None` until backward has run or if `v` does not require grad.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, input: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[input.0].requires_grad;
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.binary(a, b, t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.binary(a, b, t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.binary(a, b, t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        same_shape("div", self.value(a), self.value(b))?;
        if self.value(b).data().iter().any(|v| *v == 0.0) {
            return Err(NumericsError::Domain { op: "div", detail: "zero denominator".into() });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x / y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.binary(a, b, t, Op::Div(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.unary(a, t, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.unary(a, t, Op::MulScalar(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    // ── matrix ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let t = matmul_values(av, bv);
        Ok(self.binary(a, b, t, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(NumericsError::InvalidArg {
                op: "transpose",
                detail: format!("need rank-2, got {:?}", av.shape()),
            });
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out).unwrap();
        Ok(self.unary(a, t, Op::Transpose(a)))
    }

    // ── nonlinearities ──────────────────────────────────────────────

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.exp()).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::Domain { op: "exp", detail: "overflow to non-finite".into() });
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.unary(a, t, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        if self.value(a).data().iter().any(|v| *v <= 0.0) {
            return Err(NumericsError::Domain { op: "log", detail: "non-positive input".into() });
        }
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.unary(a, t, Op::Log(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.unary(a, t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| sigmoid_scalar(*x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.unary(a, t, Op::Sigmoid(a))
    }

    /// Numerically stable ln(1 + e^x).
    pub fn softplus(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| softplus_scalar(*x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.unary(a, t, Op::Softplus(a))
    }

    /// Gradient passes only strictly inside (lo, hi).
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x.clamp(lo, hi)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.unary(a, t, Op::Clamp { input: a, lo, hi })
    }

    // ── rowwise ─────────────────────────────────────────────────────

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.unary(a, t, Op::SoftmaxLastDim(a))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data).unwrap();
        self.unary(a, t, Op::LogSoftmaxLastDim(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        let cols = xv.cols();
        if self.value(gamma).shape() != [cols] || self.value(beta).shape() != [cols] {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let rows = xv.rows();
        let mut normed = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normed[r * cols + c] = n;
                out[r * cols + c] = n * g[c] + b[c];
            }
        }
        let normed = Tensor::new(xv.shape().to_vec(), normed).unwrap();
        let t = Tensor::new(xv.shape().to_vec(), out).unwrap();
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        Ok(self.push(t, Op::LayerNorm { input: x, gamma, beta, normed, inv_std }, rg))
    }

    // ── shape ops ───────────────────────────────────────────────────

    pub fn concat_lastdim(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        let rank = av.shape().len();
        if rank != bv.shape().len() || rank == 0 || rank > 2 || (rank == 2 && av.shape()[0] != bv.shape()[0]) {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_lastdim",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let rows = av.rows();
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv.data()[r * cb..(r + 1) * cb]);
        }
        let shape = if rank == 1 { vec![ca + cb] } else { vec![rows, ca + cb] };
        let t = Tensor::new(shape, data).unwrap();
        Ok(self.binary(a, b, t, Op::ConcatLastDim(a, b)))
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() {
            return Err(NumericsError::InvalidArg {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", av.shape(), shape),
            });
        }
        let t = Tensor::new(shape.to_vec(), av.data().to_vec()).unwrap();
        Ok(self.unary(a, t, Op::Reshape(a)))
    }

    /// Stack two matrices vertically.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_rows",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = av.shape()[1];
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let t = Tensor::new(vec![av.shape()[0] + bv.shape()[0], cols], data).unwrap();
        Ok(self.binary(a, b, t, Op::ConcatRows(a, b)))
    }

    pub fn slice_lastdim(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let av = self.value(a);
        let cols = av.cols();
        if start + len > cols {
            return Err(NumericsError::InvalidArg {
                op: "slice_lastdim",
                detail: format!("range {}..{} out of {} columns", start, start + len, cols),
            });
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * cols + start..r * cols + start + len]);
        }
        let shape = if av.shape().len() == 1 { vec![len] } else { vec![rows, len] };
        let t = Tensor::new(shape, data).unwrap();
        Ok(self.unary(a, t, Op::SliceLastDim { input: a, start, len }))
    }

    /// Embedding-style row select; rows may repeat.
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.shape().len() != 2 {
            return Err(NumericsError::InvalidArg {
                op: "select_rows",
                detail: format!("need rank-2, got {:?}", av.shape()),
            });
        }
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::InvalidArg {
                op: "select_rows",
                detail: format!("row index {} out of {}", bad, rows),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&av.data()[i * cols..(i + 1) * cols]);
        }
        let t = Tensor::new(vec![indices.len(), cols], data).unwrap();
        Ok(self.unary(a, t, Op::SelectRows { input: a, indices: indices.to_vec() }))
    }

    /// Element gather from a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.shape().len() != 1 {
            return Err(NumericsError::InvalidArg {
                op: "gather",
                detail: format!("need rank-1, got {:?}", av.shape()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.len()) {
            return Err(NumericsError::InvalidArg {
                op: "gather",
                detail: format!("index {} out of {}", bad, av.len()),
            });
        }
        let data = indices.iter().map(|&i| av.data()[i]).collect();
        let t = Tensor::from_vec(data);
        Ok(self.unary(a, t, Op::Gather { input: a, indices: indices.to_vec() }))
    }

    /// Where `mask` is nonzero the output takes `fill` and the gradient is
    /// blocked; elsewhere the input passes through.
    pub fn masked_fill(&mut self, a: Var, mask: &Tensor, fill: f64) -> Result<Var, NumericsError> {
        same_shape("masked_fill", self.value(a), mask)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| if *m != 0.0 { fill } else { *x })
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.unary(a, t, Op::MaskedFill { input: a, mask: mask.clone() }))
    }

    /// Broadcast-add a bias row to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.shape().len() != 1 || bv.shape()[0] != xv.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, bb) in row.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data).unwrap();
        Ok(self.binary(x, b, t, Op::AddBias(x, b)))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.unary(a, Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.unary(a, Tensor::scalar(s / n), Op::Mean(a))
    }

    /// Dot product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    // ── positional / stochastic ─────────────────────────────────────

    /// Rotary position encoding over a [T, d] matrix (d even), row index =
    /// position. Split-half convention: (x1, x2) -> (x1 cos + x2 sin,
    /// -x1 sin + x2 cos) with per-pair frequency base^(-2i/d).
    pub fn rope(&mut self, a: Var, base: f64) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.shape().len() != 2 || av.cols() % 2 != 0 {
            return Err(NumericsError::InvalidArg {
                op: "rope",
                detail: format!("need rank-2 with even columns, got {:?}", av.shape()),
            });
        }
        let t = rope_values(av, base, false);
        Ok(self.unary(a, t, Op::Rope { input: a, base }))
    }

    /// Inverted dropout with explicit RNG; `p` is the drop probability.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidArg {
                op: "dropout",
                detail: format!("p={} outside [0,1)", p),
            });
        }
        if p == 0.0 {
            let v = self.value(a).clone();
            // Identity mask keeps the node count independent of p.
            let mask = vec![1.0; v.len()];
            return Ok(self.unary(a, v, Op::Dropout { input: a, mask }));
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> =
            (0..self.value(a).len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale }).collect();
        let data = self.value(a).data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.unary(a, t, Op::Dropout { input: a, mask }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Populates gradients of every
    /// ancestor that requires grad.
    pub fn backward(&mut self, root: Var) -> Result<(), NumericsError> {
        if self.value(root).len() != 1 {
            return Err(NumericsError::NonScalarRoot { shape: self.value(root).shape().to_vec() });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gv, d) in g.data_mut().iter_mut().zip(delta) {
                    *gv += d;
                }
            }
            None => {
                *slot = Some(Tensor::new(shape, delta.to_vec()).unwrap());
            }
        }
    }

    fn propagate(&mut self, node_idx: usize, g: &Tensor) {
        // Ops are moved out temporarily so we can borrow self mutably.
        let op = std::mem::replace(&mut self.nodes[node_idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.data());
                self.accumulate(*b, g.data());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.data());
                let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                self.accumulate(*b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> =
                    g.data().iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> =
                    g.data().iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data().to_vec();
                let av = self.value(*a).data().to_vec();
                let da: Vec<f64> = g.data().iter().zip(&bv).map(|(g, y)| g / y).collect();
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.iter().zip(&bv))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::AddScalar(a) => self.accumulate(*a, g.data()),
            Op::MulScalar(a, c) => {
                let da: Vec<f64> = g.data().iter().map(|v| v * c).collect();
                self.accumulate(*a, &da);
            }
            Op::Matmul(a, b) => {
                // dA = G B^T, dB = A^T G
                let gv = g;
                let av = self.value(*a);
                let bv = self.value(*b);
                let da = matmul_nt(gv, bv);
                let db = matmul_tn(av, gv);
                self.accumulate(*a, da.data());
                self.accumulate(*b, db.data());
            }
            Op::Transpose(a) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] = g.data()[i * n + j];
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::Exp(a) => {
                let out = self.nodes[node_idx].value.data().to_vec();
                let da: Vec<f64> = g.data().iter().zip(&out).map(|(g, y)| g * y).collect();
                self.accumulate(*a, &da);
            }
            Op::Log(a) => {
                let xv = self.value(*a).data().to_vec();
                let da: Vec<f64> = g.data().iter().zip(&xv).map(|(g, x)| g / x).collect();
                self.accumulate(*a, &da);
            }
            Op::Tanh(a) => {
                let out = self.nodes[node_idx].value.data().to_vec();
                let da: Vec<f64> = g.data().iter().zip(&out).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(*a, &da);
            }
            Op::Sigmoid(a) => {
                let out = self.nodes[node_idx].value.data().to_vec();
                let da: Vec<f64> =
                    g.data().iter().zip(&out).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(*a, &da);
            }
            Op::Softplus(a) => {
                let xv = self.value(*a).data().to_vec();
                let da: Vec<f64> =
                    g.data().iter().zip(&xv).map(|(g, x)| g * sigmoid_scalar(*x)).collect();
                self.accumulate(*a, &da);
            }
            Op::Clamp { input, lo, hi } => {
                let xv = self.value(*input).data().to_vec();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(&xv)
                    .map(|(g, x)| if *x > *lo && *x < *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(*input, &da);
            }
            Op::SoftmaxLastDim(a) => {
                let out = self.nodes[node_idx].value.clone();
                let cols = out.cols();
                let mut da = vec![0.0; out.len()];
                for (r, (orow, grow)) in out.data().chunks(cols).zip(g.data().chunks(cols)).enumerate() {
                    let dot: f64 = orow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for c in 0..cols {
                        da[r * cols + c] = orow[c] * (grow[c] - dot);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LogSoftmaxLastDim(a) => {
                let out = self.nodes[node_idx].value.clone();
                let cols = out.cols();
                let mut da = vec![0.0; out.len()];
                for (r, (orow, grow)) in out.data().chunks(cols).zip(g.data().chunks(cols)).enumerate() {
                    let gsum: f64 = grow.iter().sum();
                    for c in 0..cols {
                        da[r * cols + c] = grow[c] - orow[c].exp() * gsum;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LayerNorm { input, gamma, beta, normed, inv_std } => {
                let cols = normed.cols();
                let rows = normed.rows();
                let gm = self.value(*gamma).data().to_vec();
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let nrow = &normed.data()[r * cols..(r + 1) * cols];
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let is = inv_std[r];
                    // dxhat = g * gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for c in 0..cols {
                        let dxh = grow[c] * gm[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * nrow[c];
                        dgamma[c] += grow[c] * nrow[c];
                        dbeta[c] += grow[c];
                    }
                    let inv_n = 1.0 / cols as f64;
                    for c in 0..cols {
                        let dxh = grow[c] * gm[c];
                        dx[r * cols + c] =
                            (dxh - sum_dxh * inv_n - nrow[c] * sum_dxh_xh * inv_n) * is;
                    }
                }
                self.accumulate(*input, &dx);
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::ConcatLastDim(a, b) => {
                let (ca, cb) = (self.value(*a).cols(), self.value(*b).cols());
                let rows = self.value(*a).rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = &g.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Reshape(a) => {
                self.accumulate(*a, g.data());
            }
            Op::ConcatRows(a, b) => {
                let na = self.value(*a).len();
                self.accumulate(*a, &g.data()[..na]);
                self.accumulate(*b, &g.data()[na..]);
            }
            Op::SliceLastDim { input, start, len } => {
                let cols = self.value(*input).cols();
                let rows = self.value(*input).rows();
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..*len {
                        da[r * cols + start + c] = g.data()[r * len + c];
                    }
                }
                self.accumulate(*input, &da);
            }
            Op::SelectRows { input, indices } => {
                let cols = self.value(*input).cols();
                let rows = self.value(*input).rows();
                let mut da = vec![0.0; rows * cols];
                for (k, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        da[i * cols + c] += g.data()[k * cols + c];
                    }
                }
                self.accumulate(*input, &da);
            }
            Op::Gather { input, indices } => {
                let mut da = vec![0.0; self.value(*input).len()];
                for (k, &i) in indices.iter().enumerate() {
                    da[i] += g.data()[k];
                }
                self.accumulate(*input, &da);
            }
            Op::MaskedFill { input, mask } => {
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(mask.data())
                    .map(|(g, m)| if *m != 0.0 { 0.0 } else { *g })
                    .collect();
                self.accumulate(*input, &da);
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, g.data());
                let cols = self.value(*b).len();
                let mut db = vec![0.0; cols];
                for row in g.data().chunks(cols) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
                self.accumulate(*b, &db);
            }
            Op::Sum(a) => {
                let da = vec![g.item(); self.value(*a).len()];
                self.accumulate(*a, &da);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let da = vec![g.item() / n as f64; n];
                self.accumulate(*a, &da);
            }
            Op::Rope { input, base } => {
                // The rotation is orthogonal; its VJP rotates by the
                // negated angles.
                let da = rope_values(g, *base, true);
                self.accumulate(*input, da.data());
            }
            Op::Dropout { input, mask } => {
                let da: Vec<f64> = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(*input, &da);
            }
        }
        self.nodes[node_idx].op = op;
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// A * B^T without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    debug_assert_eq!(k, b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data()[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

/// A^T * B without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(k, b.shape()[0]);
    let mut out = vec![0.0; m * n];
    for kk in 0..k {
        let arow = &a.data()[kk * m..(kk + 1) * m];
        let brow = &b.data()[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).unwrap()
}

fn rope_values(x: &Tensor, base: f64, invert: bool) -> Tensor {
    let rows = x.rows();
    let cols = x.cols();
    let half = cols / 2;
    let mut out = vec![0.0; rows * cols];
    let sign = if invert { -1.0 } else { 1.0 };
    for t in 0..rows {
        for i in 0..half {
            let theta = (t as f64) * base.powf(-2.0 * i as f64 / cols as f64);
            let (sin, cos) = (sign * theta.sin(), theta.cos());
            let x1 = x.data()[t * cols + i];
            let x2 = x.data()[t * cols + half + i];
            out[t * cols + i] = x1 * cos + x2 * sin;
            out[t * cols + half + i] = -x1 * sin + x2 * cos;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}
