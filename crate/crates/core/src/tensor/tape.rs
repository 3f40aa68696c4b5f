//! Single-use recording tape for reverse-mode differentiation.
//!
//! Every primitive validates shapes eagerly, computes its value, and appends
//! one node. `backward` walks the record in reverse topological order (which
//! is simply reverse insertion order) and accumulates adjoints for tracked
//! nodes only; untracked subgraphs never materialize gradients.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise nonlinearity kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a` is a one-element tensor broadcast over `b`.
    ScalarMul(Var, Var),
    Scale(Var, F),
    MatMul(Var, Var),
    Transpose(Var),
    /// Row-broadcast bias add: `[T,d] + [d]`.
    AddBias(Var, Var),
    Concat0(Vec<Var>),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
        len: usize,
    },
    Act(Var, Activation),
    Sqrt(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    MeanAxis0(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        label: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        dilation: usize,
    },
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: Tensor<F>,
    tracked: bool,
}

/// Gradients returned by [`Tape::backward`], indexed by the vars they belong to.
pub struct Grads<F: Scalar> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<F> {
        &self.nodes[var.0].value
    }

    /// Record a leaf; its `grad_tracked` flag decides gradient materialization.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let tracked = t.tracked();
        self.push(Op::Leaf, t, tracked)
    }

    /// Record an untracked leaf regardless of the tensor's flag.
    pub fn constant(&mut self, mut t: Tensor<F>) -> Var {
        t.set_tracked(false);
        self.push(Op::Leaf, t, false)
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add(a, b), data, t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Sub(a, b), data, t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Mul(a, b), data, t))
    }

    /// Broadcast multiply by a one-element tensor (gates, learnable scales).
    pub fn scalar_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).numel() != 1 {
            return Err(Error::Shape(format!(
                "scalar_mul: first operand must have one element, got {:?}",
                self.value(a).shape()
            )));
        }
        let s = self.value(a).data()[0];
        let vb = self.value(b);
        let out = Tensor::new(vb.shape().to_vec(), vb.data().iter().map(|&x| s * x).collect())?;
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::ScalarMul(a, b), out, t))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let vx = self.value(x);
        let out = Tensor {
            shape: vx.shape().to_vec(),
            data: vx.data().iter().map(|&v| c * v).collect(),
            grad_tracked: false,
        };
        let t = self.tracked(x);
        self.push(Op::Scale(x, c), out, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2().map_err(|_| {
            Error::Shape(format!("matmul lhs must be rank 2, got {:?}", self.value(a).shape()))
        })?;
        let (k2, p) = self.value(b).dims2().map_err(|_| {
            Error::Shape(format!("matmul rhs must be rank 2, got {:?}", self.value(b).shape()))
        })?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); m * p];
        for i in 0..m {
            for kk in 0..k {
                let av = da[i * k + kk];
                if av == F::zero() {
                    continue;
                }
                let brow = &db[kk * p..(kk + 1) * p];
                let orow = &mut out[i * p..(i + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * bv;
                }
            }
        }
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, p], out)?, t))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let d = self.value(x).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let t = self.tracked(x);
        Ok(self.push(Op::Transpose(x), Tensor::new(vec![c, r], out)?, t))
    }

    /// `x: [T,d]` plus row-broadcast `b: [d]`; rank-1 `x` degenerates to add.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let vb = self.value(b);
        if vb.rank() != 1 {
            return Err(Error::Shape(format!("bias must be rank 1, got {:?}", vb.shape())));
        }
        let d = vb.shape()[0];
        let vx = self.value(x);
        let out = match vx.shape() {
            [n] if *n == d => {
                Tensor::vector(vx.data().iter().zip(vb.data()).map(|(&a, &c)| a + c).collect())
            }
            [t, dd] if *dd == d => {
                let mut data = vx.data().to_vec();
                for row in 0..*t {
                    for j in 0..d {
                        data[row * d + j] = data[row * d + j] + vb.data()[j];
                    }
                }
                Tensor::new(vec![*t, d], data)?
            }
            other => {
                return Err(Error::Shape(format!(
                    "add_bias: input {other:?} incompatible with bias [{d}]"
                )))
            }
        };
        let tr = self.tracked(x) || self.tracked(b);
        Ok(self.push(Op::AddBias(x, b), out, tr))
    }

    /// Stack rank-2 tensors along axis 0.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat0 of zero tensors".into()));
        }
        let (_, c0) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != c0 {
                return Err(Error::Shape(format!(
                    "concat0 column mismatch: {c} vs {c0}"
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let tr = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Op::Concat0(parts.to_vec()), Tensor::new(vec![rows, c0], data)?, tr))
    }

    /// Contiguous slice along one axis of a rank-1 or rank-2 tensor.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("narrow axis {axis} on shape {shape:?}")));
        }
        if start + len > shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow [{start}..{}) out of extent {} on axis {axis}",
                start + len,
                shape[axis]
            )));
        }
        let out = match shape[..] {
            [_] => Tensor::vector(vx.data()[start..start + len].to_vec()),
            [r, c] => {
                if axis == 0 {
                    Tensor::new(vec![len, c], vx.data()[start * c..(start + len) * c].to_vec())?
                } else {
                    let mut data = Vec::with_capacity(r * len);
                    for i in 0..r {
                        data.extend_from_slice(&vx.data()[i * c + start..i * c + start + len]);
                    }
                    Tensor::new(vec![r, len], data)?
                }
            }
            _ => return Err(Error::Shape(format!("narrow supports rank <= 2, got {shape:?}"))),
        };
        let tr = self.tracked(x);
        Ok(self.push(Op::Narrow { x, axis, start, len }, out, tr))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| apply_act(v, kind)).collect();
        let out = Tensor { shape: vx.shape().to_vec(), data, grad_tracked: false };
        let t = self.tracked(x);
        self.push(Op::Act(x, kind), out, t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// View the same row-major data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let numel: usize = shape.iter().product();
        if numel != vx.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                vx.shape()
            )));
        }
        let out = Tensor { shape, data: vx.data().to_vec(), grad_tracked: false };
        let t = self.tracked(x);
        Ok(self.push(Op::Reshape(x), out, t))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.sqrt()).collect();
        let out = Tensor { shape: vx.shape().to_vec(), data, grad_tracked: false };
        let t = self.tracked(x);
        self.push(Op::Sqrt(x), out, t)
    }

    /// Max-subtracted softmax along `axis` of a rank-1 or rank-2 tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} on shape {shape:?}")));
        }
        let mut data = vx.data().to_vec();
        for_each_lane(&shape, axis, |idx_stride| {
            softmax_lane(&mut data, idx_stride);
        });
        let out = Tensor::new(shape, data)?;
        let t = self.tracked(x);
        Ok(self.push(Op::Softmax { x, axis }, out, t))
    }

    /// Normalize over the last axis with population variance, then apply the
    /// `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        if d == 0 {
            return Err(Error::Shape("layer_norm over zero-width axis".into()));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let s = self.value(v).shape();
            if s != [d] {
                return Err(Error::Shape(format!(
                    "layer_norm {name} shape {s:?}, expected [{d}]"
                )));
            }
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut data = vx.data().to_vec();
        let rows = data.len() / d;
        for r in 0..rows {
            let row = &mut data[r * d..(r + 1) * d];
            let (mean, inv_std) = row_stats::<F>(row, eps);
            for j in 0..d {
                row[j] = (row[j] - mean) * inv_std * g[j] + bt[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let t = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, out, t))
    }

    /// Mean over the leading axis: `[T,c] -> [c]`, `[T] -> [1]`.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let out = match vx.shape() {
            [t] => {
                let inv = F::fl(1.0 / *t as f64);
                let s = vx.data().iter().fold(F::zero(), |acc, &v| acc + v);
                Tensor::scalar(s * inv)
            }
            [t, c] => {
                let inv = F::fl(1.0 / *t as f64);
                let mut acc = vec![F::zero(); *c];
                for row in 0..*t {
                    for j in 0..*c {
                        acc[j] = acc[j] + vx.data()[row * c + j];
                    }
                }
                for a in &mut acc {
                    *a = *a * inv;
                }
                Tensor::vector(acc)
            }
            other => return Err(Error::Shape(format!("mean_axis0 on shape {other:?}"))),
        };
        let t = self.tracked(x);
        Ok(self.push(Op::MeanAxis0(x), out, t))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(F::zero(), |acc, &v| acc + v);
        let t = self.tracked(x);
        self.push(Op::SumAll(x), Tensor::scalar(s), t)
    }

    /// `-log softmax(logits)[label]`, numerically stabilized.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rank() != 1 {
            return Err(Error::Shape(format!(
                "cross_entropy expects rank-1 logits, got {:?}",
                vl.shape()
            )));
        }
        let c = vl.shape()[0];
        if label >= c {
            return Err(Error::Input(format!("label {label} out of range for {c} classes")));
        }
        let d = vl.data();
        let m = d.iter().cloned().fold(F::neg_infinity(), F::max);
        let lse = d.iter().fold(F::zero(), |acc, &v| acc + (v - m).exp()).ln() + m;
        let loss = lse - d[label];
        let t = self.tracked(logits);
        Ok(self.push(Op::CrossEntropy { logits, label }, Tensor::scalar(loss), t))
    }

    /// 1-D convolution: `x [T,c_in]`, `w [c_out,k,c_in]`, `b [c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, dilation: usize) -> Result<Var> {
        if stride == 0 || dilation == 0 {
            return Err(Error::Config("conv1d stride/dilation must be positive".into()));
        }
        let (t_in, c_in) = self.value(x).dims2()?;
        let ws = self.value(w).shape().to_vec();
        let (c_out, k, c_in2) = match ws[..] {
            [o, k, i] => (o, k, i),
            _ => return Err(Error::Shape(format!("conv1d weight must be rank 3, got {ws:?}"))),
        };
        if c_in2 != c_in {
            return Err(Error::Shape(format!(
                "conv1d channel mismatch: input {c_in}, weight {c_in2}"
            )));
        }
        if self.value(b).shape() != [c_out] {
            return Err(Error::Shape(format!(
                "conv1d bias shape {:?}, expected [{c_out}]",
                self.value(b).shape()
            )));
        }
        let span = (k - 1) * dilation + 1;
        if t_in < span {
            return Err(Error::Input(format!(
                "conv1d input length {t_in} below receptive span {span}"
            )));
        }
        let t_out = (t_in - span) / stride + 1;
        let (dx, dw, db) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![F::zero(); t_out * c_out];
        for t in 0..t_out {
            for o in 0..c_out {
                let mut acc = db[o];
                for kk in 0..k {
                    let ti = t * stride + kk * dilation;
                    let xrow = &dx[ti * c_in..(ti + 1) * c_in];
                    let wrow = &dw[(o * k + kk) * c_in..(o * k + kk + 1) * c_in];
                    for (xv, wv) in xrow.iter().zip(wrow) {
                        acc = acc + *xv * *wv;
                    }
                }
                out[t * c_out + o] = acc;
            }
        }
        let tr = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(
            Op::Conv1d { x, w, b, stride, dilation },
            Tensor::new(vec![t_out, c_out], out)?,
            tr,
        ))
    }

    /// Reverse pass from a scalar loss. Returns gradients for tracked vars.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            adj[loss.0] = Some(vec![F::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            self.propagate(idx, &dy, &mut adj);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                adj[idx] = Some(dy);
            }
        }
        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor {
                    shape: self.nodes[i].value.shape().to_vec(),
                    data,
                    grad_tracked: false,
                })
            })
            .collect();
        Ok(Grads { grads })
    }

    fn accum(&self, adj: &mut [Option<Vec<F>>], v: Var, contrib: Vec<F>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, idx: usize, dy: &[F], adj: &mut [Option<Vec<F>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(adj, *a, dy.to_vec());
                self.accum(adj, *b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(adj, *a, dy.to_vec());
                self.accum(adj, *b, dy.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accum(adj, *a, dy.iter().zip(vb).map(|(&d, &v)| d * v).collect());
                self.accum(adj, *b, dy.iter().zip(va).map(|(&d, &v)| d * v).collect());
            }
            Op::ScalarMul(a, b) => {
                let s = self.value(*a).data()[0];
                let vb = self.value(*b).data();
                let da = dy.iter().zip(vb).fold(F::zero(), |acc, (&d, &v)| acc + d * v);
                self.accum(adj, *a, vec![da]);
                self.accum(adj, *b, dy.iter().map(|&d| d * s).collect());
            }
            Op::Scale(x, c) => {
                self.accum(adj, *x, dy.iter().map(|&d| d * *c).collect());
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, p) = self.value(*b).dims2().unwrap();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].tracked {
                    let mut da = vec![F::zero(); m * k];
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = F::zero();
                            let drow = &dy[i * p..(i + 1) * p];
                            let brow = &vb[kk * p..(kk + 1) * p];
                            for (dv, bv) in drow.iter().zip(brow) {
                                s = s + *dv * *bv;
                            }
                            da[i * k + kk] = s;
                        }
                    }
                    self.accum(adj, *a, da);
                }
                if self.nodes[b.0].tracked {
                    let mut db = vec![F::zero(); k * p];
                    for i in 0..m {
                        for kk in 0..k {
                            let av = va[i * k + kk];
                            if av == F::zero() {
                                continue;
                            }
                            let drow = &dy[i * p..(i + 1) * p];
                            let orow = &mut db[kk * p..(kk + 1) * p];
                            for (o, dv) in orow.iter_mut().zip(drow) {
                                *o = *o + av * *dv;
                            }
                        }
                    }
                    self.accum(adj, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).dims2().unwrap();
                // dy has shape [c, r]
                let mut dx = vec![F::zero(); r * c];
                for j in 0..c {
                    for i in 0..r {
                        dx[i * c + j] = dy[j * r + i];
                    }
                }
                self.accum(adj, *x, dx);
            }
            Op::AddBias(x, b) => {
                self.accum(adj, *x, dy.to_vec());
                if self.nodes[b.0].tracked {
                    let d = self.value(*b).shape()[0];
                    let mut db = vec![F::zero(); d];
                    for (i, &v) in dy.iter().enumerate() {
                        db[i % d] = db[i % d] + v;
                    }
                    self.accum(adj, *b, db);
                }
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accum(adj, p, dy[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let vx = self.value(*x);
                let mut dx = vec![F::zero(); vx.numel()];
                match vx.shape() {
                    [_] => dx[*start..*start + *len].copy_from_slice(dy),
                    [r, c] => {
                        if *axis == 0 {
                            dx[*start * c..(*start + *len) * c].copy_from_slice(dy);
                        } else {
                            for i in 0..*r {
                                dx[i * c + start..i * c + start + len]
                                    .copy_from_slice(&dy[i * len..(i + 1) * len]);
                            }
                        }
                    }
                    _ => unreachable!(),
                }
                self.accum(adj, *x, dx);
            }
            Op::Act(x, kind) => {
                let vx = self.value(*x).data();
                let vy = self.nodes[idx].value.data();
                let dx = match kind {
                    Activation::Relu => dy
                        .iter()
                        .zip(vx)
                        .map(|(&d, &v)| if v > F::zero() { d } else { F::zero() })
                        .collect(),
                    Activation::Sigmoid => dy
                        .iter()
                        .zip(vy)
                        .map(|(&d, &s)| d * s * (F::one() - s))
                        .collect(),
                    Activation::Gelu => dy
                        .iter()
                        .zip(vx)
                        .map(|(&d, &v)| d * gelu_grad(v))
                        .collect(),
                };
                self.accum(adj, *x, dx);
            }
            Op::Reshape(x) => {
                self.accum(adj, *x, dy.to_vec());
            }
            Op::Sqrt(x) => {
                let vy = self.nodes[idx].value.data();
                let half = F::fl(0.5);
                let dx = dy.iter().zip(vy).map(|(&d, &y)| d * half / y).collect();
                self.accum(adj, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let vy = self.nodes[idx].value.data();
                let shape = self.nodes[idx].value.shape().to_vec();
                let mut dx = vec![F::zero(); vy.len()];
                for_each_lane(&shape, *axis, |lane| {
                    let mut dot = F::zero();
                    for &i in lane {
                        dot = dot + dy[i] * vy[i];
                    }
                    for &i in lane {
                        dx[i] = vy[i] * (dy[i] - dot);
                    }
                });
                self.accum(adj, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = self.value(*x);
                let d = *vx.shape().last().unwrap();
                let rows = vx.numel() / d;
                let g = self.value(*gamma).data();
                let mut dx = vec![F::zero(); vx.numel()];
                let mut dg = vec![F::zero(); d];
                let mut db = vec![F::zero(); d];
                let inv_d = F::fl(1.0 / d as f64);
                for r in 0..rows {
                    let row = &vx.data()[r * d..(r + 1) * d];
                    let drow = &dy[r * d..(r + 1) * d];
                    let (mean, inv_std) = row_stats::<F>(row, *eps);
                    let xhat: Vec<F> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..d {
                        let dxh = drow[j] * g[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xhat[j];
                        dg[j] = dg[j] + drow[j] * xhat[j];
                        db[j] = db[j] + drow[j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    for j in 0..d {
                        let dxh = drow[j] * g[j];
                        dx[r * d + j] = inv_std * (dxh - m1 - xhat[j] * m2);
                    }
                }
                self.accum(adj, *x, dx);
                self.accum(adj, *gamma, dg);
                self.accum(adj, *beta, db);
            }
            Op::MeanAxis0(x) => {
                let vx = self.value(*x);
                let (t, c) = match vx.shape() {
                    [t] => (*t, 1usize),
                    [t, c] => (*t, *c),
                    _ => unreachable!(),
                };
                let inv = F::fl(1.0 / t as f64);
                let mut dx = vec![F::zero(); t * c];
                for row in 0..t {
                    for j in 0..c {
                        dx[row * c + j] = dy[j] * inv;
                    }
                }
                self.accum(adj, *x, dx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accum(adj, *x, vec![dy[0]; n]);
            }
            Op::CrossEntropy { logits, label } => {
                let d = self.value(*logits).data();
                let m = d.iter().cloned().fold(F::neg_infinity(), F::max);
                let z = d.iter().fold(F::zero(), |acc, &v| acc + (v - m).exp());
                let mut dx: Vec<F> = d.iter().map(|&v| (v - m).exp() / z * dy[0]).collect();
                dx[*label] = dx[*label] - dy[0];
                self.accum(adj, *logits, dx);
            }
            Op::Conv1d { x, w, b, stride, dilation } => {
                let (t_in, c_in) = self.value(*x).dims2().unwrap();
                let ws = self.value(*w).shape();
                let (c_out, k) = (ws[0], ws[1]);
                let t_out = (t_in - (k - 1) * dilation - 1) / stride + 1;
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                if self.nodes[b.0].tracked {
                    let mut db = vec![F::zero(); c_out];
                    for t in 0..t_out {
                        for o in 0..c_out {
                            db[o] = db[o] + dy[t * c_out + o];
                        }
                    }
                    self.accum(adj, *b, db);
                }
                if self.nodes[w.0].tracked {
                    let mut dw = vec![F::zero(); c_out * c_in * k];
                    for t in 0..t_out {
                        for o in 0..c_out {
                            let d = dy[t * c_out + o];
                            if d == F::zero() {
                                continue;
                            }
                            for kk in 0..k {
                                let ti = t * stride + kk * dilation;
                                let xrow = &vx[ti * c_in..(ti + 1) * c_in];
                                let wrow = &mut dw[(o * k + kk) * c_in..(o * k + kk + 1) * c_in];
                                for (dwv, xv) in wrow.iter_mut().zip(xrow) {
                                    *dwv = *dwv + d * *xv;
                                }
                            }
                        }
                    }
                    self.accum(adj, *w, dw);
                }
                if self.nodes[x.0].tracked {
                    let mut dx = vec![F::zero(); t_in * c_in];
                    for t in 0..t_out {
                        for o in 0..c_out {
                            let d = dy[t * c_out + o];
                            if d == F::zero() {
                                continue;
                            }
                            for kk in 0..k {
                                let ti = t * stride + kk * dilation;
                                let wrow = &vw[(o * k + kk) * c_in..(o * k + kk + 1) * c_in];
                                let xrow = &mut dx[ti * c_in..(ti + 1) * c_in];
                                for (dxv, wv) in xrow.iter_mut().zip(wrow) {
                                    *dxv = *dxv + d * *wv;
                                }
                            }
                        }
                    }
                    self.accum(adj, *x, dx);
                }
            }
        }
    }
}

fn zip_map<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        grad_tracked: false,
    }
}

fn apply_act<F: Scalar>(v: F, kind: Activation) -> F {
    match kind {
        Activation::Relu => v.max(F::zero()),
        Activation::Sigmoid => F::one() / (F::one() + (-v).exp()),
        Activation::Gelu => {
            // tanh approximation
            let c = F::fl(0.7978845608028654); // sqrt(2/pi)
            let a = F::fl(0.044715);
            let u = c * (v + a * v * v * v);
            F::fl(0.5) * v * (F::one() + u.tanh())
        }
    }
}

fn gelu_grad<F: Scalar>(v: F) -> F {
    let c = F::fl(0.7978845608028654);
    let a = F::fl(0.044715);
    let half = F::fl(0.5);
    let u = c * (v + a * v * v * v);
    let th = u.tanh();
    let sech2 = F::one() - th * th;
    half * (F::one() + th) + half * v * sech2 * c * (F::one() + F::fl(3.0) * a * v * v)
}

/// Population mean and inverse standard deviation of one row.
fn row_stats<F: Scalar>(row: &[F], eps: f64) -> (F, F) {
    let n = F::fl(row.len() as f64);
    let mean = row.iter().fold(F::zero(), |a, &v| a + v) / n;
    let var = row
        .iter()
        .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
        / n;
    (mean, F::one() / (var + F::fl(eps)).sqrt())
}

/// Call `f` with the flat indices of each 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    match (shape, axis) {
        ([n], 0) => {
            let lane: Vec<usize> = (0..*n).collect();
            f(&lane);
        }
        ([r, c], 1) => {
            for i in 0..*r {
                let lane: Vec<usize> = (i * c..i * c + c).collect();
                f(&lane);
            }
        }
        ([r, c], 0) => {
            for j in 0..*c {
                let lane: Vec<usize> = (0..*r).map(|i| i * c + j).collect();
                f(&lane);
            }
        }
        _ => panic!("unsupported softmax lane layout: shape {shape:?} axis {axis}"),
    }
}

fn softmax_lane<F: Scalar>(data: &mut [F], lane: &[usize]) {
    let m = lane
        .iter()
        .map(|&i| data[i])
        .fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for &i in lane {
        data[i] = (data[i] - m).exp();
        z = z + data[i];
    }
    for &i in lane {
        data[i] = data[i] / z;
    }
}
