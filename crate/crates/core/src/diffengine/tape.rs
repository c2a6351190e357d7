//! Wengert tape: every primitive applied to a gradient-carrying input is appended
//! in creation order, and `backward` replays the list in reverse.

use super::tensor::{
    axis_split, broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, strides,
    Tensor,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var, usize),
    Mean(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Sqrt(Var),
    Take(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Concat(xs, _) => xs.clone(),
            Scale(a, _)
            | AddScalar(a)
            | Slice { input: a, .. }
            | Permute(a, _)
            | Reshape(a)
            | Sum(a, _)
            | Mean(a, _)
            | Softmax(a, _)
            | LogSoftmax(a, _)
            | Sigmoid(a)
            | Exp(a)
            | Log(a)
            | LeakyRelu(a, _)
            | Elu(a)
            | Sqrt(a)
            | Take(a, _) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records primitive applications for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of values held (leaves and recorded applications).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input ids of every recorded application, in creation order.
    pub fn entries(&self) -> Vec<(usize, Vec<usize>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(n.op, Op::Leaf))
            .map(|(i, n)| (i, n.op.inputs().iter().map(|v| v.0).collect()))
            .collect()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Domain(format!("{name} produced a non-finite value")));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- forward

    /// `[.., m, k] x [k, n]` or batched `[b, m, k] x [b, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = match (sa.len(), sb.len()) {
            (ra, 2) if ra >= 2 => {
                let (k, n) = (sb[0], sb[1]);
                if sa[ra - 1] != k {
                    return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
                }
                let rows = self.value(a).len() / k.max(1);
                let mut c = vec![0.0; rows * n];
                gemm(
                    rows,
                    k,
                    n,
                    self.value(a).data(),
                    (k, 1),
                    self.value(b).data(),
                    (n, 1),
                    &mut c,
                );
                let mut shape = sa[..ra - 1].to_vec();
                shape.push(n);
                Tensor::new(shape, c)?
            }
            (3, 3) => {
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if sb[0] != bt || sb[1] != k {
                    return Err(Error::Shape(format!("batched matmul {sa:?} x {sb:?}")));
                }
                let mut c = vec![0.0; bt * m * n];
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                for i in 0..bt {
                    gemm(
                        m,
                        k,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        (k, 1),
                        &bd[i * k * n..(i + 1) * k * n],
                        (n, 1),
                        &mut c[i * m * n..(i + 1) * m * n],
                    );
                }
                Tensor::new(vec![bt, m, n], c)?
            }
            _ => return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}"))),
        };
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        let out = broadcast_shape(ta.shape(), tb.shape())?;
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let mut data = vec![0.0; out.iter().product()];
        let (da, db) = (ta.data(), tb.data());
        for_each_broadcast(&out, &sa, &sb, |k, oa, ob| data[k] = f(da[oa], db[ob]));
        Tensor::new(out, data)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), "add_scalar")
    }

    /// Materializes `a` broadcast to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let target = broadcast_shape(self.shape(a), shape)?;
        if target != shape {
            return Err(Error::Shape(format!(
                "cannot broadcast {:?} to {shape:?}",
                self.shape(a)
            )));
        }
        let zeros = self.constant(Tensor::zeros(shape));
        self.add(a, zeros)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} on {first:?}")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape(format!("concat {first:?} with {s:?}")));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::Concat(inputs.to_vec(), axis), "concat")
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) of axis {axis} on {shape:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        self.push(out, Op::Slice { input: a, axis, start }, "slice")
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("bad permutation {perm:?} for {shape:?}")));
        }
        let out = permute_tensor(self.value(a), perm);
        self.push(out, Op::Permute(a, perm.to_vec()), "permute")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis(a, axis, 1.0)?;
        self.push(out, Op::Sum(a, axis), "sum")
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::Shape(format!("mean over missing axis {axis}")))?;
        if n == 0 {
            return Err(Error::Shape("mean over empty axis".into()));
        }
        let out = self.reduce_axis(a, axis, 1.0 / n as f64)?;
        self.push(out, Op::Mean(a, axis), "mean")
    }

    /// Sum of every element as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.mean(flat, 0)
    }

    fn reduce_axis(&self, a: Var, axis: usize, factor: f64) -> Result<Tensor> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("reduce axis {axis} on {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        if factor != 1.0 {
            data.iter_mut().for_each(|x| *x *= factor);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Tensor::new(out_shape, data)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_like(a, axis, false)?;
        self.push(out, Op::Softmax(a, axis), "softmax")
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_like(a, axis, true)?;
        self.push(out, Op::LogSoftmax(a, axis), "log_softmax")
    }

    fn softmax_like(&self, a: Var, axis: usize, log: bool) -> Result<Tensor> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::Shape(format!("softmax axis {axis} on {:?}", t.shape())));
        }
        let (outer, n, inner) = axis_split(t.shape(), axis);
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                if log {
                    let lse = total.ln();
                    for j in 0..n {
                        data[at(j)] = src[at(j)] - max - lse;
                    }
                } else {
                    for j in 0..n {
                        data[at(j)] /= total;
                    }
                }
            }
        }
        Tensor::new(t.shape().to_vec(), data)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), "sigmoid")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("sqrt of non-positive value {x}")));
        }
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a), "sqrt")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), "leaky_relu")
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(elu);
        self.push(out, Op::Elu(a), "elu")
    }

    /// Gathers the given flat indices into a vector.
    pub fn take(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!("take index {bad} of {}", src.len())));
        }
        let out = Tensor::vector(indices.iter().map(|&i| src[i]).collect());
        self.push(out, Op::Take(a, indices.to_vec()), "take")
    }

    // --------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ga, gb) = self.matmul_backward(*a, *b, g)?;
                if let Some(ga) = ga {
                    self.accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_to_shape(g, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, reduce_to_shape(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_to_shape(g, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, reduce_to_shape(&g.map(|x| -x), self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let ga = self.mul_grad(g, *a, *b);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.mul_grad(g, *b, *a);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shaped = g.clone().reshape(self.shape(*a))?;
                self.accumulate(grads, *a, shaped);
            }
            Op::Concat(inputs, axis) => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * n + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(self.shape(v).to_vec(), data)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let len = out.shape()[*axis];
                let mut full = Tensor::zeros(&shape);
                let dst = full.data_mut();
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    dst[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, full);
            }
            Op::Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                self.accumulate(grads, *a, permute_tensor(g, &inverse));
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let shape = self.shape(*a).to_vec();
                let factor = match &self.nodes[id].op {
                    Op::Mean(..) => 1.0 / shape[*axis] as f64,
                    _ => 1.0,
                };
                let (outer, n, inner) = axis_split(&shape, *axis);
                let mut full = Tensor::zeros(&shape);
                let dst = full.data_mut();
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            dst[(o * n + j) * inner + i] = g.data()[o * inner + i] * factor;
                        }
                    }
                }
                self.accumulate(grads, *a, full);
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) = axis_split(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let total: f64 = (0..n).map(|j| gd[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = gd[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Sigmoid(a) => {
                let dx = zip_map(g, out, |gi, y| gi * y * (1.0 - y));
                self.accumulate(grads, *a, dx);
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, out, |gi, y| gi * y)),
            Op::Log(a) => {
                let dx = zip_map(g, self.value(*a), |gi, x| gi / x);
                self.accumulate(grads, *a, dx);
            }
            Op::Sqrt(a) => self.accumulate(grads, *a, zip_map(g, out, |gi, y| gi / (2.0 * y))),
            Op::LeakyRelu(a, slope) => {
                let dx = zip_map(g, self.value(*a), |gi, x| if x > 0.0 { gi } else { gi * slope });
                self.accumulate(grads, *a, dx);
            }
            Op::Elu(a) => {
                let dx = zip_map(g, self.value(*a), |gi, x| if x > 0.0 { gi } else { gi * x.exp() });
                self.accumulate(grads, *a, dx);
            }
            Op::Take(a, indices) => {
                let mut full = Tensor::zeros(self.shape(*a));
                let dst = full.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    dst[i] += g.data()[k];
                }
                self.accumulate(grads, *a, full);
            }
        }
        Ok(())
    }

    /// Gradient of `x * other` w.r.t. `x`, reduced to `x`'s shape.
    fn mul_grad(&self, g: &Tensor, x: Var, other: Var) -> Tensor {
        let (tx, to) = (self.value(x), self.value(other));
        if tx.shape() == to.shape() {
            return zip_map(g, to, |gi, o| gi * o);
        }
        let sx = broadcast_strides(tx.shape(), g.shape());
        let so = broadcast_strides(to.shape(), g.shape());
        let mut out = Tensor::zeros(tx.shape());
        let (dst, od, gd) = (out.data_mut(), to.data(), g.data());
        for_each_broadcast(g.shape(), &sx, &so, |k, ox, oo| dst[ox] += gd[k] * od[oo]);
        out
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        if tb.rank() == 2 {
            let (k, n) = (tb.shape()[0], tb.shape()[1]);
            let rows = ta.len() / k.max(1);
            let ga = need_a.then(|| {
                let mut d = vec![0.0; rows * k];
                // dA = dC · Bᵀ
                gemm(rows, n, k, g.data(), (n, 1), tb.data(), (1, n), &mut d);
                Tensor::new(ta.shape().to_vec(), d)
            });
            let gb = need_b.then(|| {
                let mut d = vec![0.0; k * n];
                // dB = Aᵀ · dC
                gemm(k, rows, n, ta.data(), (1, k), g.data(), (n, 1), &mut d);
                Tensor::new(vec![k, n], d)
            });
            return Ok((ga.transpose()?, gb.transpose()?));
        }
        let (bt, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut ga = need_a.then(|| vec![0.0; bt * m * k]);
        let mut gb = need_b.then(|| vec![0.0; bt * k * n]);
        for i in 0..bt {
            let gi = &g.data()[i * m * n..(i + 1) * m * n];
            if let Some(d) = ga.as_mut() {
                let bi = &tb.data()[i * k * n..(i + 1) * k * n];
                gemm(m, n, k, gi, (n, 1), bi, (1, n), &mut d[i * m * k..(i + 1) * m * k]);
            }
            if let Some(d) = gb.as_mut() {
                let ai = &ta.data()[i * m * k..(i + 1) * m * k];
                gemm(k, m, n, ai, (1, k), gi, (n, 1), &mut d[i * k * n..(i + 1) * k * n]);
            }
        }
        Ok((
            ga.map(|d| Tensor::new(vec![bt, m, k], d)).transpose()?,
            gb.map(|d| Tensor::new(vec![bt, k, n], d)).transpose()?,
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(other.shape().to_vec(), data).expect("same length")
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let own = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
    let zero = vec![0; perm.len()];
    let mut data = vec![0.0; t.len()];
    let src = t.data();
    for_each_broadcast(&out_shape, &src_strides, &zero, |k, off, _| data[k] = src[off]);
    Tensor::new(out_shape, data).expect("permutation preserves size")
}

/// `c = a · b` for row/column-strided operands, overwriting `c` (row-major, `n` columns).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
