//! Dynamic reverse-mode graph. Each training step builds a fresh tape,
//! runs `backward`, reads gradients, and drops the tape.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shapes, broadcast_strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, S),
    Matmul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, mean: Vec<S>, inv_std: Vec<S> },
    L2Normalize { x: Var, axis: usize, inv_norm: Vec<S> },
    Square(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const L2_NORM_EPS: f64 = 1e-12;

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` required one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise binary with broadcasting over leading axes ----

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var, TensorError> {
        let out_shape =
            broadcast_shapes(op_name, self.value(a).shape(), self.value(b).shape())?;
        let data = bcast_apply(&out_shape, self.value(a), self.value(b), f);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(out_shape, data).unwrap(), op, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x + c);
        let req = self.requires(a);
        self.push(value, Op::AddScalar(a), req)
    }

    pub fn mul_scalar(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).map(|x| x * c);
        let req = self.requires(a);
        self.push(value, Op::MulScalar(a, c), req)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -S::one())
    }

    // ---- matmul ----

    /// `a @ b` where `a` is `[..., m, k]` and `b` is either `[k, n]`
    /// (shared right operand) or `[..., k, n]` with identical leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (asp, bsp) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let mismatch = || TensorError::ShapeMismatch { op: "matmul", lhs: asp.clone(), rhs: bsp.clone() };
        if asp.len() < 2 || bsp.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (asp[asp.len() - 2], asp[asp.len() - 1]);
        let n = bsp[bsp.len() - 1];
        let shared_b = bsp.len() == 2;
        if shared_b {
            if bsp[0] != k {
                return Err(mismatch());
            }
        } else if bsp.len() != asp.len()
            || bsp[bsp.len() - 2] != k
            || asp[..asp.len() - 2] != bsp[..bsp.len() - 2]
        {
            return Err(mismatch());
        }
        let batch: usize = asp[..asp.len() - 2].iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        if shared_b {
            // one gemm over the flattened batch
            gemm_into(batch * m, k, n, ad, (k as isize, 1), bd, (n as isize, 1), &mut out, S::zero());
        } else {
            for i in 0..batch {
                gemm_into(
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    (k as isize, 1),
                    &bd[i * k * n..],
                    (n as isize, 1),
                    &mut out[i * m * n..],
                    S::zero(),
                );
            }
        }
        let mut out_shape = asp[..asp.len() - 1].to_vec();
        out_shape.push(n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(out_shape, out).unwrap(), Op::Matmul(a, b), req))
    }

    // ---- shape ops ----

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.value(a).shape().to_vec();
        if axes.len() != shape.len() {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("axes {:?} for shape {:?}", axes, shape),
            });
        }
        let value = permute_tensor(self.value(a), axes);
        let req = self.requires(a);
        Ok(self.push(value, Op::Permute(a, axes.to_vec()), req))
    }

    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var, TensorError> {
        let rank = self.value(a).shape().len();
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(ax0, ax1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).reshaped(shape.to_vec())?;
        let req = self.requires(a);
        Ok(self.push(value, Op::Reshape(a), req))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid { op: "concat", msg: "no inputs".into() });
        }
        let first = self.value(inputs[0]).shape().to_vec();
        let mut axis_total = 0;
        for &v in inputs {
            let sp = self.value(v).shape();
            if sp.len() != first.len()
                || sp.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: sp.to_vec() });
            }
            axis_total += sp[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let d = t.shape()[axis];
                let src = &t.data()[o * d * inner..(o + 1) * d * inner];
                data.extend_from_slice(src);
            }
        }
        let req = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(Tensor::new(out_shape, data).unwrap(), Op::Concat(inputs.to_vec(), axis), req))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("axis {} range {}..{} of shape {:?}", axis, start, start + len, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            data.extend_from_slice(&self.value(a).data()[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let req = self.requires(a);
        Ok(self.push(Tensor::new(out_shape, data).unwrap(), Op::Slice { x: a, axis, start }, req))
    }

    // ---- reductions ----

    fn reduce_axis(
        &mut self,
        op_name: &'static str,
        a: Var,
        axis: usize,
        mean: bool,
    ) -> Result<Var, TensorError> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: op_name,
                msg: format!("axis {} of shape {:?}", axis, shape),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let d = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..d {
                let base = (o * d + j) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let inv = S::one() / S::from_f64(d as f64);
            for v in &mut data {
                *v *= inv;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let req = self.requires(a);
        let op = if mean { Op::MeanAxis(a, axis) } else { Op::SumAxis(a, axis) };
        Ok(self.push(Tensor::new(out_shape, data).unwrap(), op, req))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis("sum_axis", a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis("mean_axis", a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(S::zero(), |acc, &v| acc + v);
        let req = self.requires(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), req)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.value(a).data().iter().fold(S::zero(), |acc, &v| acc + v);
        let req = self.requires(a);
        self.push(Tensor::scalar(s / S::from_f64(n as f64)), Op::MeanAll(a), req)
    }

    // ---- elementwise nonlinearities ----

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_fwd);
        let req = self.requires(a);
        self.push(value, Op::Gelu(a), req)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let req = self.requires(a);
        self.push(value, Op::Square(a), req)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.sqrt());
        let req = self.requires(a);
        self.push(value, Op::Sqrt(a), req)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        let req = self.requires(a);
        self.push(value, Op::Log(a), req)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let req = self.requires(a);
        self.push(value, Op::Exp(a), req)
    }

    // ---- normalization / attention primitives ----

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {} of shape {:?}", axis, shape),
            });
        }
        let (outer, d, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut data = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * d + j) * inner + i;
                let mut mx = src[at(0)];
                for j in 1..d {
                    mx = mx.max(src[at(j)]);
                }
                let mut z = S::zero();
                for j in 0..d {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    z += e;
                }
                let inv = S::one() / z;
                for j in 0..d {
                    data[at(j)] *= inv;
                }
            }
        }
        let req = self.requires(a);
        Ok(self.push(Tensor::new(shape, data).unwrap(), Op::Softmax { x: a, axis }, req))
    }

    /// Layer normalization over the last axis, optional learned gain/bias of
    /// that axis's extent. Zero-variance rows normalize to zero.
    pub fn layer_norm(
        &mut self,
        a: Var,
        gain: Option<Var>,
        bias: Option<Var>,
    ) -> Result<Var, TensorError> {
        let shape = self.value(a).shape().to_vec();
        let d = *shape.last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        for v in [gain, bias].into_iter().flatten() {
            if self.value(v).shape() != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.value(v).shape().to_vec(),
                });
            }
        }
        let rows = self.value(a).numel() / d;
        let eps = S::from_f64(LAYER_NORM_EPS);
        let inv_d = S::one() / S::from_f64(d as f64);
        let mut mean = vec![S::zero(); rows];
        let mut inv_std = vec![S::zero(); rows];
        let mut data = vec![S::zero(); rows * d];
        {
            let src = self.value(a).data();
            for r in 0..rows {
                let row = &src[r * d..(r + 1) * d];
                let mu = row.iter().fold(S::zero(), |a, &v| a + v) * inv_d;
                let var = row.iter().fold(S::zero(), |a, &v| a + (v - mu) * (v - mu)) * inv_d;
                let is = S::one() / (var + eps).sqrt();
                mean[r] = mu;
                inv_std[r] = is;
                for j in 0..d {
                    data[r * d + j] = (row[j] - mu) * is;
                }
            }
        }
        if let Some(g) = gain {
            let gd = self.value(g).data().to_vec();
            for r in 0..rows {
                for j in 0..d {
                    data[r * d + j] *= gd[j];
                }
            }
        }
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for r in 0..rows {
                for j in 0..d {
                    data[r * d + j] += bd[j];
                }
            }
        }
        let req = self.requires(a)
            || gain.map(|g| self.requires(g)).unwrap_or(false)
            || bias.map(|b| self.requires(b)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::LayerNorm { x: a, gain, bias, mean, inv_std },
            req,
        ))
    }

    /// Unit L2 normalization along `axis` (QKNorm building block).
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "l2_normalize",
                msg: format!("axis {} of shape {:?}", axis, shape),
            });
        }
        let (outer, d, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut inv_norm = vec![S::zero(); outer * inner];
        let mut data = vec![S::zero(); src.len()];
        let eps = S::from_f64(L2_NORM_EPS);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * d + j) * inner + i;
                let mut ss = S::zero();
                for j in 0..d {
                    ss += src[at(j)] * src[at(j)];
                }
                let inv = S::one() / (ss + eps).sqrt();
                inv_norm[o * inner + i] = inv;
                for j in 0..d {
                    data[at(j)] = src[at(j)] * inv;
                }
            }
        }
        let req = self.requires(a);
        Ok(self.push(
            Tensor::new(shape, data).unwrap(),
            Op::L2Normalize { x: a, axis, inv_norm },
            req,
        ))
    }

    /// Mean cross-entropy of `[N, C]` logits against integer class targets.
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, TensorError> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::Invalid {
                op: "cross_entropy_with_logits",
                msg: format!("logits {:?} vs {} targets", shape, targets.len()),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::Invalid {
                op: "cross_entropy_with_logits",
                msg: format!("target class {} out of range {}", t, c),
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![S::zero(); n * c];
        let mut loss = S::zero();
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().fold(row[0], |a, &v| a.max(v));
            let mut z = S::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                probs[r * c + j] = e;
                z += e;
            }
            let inv = S::one() / z;
            for j in 0..c {
                probs[r * c + j] *= inv;
            }
            loss -= probs[r * c + targets[r]].ln();
        }
        loss /= S::from_f64(n as f64);
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            req,
        ))
    }

    // ---- backward ----

    /// Populates gradients of every reachable `requires_grad` node.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            // detach the op so backward math can borrow node values freely
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let res = self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
            res?;
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, g: Tensor<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, node: usize, op: &Op<S>, g: &Tensor<S>) -> Result<(), TensorError> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                let ga = reduce_to_shape(g, self.value(a).shape());
                let gb = reduce_to_shape(g, self.value(b).shape());
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                let ga = reduce_to_shape(g, self.value(a).shape());
                let gb = reduce_to_shape(&g.map(|x| -x), self.value(b).shape());
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let out_shape = self.nodes[node].value.shape().to_vec();
                let da = bcast_apply(&out_shape, g, self.value(b), |x, y| x * y);
                let db = bcast_apply(&out_shape, g, self.value(a), |x, y| x * y);
                let ga = reduce_to_shape(&Tensor::new(out_shape.clone(), da).unwrap(), self.value(a).shape());
                let gb = reduce_to_shape(&Tensor::new(out_shape, db).unwrap(), self.value(b).shape());
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.add_grad(a, g.clone());
            }
            Op::MulScalar(a, c) => {
                let (a, c) = (*a, *c);
                self.add_grad(a, g.map(|x| x * c));
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let asp = self.value(a).shape().to_vec();
                let bsp = self.value(b).shape().to_vec();
                let (m, k) = (asp[asp.len() - 2], asp[asp.len() - 1]);
                let n = bsp[bsp.len() - 1];
                let batch: usize = asp[..asp.len() - 2].iter().product();
                let gd = g.data();
                let mut ga = vec![S::zero(); batch * m * k];
                let mut gb = vec![S::zero(); self.value(b).numel()];
                if bsp.len() == 2 {
                    let bd = self.value(b).data();
                    // dA = dC @ B^T, dB = A^T @ dC over the flattened batch
                    gemm_into(batch * m, n, k, gd, (n as isize, 1), bd, (1, n as isize), &mut ga, S::zero());
                    let ad = self.value(a).data();
                    gemm_into(k, batch * m, n, ad, (1, k as isize), gd, (n as isize, 1), &mut gb, S::zero());
                } else {
                    let ad = self.value(a).data();
                    let bd = self.value(b).data();
                    for i in 0..batch {
                        gemm_into(
                            m, n, k,
                            &gd[i * m * n..], (n as isize, 1),
                            &bd[i * k * n..], (1, n as isize),
                            &mut ga[i * m * k..], S::zero(),
                        );
                        gemm_into(
                            k, m, n,
                            &ad[i * m * k..], (1, k as isize),
                            &gd[i * m * n..], (n as isize, 1),
                            &mut gb[i * k * n..], S::zero(),
                        );
                    }
                }
                self.add_grad(a, Tensor::new(asp, ga).unwrap());
                self.add_grad(b, Tensor::new(bsp, gb).unwrap());
            }
            Op::Permute(a, axes) => {
                let (a, axes) = (*a, axes.clone());
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                self.add_grad(a, permute_tensor(g, &inverse));
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = self.value(a).shape().to_vec();
                self.add_grad(a, g.reshaped(shape)?);
            }
            Op::Concat(inputs, axis) => {
                let (inputs, axis) = (inputs.clone(), *axis);
                let mut start = 0;
                for v in inputs {
                    let sp = self.value(v).shape().to_vec();
                    let len = sp[axis];
                    let gv = slice_tensor(g, axis, start, len);
                    start += len;
                    self.add_grad(v, gv);
                }
            }
            Op::Slice { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let shape = self.value(x).shape().to_vec();
                let mut gx = Tensor::zeros(&shape);
                let (outer, d, inner) = split_axis(&shape, axis);
                let len = g.numel() / (outer * inner);
                for o in 0..outer {
                    let dst = (o * d + start) * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                let _ = d;
                self.add_grad(x, gx);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let mean = matches!(op, Op::MeanAxis(..));
                let (a, axis) = (*a, *axis);
                let shape = self.value(a).shape().to_vec();
                let (outer, d, inner) = split_axis(&shape, axis);
                let scale = if mean { S::one() / S::from_f64(d as f64) } else { S::one() };
                let mut gx = vec![S::zero(); outer * d * inner];
                for o in 0..outer {
                    for j in 0..d {
                        for i in 0..inner {
                            gx[(o * d + j) * inner + i] = g.data()[o * inner + i] * scale;
                        }
                    }
                }
                self.add_grad(a, Tensor::new(shape, gx).unwrap());
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let mean = matches!(op, Op::MeanAll(_));
                let a = *a;
                let shape = self.value(a).shape().to_vec();
                let n: usize = shape.iter().product();
                let scale = if mean { S::one() / S::from_f64(n as f64) } else { S::one() };
                let gv = g.item() * scale;
                self.add_grad(a, Tensor::full(&shape, gv));
            }
            Op::Gelu(a) => {
                let a = *a;
                let gx: Vec<S> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| gy * gelu_bwd(x))
                    .collect();
                let shape = self.value(a).shape().to_vec();
                self.add_grad(a, Tensor::new(shape, gx).unwrap());
            }
            Op::Square(a) => {
                let a = *a;
                let two = S::from_f64(2.0);
                let gx: Vec<S> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| gy * two * x)
                    .collect();
                let shape = self.value(a).shape().to_vec();
                self.add_grad(a, Tensor::new(shape, gx).unwrap());
            }
            Op::Sqrt(a) => {
                let a = *a;
                let half = S::from_f64(0.5);
                let y = self.nodes[node].value.data().to_vec();
                let gx: Vec<S> = y.iter().zip(g.data()).map(|(&y, &gy)| gy * half / y).collect();
                let shape = self.value(a).shape().to_vec();
                self.add_grad(a, Tensor::new(shape, gx).unwrap());
            }
            Op::Log(a) => {
                let a = *a;
                let gx: Vec<S> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| gy / x)
                    .collect();
                let shape = self.value(a).shape().to_vec();
                self.add_grad(a, Tensor::new(shape, gx).unwrap());
            }
            Op::Exp(a) => {
                let a = *a;
                let y = self.nodes[node].value.data().to_vec();
                let gx: Vec<S> = y.iter().zip(g.data()).map(|(&y, &gy)| gy * y).collect();
                let shape = self.value(a).shape().to_vec();
                self.add_grad(a, Tensor::new(shape, gx).unwrap());
            }
            Op::Softmax { x, axis } => {
                let (x, axis) = (*x, *axis);
                let shape = self.nodes[node].value.shape().to_vec();
                let y = self.nodes[node].value.data().to_vec();
                let (outer, d, inner) = split_axis(&shape, axis);
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * d + j) * inner + i;
                        let mut dot = S::zero();
                        for j in 0..d {
                            dot += g.data()[at(j)] * y[at(j)];
                        }
                        for j in 0..d {
                            gx[at(j)] = (g.data()[at(j)] - dot) * y[at(j)];
                        }
                    }
                }
                self.add_grad(x, Tensor::new(shape, gx).unwrap());
            }
            Op::LayerNorm { x, gain, bias, mean, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let shape = self.value(x).shape().to_vec();
                let d = *shape.last().unwrap();
                let rows = mean.len();
                let inv_d = S::one() / S::from_f64(d as f64);
                let xd = self.value(x).data().to_vec();
                let gd = gain.map(|v| self.value(v).data().to_vec());
                let mut gx = vec![S::zero(); rows * d];
                let mut ggain = vec![S::zero(); d];
                let mut gbias = vec![S::zero(); d];
                for r in 0..rows {
                    let is = inv_std[r];
                    let mu = mean[r];
                    // dy through the affine part
                    let mut s1 = S::zero(); // mean of dyg
                    let mut s2 = S::zero(); // mean of dyg * xhat
                    for j in 0..d {
                        let xhat = (xd[r * d + j] - mu) * is;
                        let gy = g.data()[r * d + j];
                        let dyg = match &gd {
                            Some(gv) => gy * gv[j],
                            None => gy,
                        };
                        ggain[j] += gy * xhat;
                        gbias[j] += gy;
                        s1 += dyg;
                        s2 += dyg * xhat;
                    }
                    s1 *= inv_d;
                    s2 *= inv_d;
                    for j in 0..d {
                        let xhat = (xd[r * d + j] - mu) * is;
                        let gy = g.data()[r * d + j];
                        let dyg = match &gd {
                            Some(gv) => gy * gv[j],
                            None => gy,
                        };
                        gx[r * d + j] = (dyg - s1 - xhat * s2) * is;
                    }
                }
                self.add_grad(x, Tensor::new(shape, gx).unwrap());
                if let Some(gv) = gain {
                    self.add_grad(gv, Tensor::new(vec![d], ggain).unwrap());
                }
                if let Some(bv) = bias {
                    self.add_grad(bv, Tensor::new(vec![d], gbias).unwrap());
                }
            }
            Op::L2Normalize { x, axis, inv_norm } => {
                let (x, axis) = (*x, *axis);
                let inv_norm = inv_norm.clone();
                let shape = self.nodes[node].value.shape().to_vec();
                let y = self.nodes[node].value.data().to_vec();
                let (outer, d, inner) = split_axis(&shape, axis);
                let mut gx = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * d + j) * inner + i;
                        let inv = inv_norm[o * inner + i];
                        let mut dot = S::zero();
                        for j in 0..d {
                            dot += g.data()[at(j)] * y[at(j)];
                        }
                        for j in 0..d {
                            gx[at(j)] = (g.data()[at(j)] - y[at(j)] * dot) * inv;
                        }
                    }
                }
                self.add_grad(x, Tensor::new(shape, gx).unwrap());
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let logits = *logits;
                let targets = targets.clone();
                let probs = probs.clone();
                let shape = self.value(logits).shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let scale = g.item() / S::from_f64(n as f64);
                let mut gx = vec![S::zero(); n * c];
                for r in 0..n {
                    for j in 0..c {
                        let onehot = if j == targets[r] { S::one() } else { S::zero() };
                        gx[r * c + j] = (probs[r * c + j] - onehot) * scale;
                    }
                }
                self.add_grad(logits, Tensor::new(shape, gx).unwrap());
            }
        }
        Ok(())
    }
}

// ---- free helpers ----

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let d = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, d, inner)
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    // tanh approximation
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

fn bcast_apply<S: Scalar>(
    out_shape: &[usize],
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Vec<S> {
    let n: usize = out_shape.iter().product();
    if a.shape() == out_shape && b.shape() == out_shape {
        return a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    // suffix broadcast fast path: b's shape is a trailing slice of the output
    if a.shape() == out_shape
        && out_shape.len() >= b.shape().len()
        && out_shape[out_shape.len() - b.shape().len()..] == *b.shape()
    {
        let inner = b.numel().max(1);
        return a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % inner]))
            .collect();
    }
    let rank = out_shape.len();
    let sa = broadcast_strides(a.shape(), rank);
    let sb = broadcast_strides(b.shape(), rank);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f(a.data()[oa], b.data()[ob]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
    out
}

/// Sum `grad` over the axes that were broadcast so its shape matches `target`.
fn reduce_to_shape<S: Scalar>(grad: &Tensor<S>, target: &[usize]) -> Tensor<S> {
    if grad.shape() == target {
        return grad.clone();
    }
    let rank = grad.shape().len();
    let st = broadcast_strides(target, rank);
    let numel: usize = target.iter().product();
    let mut acc = vec![S::zero(); numel];
    let out_shape = grad.shape();
    let mut idx = vec![0usize; rank];
    let mut ot = 0usize;
    for &gv in grad.data() {
        acc[ot] += gv;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ot += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            ot -= st[ax] * out_shape[ax];
        }
    }
    Tensor::new(target.to_vec(), acc).unwrap()
}

fn permute_tensor<S: Scalar>(t: &Tensor<S>, axes: &[usize]) -> Tensor<S> {
    let in_shape = t.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(t.data()[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += mapped[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            off -= mapped[ax] * out_shape[ax];
        }
    }
    Tensor::new(out_shape, data).unwrap()
}

fn slice_tensor<S: Scalar>(t: &Tensor<S>, axis: usize, start: usize, len: usize) -> Tensor<S> {
    let shape = t.shape();
    let (outer, d, inner) = split_axis(shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * d + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    Tensor::new(out_shape, data).unwrap()
}

fn gemm_into<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    (rsa, csa): (isize, isize),
    b: &[S],
    (rsb, csb): (isize, isize),
    c: &mut [S],
    beta: S,
) {
    unsafe {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}
