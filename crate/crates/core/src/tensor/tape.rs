use super::kernels::{self, Bcast, Mat};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Softmax(Var, f64),
    LogSoftmax(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        a: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and [`Tape::backward`] is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

/// Gradients of a scalar with respect to every leaf that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => shape_err(format!("op needs a nonempty last axis, got {:?}", t.shape())),
    }
}

struct MatMulPlan {
    out_shape: Vec<usize>,
    pairs: Vec<(usize, usize)>,
    m: usize,
    k: usize,
    n: usize,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return shape_err(format!("matmul needs rank >= 2 operands, got {a:?} x {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return shape_err(format!("matmul inner extents differ: {a:?} x {b:?}"));
    }
    let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = kernels::broadcast_shape(ab, bb)
        .map_err(|_| Error::Shape(format!("matmul batch extents differ: {a:?} x {b:?}")))?;
    let nb: usize = batch.iter().product();
    let (ma, mb) = (Bcast::new(&batch, ab), Bcast::new(&batch, bb));
    let pairs = (0..nb).map(|i| (ma.index(i), mb.index(i))).collect();
    let mut out_shape = batch;
    out_shape.extend([m, n]);
    Ok(MatMulPlan {
        out_shape,
        pairs,
        m,
        k,
        n,
    })
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that validates every produced value and fails on NaN/Inf.
    pub fn with_finite_checks() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: same value, no path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite {
            value.check_finite(&format!("{op:?}"))?;
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = plan_matmul(self.v(a).shape(), self.v(b).shape())?;
        let (m, k, n) = (plan.m, plan.k, plan.n);
        let mut out = vec![0.0; plan.pairs.len() * m * n];
        {
            let (ad, bd) = (self.v(a).data(), self.v(b).data());
            for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                gemm_block(ad, ia, m, k, bd, ib, n, &mut out[o * m * n..(o + 1) * m * n]);
            }
        }
        let t = Tensor::new(&plan.out_shape, out)?;
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.v(x).shape(), self.v(w).shape());
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[1] {
            return shape_err(format!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.v(b).shape() != [out_f] {
                return shape_err(format!("linear: bias {:?} for {out_f} outputs", self.v(b).shape()));
            }
        }
        let rows = self.v(x).numel() / in_f.max(1);
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = out_f;
        let mut out = vec![0.0; rows * out_f];
        if let Some(b) = b {
            let bd = self.v(b).data();
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(bd);
            }
        }
        kernels::gemm(
            Mat::new(self.v(x).data(), rows, in_f),
            Mat::new(self.v(w).data(), out_f, in_f).t(),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let t = Tensor::new(&out_shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(t, Op::Linear(x, w, b), &inputs)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.v(a), self.v(b));
        let shape = kernels::broadcast_shape(ta.shape(), tb.shape())?;
        let n = shape.iter().product();
        let (ma, mb) = (Bcast::new(&shape, ta.shape()), Bcast::new(&shape, tb.shape()));
        let data = kernels::binary_map(ta.data(), &ma, tb.data(), &mb, n, f);
        let t = Tensor::new(&shape, data)?;
        self.push(t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.v(b).data().iter().any(|&y| y == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.v(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.v(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.v(a).map(f64::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.v(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        let t = self.v(a).map(f64::ln);
        self.push(t, Op::Log(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.v(a).map(kernels::gelu);
        self.push(t, Op::Gelu(a), &[a])
    }

    /// Softmax of `z / temperature` along the last axis, max-shifted.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        let t = softmax_rows(self.v(a), temperature)?;
        self.push(t, Op::Softmax(a, temperature), &[a])
    }

    /// `log softmax(z / temperature)` along the last axis.
    pub fn log_softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        check_temperature(temperature)?;
        let x = self.v(a);
        let d = last_dim(x)?;
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
            let lse = row.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln() + max;
            out.extend(row.iter().map(|&v| v / temperature - lse));
        }
        let t = Tensor::new(x.shape(), out)?;
        self.push(t, Op::LogSoftmax(a, temperature), &[a])
    }

    /// Standardize over the last axis then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Param(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xt = self.v(x);
        let d = last_dim(xt)?;
        if self.v(gain).shape() != [d] || self.v(bias).shape() != [d] {
            return shape_err(format!(
                "layer_norm: gain {:?} / bias {:?} for feature size {d}",
                self.v(gain).shape(),
                self.v(bias).shape()
            ));
        }
        let (g, b) = (self.v(gain).data(), self.v(bias).data());
        let rows = xt.numel() / d;
        let mut xhat = Vec::with_capacity(xt.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xt.numel());
        for row in xt.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(xt.shape(), out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push(t, op, &[x, gain, bias])
    }

    /// Divide each last-axis row by `max(||row||, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.v(a);
        let d = last_dim(x)?;
        let mut norms = Vec::with_capacity(x.numel() / d);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = n.max(eps);
            norms.push(n);
            out.extend(row.iter().map(|v| v / denom));
        }
        let t = Tensor::new(x.shape(), out)?;
        self.push(t, Op::L2Normalize { a, eps, norms }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.v(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.v(a);
        if x.numel() == 0 {
            return shape_err("mean of empty tensor");
        }
        let t = Tensor::scalar(x.sum() / x.numel() as f64);
        self.push(t, Op::Mean(a), &[a])
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let x = self.v(a);
        if axis >= x.ndim() {
            return shape_err(format!("axis {axis} out of range for {:?}", x.shape()));
        }
        let (outer, len, inner) = split3(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(&shape, out)?;
        let op = if mean {
            Op::MeanAxis(a, axis)
        } else {
            Op::SumAxis(a, axis)
        };
        self.push(t, op, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.v(p).shape().to_vec(),
            None => return shape_err("concat of zero tensors"),
        };
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.v(p).shape();
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return shape_err(format!("concat shapes {first:?} and {s:?} differ off axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split3(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.v(p).shape()[axis] * inner;
                out.extend_from_slice(&self.v(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let x = self.v(a);
        if axis >= x.ndim() || start > end || end > x.shape()[axis] {
            return shape_err(format!("slice {start}..{end} on axis {axis} of {:?}", x.shape()));
        }
        let (outer, len, inner) = split3(x.shape(), axis);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&x.data()[base..base + w * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = w;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Slice(a, axis, start), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.v(a).reshape(shape)?;
        self.push(t, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.v(a);
        let mut seen = vec![false; x.ndim()];
        if perm.len() != x.ndim()
            || perm
                .iter()
                .any(|&p| p >= x.ndim() || std::mem::replace(&mut seen[p], true))
        {
            return shape_err(format!("invalid permutation {perm:?} for {:?}", x.shape()));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
        let data = kernels::permute(x.data(), x.shape(), perm);
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let nd = self.v(a).ndim();
        if i >= nd || j >= nd {
            return shape_err(format!("transpose axes ({i},{j}) for rank {nd}"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(i, j);
        self.permute(a, &perm)
    }

    /// Reverse accumulation from a scalar `loss` to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.v(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut leaves: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        leaves.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = &node.value;
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(y.shape(), g)?);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let plan = plan_matmul(ta.shape(), tb.shape())?;
                    let (m, k, n) = (plan.m, plan.k, plan.n);
                    for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                        let go = &g[o * m * n..(o + 1) * m * n];
                        if rg(*a) {
                            let bb = &tb.data()[ib * k * n..(ib + 1) * k * n];
                            let ga = acc(&mut grads, nodes, *a);
                            kernels::gemm(
                                Mat::new(go, m, n),
                                Mat::new(bb, k, n).t(),
                                1.0,
                                &mut ga[ia * m * k..(ia + 1) * m * k],
                            );
                        }
                        if rg(*b) {
                            let ab = &ta.data()[ia * m * k..(ia + 1) * m * k];
                            let gb = acc(&mut grads, nodes, *b);
                            kernels::gemm(
                                Mat::new(ab, m, k).t(),
                                Mat::new(go, m, n),
                                1.0,
                                &mut gb[ib * k * n..(ib + 1) * k * n],
                            );
                        }
                    }
                }
                Op::Linear(x, w, b) => {
                    let (tx, tw) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (out_f, in_f) = (tw.shape()[0], tw.shape()[1]);
                    let rows = tx.numel() / in_f.max(1);
                    if rg(*x) {
                        let gx = acc(&mut grads, nodes, *x);
                        kernels::gemm(Mat::new(&g, rows, out_f), Mat::new(tw.data(), out_f, in_f), 1.0, gx);
                    }
                    if rg(*w) {
                        let gw = acc(&mut grads, nodes, *w);
                        kernels::gemm(Mat::new(&g, rows, out_f).t(), Mat::new(tx.data(), rows, in_f), 1.0, gw);
                    }
                    if let Some(b) = b.filter(|b| rg(*b)) {
                        let gb = acc(&mut grads, nodes, b);
                        for row in g.chunks(out_f) {
                            gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (ma, mb) = (Bcast::new(y.shape(), ta.shape()), Bcast::new(y.shape(), tb.shape()));
                    let n = y.numel();
                    let (ad, bd) = (ta.data(), tb.data());
                    if rg(*a) {
                        let contrib: Vec<f64> = match &node.op {
                            Op::Mul(..) => (0..n).map(|i| g[i] * bd[mb.index(i)]).collect(),
                            Op::Div(..) => (0..n).map(|i| g[i] / bd[mb.index(i)]).collect(),
                            _ => g.clone(),
                        };
                        let ga = acc(&mut grads, nodes, *a);
                        kernels::reduce_into(ga, &ma, |i| contrib[i], n);
                    }
                    if rg(*b) {
                        let contrib: Vec<f64> = match &node.op {
                            Op::Add(..) => g.clone(),
                            Op::Sub(..) => g.iter().map(|v| -v).collect(),
                            Op::Mul(..) => (0..n).map(|i| g[i] * ad[ma.index(i)]).collect(),
                            _ => (0..n)
                                .map(|i| {
                                    let bv = bd[mb.index(i)];
                                    -g[i] * ad[ma.index(i)] / (bv * bv)
                                })
                                .collect(),
                        };
                        let gb = acc(&mut grads, nodes, *b);
                        kernels::reduce_into(gb, &mb, |i| contrib[i], n);
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc(&mut grads, nodes, *a);
                    ga.iter_mut().zip(&g).for_each(|(x, v)| *x += s * v);
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let ga = acc(&mut grads, nodes, *a);
                    ga.iter_mut().zip(&g).for_each(|(x, v)| *x += v);
                }
                Op::Exp(a) => {
                    let ga = acc(&mut grads, nodes, *a);
                    ga.iter_mut()
                        .zip(g.iter().zip(y.data()))
                        .for_each(|(x, (v, e))| *x += v * e);
                }
                Op::Log(a) => {
                    let xin = nodes[a.0].value.data();
                    let ga = acc(&mut grads, nodes, *a);
                    ga.iter_mut().zip(g.iter().zip(xin)).for_each(|(x, (v, u))| *x += v / u);
                }
                Op::Gelu(a) => {
                    let xin = nodes[a.0].value.data();
                    let ga = acc(&mut grads, nodes, *a);
                    ga.iter_mut()
                        .zip(g.iter().zip(xin))
                        .for_each(|(x, (v, u))| *x += v * kernels::gelu_grad(*u));
                }
                Op::Softmax(a, temp) => {
                    let d = last_dim(y)?;
                    let ga = acc(&mut grads, nodes, *a);
                    for ((gr, yr), out) in g.chunks(d).zip(y.data().chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(u, v)| u * v).sum();
                        for j in 0..d {
                            out[j] += yr[j] * (gr[j] - dot) / temp;
                        }
                    }
                }
                Op::LogSoftmax(a, temp) => {
                    let d = last_dim(y)?;
                    let ga = acc(&mut grads, nodes, *a);
                    for ((gr, yr), out) in g.chunks(d).zip(y.data().chunks(d)).zip(ga.chunks_mut(d)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..d {
                            out[j] += (gr[j] - yr[j].exp() * total) / temp;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = last_dim(y)?;
                    let gn = nodes[gain.0].value.data();
                    if rg(*x) {
                        let gx = acc(&mut grads, nodes, *x);
                        for (r, ((gr, hr), out)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for j in 0..d {
                                let dh = gr[j] * gn[j];
                                m1 += dh;
                                m2 += dh * hr[j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            for j in 0..d {
                                out[j] += rstd[r] * (gr[j] * gn[j] - m1 - hr[j] * m2);
                            }
                        }
                    }
                    if rg(*gain) {
                        let gg = acc(&mut grads, nodes, *gain);
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if rg(*bias) {
                        let gb = acc(&mut grads, nodes, *bias);
                        for gr in g.chunks(d) {
                            gb.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                        }
                    }
                }
                Op::L2Normalize { a, eps, norms } => {
                    let d = last_dim(y)?;
                    let ga = acc(&mut grads, nodes, *a);
                    for (r, ((gr, yr), out)) in g.chunks(d).zip(y.data().chunks(d)).zip(ga.chunks_mut(d)).enumerate() {
                        if norms[r] > *eps {
                            let dot: f64 = gr.iter().zip(yr).map(|(u, v)| u * v).sum();
                            for j in 0..d {
                                out[j] += (gr[j] - yr[j] * dot) / norms[r];
                            }
                        } else {
                            for j in 0..d {
                                out[j] += gr[j] / eps;
                            }
                        }
                    }
                }
                Op::Sum(a) | Op::Mean(a) => {
                    let n = nodes[a.0].value.numel();
                    let v = if matches!(node.op, Op::Mean(_)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    let ga = acc(&mut grads, nodes, *a);
                    ga.iter_mut().for_each(|x| *x += v);
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let (outer, len, inner) = split3(nodes[a.0].value.shape(), *axis);
                    let s = if matches!(node.op, Op::MeanAxis(..)) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let ga = acc(&mut grads, nodes, *a);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..len {
                            let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(x, v)| *x += s * v);
                        }
                    }
                }
                Op::Concat(parts, axis) => {
                    let (outer, total, inner) = split3(y.shape(), *axis);
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.shape()[*axis];
                        if rg(*p) {
                            let gp = acc(&mut grads, nodes, *p);
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                                dst.iter_mut().zip(src).for_each(|(x, v)| *x += v);
                            }
                        }
                        offset += len;
                    }
                }
                Op::Slice(a, axis, start) => {
                    let (outer, len, inner) = split3(nodes[a.0].value.shape(), *axis);
                    let w = y.shape()[*axis];
                    let ga = acc(&mut grads, nodes, *a);
                    for o in 0..outer {
                        let src = &g[o * w * inner..(o + 1) * w * inner];
                        let base = (o * len + start) * inner;
                        ga[base..base + w * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, v)| *x += v);
                    }
                }
                Op::Permute(a, perm) => {
                    let back = kernels::permute(&g, y.shape(), &kernels::inverse_perm(perm));
                    let ga = acc(&mut grads, nodes, *a);
                    ga.iter_mut().zip(&back).for_each(|(x, v)| *x += v);
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!("softmax temperature must be positive, got {t}")))
    }
}

/// Tape-free softmax of `z / temperature` along the last axis.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let d = last_dim(x)?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v / temperature - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    Tensor::new(x.shape(), out)
}

#[allow(clippy::too_many_arguments)]
fn gemm_block(ad: &[f64], ia: usize, m: usize, k: usize, bd: &[f64], ib: usize, n: usize, out: &mut [f64]) {
    kernels::gemm(
        Mat::new(&ad[ia * m * k..(ia + 1) * m * k], m, k),
        Mat::new(&bd[ib * k * n..(ib + 1) * k * n], k, n),
        0.0,
        out,
    );
}
