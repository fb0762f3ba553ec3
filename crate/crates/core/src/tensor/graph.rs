use std::cell::{Ref, RefCell};

use super::array::{strides, Tensor};
use super::conv::{self, ConvGeom};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Reverse { x: Var, axis: usize },
    IndexSelect { x: Var, indices: Vec<usize> },
    L2Norm(Var),
    StopGradient,
    Conv { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
enum StopGradMode {
    #[default]
    Plain,
    Record(Vec<Tensor>),
    Replay { values: Vec<Tensor>, cursor: usize },
}

/// Batch statistics computed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-feature variance.
    pub var: Vec<f64>,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order. Methods take `&self` so expressions can nest.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    stop_grads: RefCell<StopGradMode>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records the value of every `stop_gradient` output, in
    /// call order. Retrieve them with [`Graph::take_recorded_stop_gradients`].
    pub fn recording() -> Self {
        Self {
            nodes: RefCell::default(),
            stop_grads: RefCell::new(StopGradMode::Record(Vec::new())),
        }
    }

    /// A graph whose `stop_gradient` outputs are replaced, in call order, by
    /// previously recorded values. Used to evaluate a loss with every
    /// stop-gradient target frozen, which is the function whose derivative
    /// backward computes.
    pub fn replaying(values: Vec<Tensor>) -> Self {
        Self {
            nodes: RefCell::default(),
            stop_grads: RefCell::new(StopGradMode::Replay { values, cursor: 0 }),
        }
    }

    pub fn take_recorded_stop_gradients(&self) -> Vec<Tensor> {
        match std::mem::take(&mut *self.stop_grads.borrow_mut()) {
            StopGradMode::Record(v) => v,
            _ => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn param(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let nodes = self.nodes.borrow();
        let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(ta.shape().to_vec(), data));
        }
        let bc = Broadcast::new(ta.shape(), tb.shape(), name)?;
        let data = bc
            .a_off
            .iter()
            .zip(&bc.b_off)
            .map(|(&i, &j)| f(ta.data()[i], tb.data()[j]))
            .collect();
        Ok(Tensor::from_parts(bc.out_shape, data))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), self.rg(&[a, b]), "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), self.rg(&[a, b]), "sub")
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), self.rg(&[a, b]), "mul")
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::invalid("division by zero"));
        }
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(t, Op::Div(a, b), self.rg(&[a, b]), "div")
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x, c), self.rg(&[x]), "scale")
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::AddScalar(x), self.rg(&[x]), "add_scalar")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), self.rg(&[x]), "relu")
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        let t = self.map(x, f64::exp);
        self.push(t, Op::Exp(x), self.rg(&[x]), "exp")
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        let t = self.map(x, f64::ln);
        self.push(t, Op::Log(x), self.rg(&[x]), "log")
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), self.rg(&[x]), "sum")
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (outer, len, inner) = axis_split(t.shape(), axis, "sum_axis")?;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    let src = &t.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                    for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = 1;
            Tensor::from_parts(shape, out)
        };
        self.push(t, Op::SumAxis(x, axis), self.rg(&[x]), "sum_axis")
    }

    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .value(x)
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", "axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ── softmax family ─────────────────────────────────────────────────

    pub fn softmax(&self, x: Var) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let c = *v.shape().last().unwrap();
            let mut out = v.data().to_vec();
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
            Tensor::from_parts(v.shape().to_vec(), out)
        };
        self.push(t, Op::Softmax(x), self.rg(&[x]), "softmax")
    }

    pub fn log_softmax(&self, x: Var) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let c = *v.shape().last().unwrap();
            let mut out = v.data().to_vec();
            for row in out.chunks_mut(c) {
                let lse = log_sum_exp(row);
                row.iter_mut().for_each(|r| *r -= lse);
            }
            Tensor::from_parts(v.shape().to_vec(), out)
        };
        self.push(t, Op::LogSoftmax(x), self.rg(&[x]), "log_softmax")
    }

    /// Mean cross-entropy of `[N, C]` logits against integer labels, using
    /// log-sum-exp stabilization.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let loss = {
            let v = self.value(logits);
            if v.ndim() != 2 || v.shape()[0] != labels.len() {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("logits {:?} vs {} labels", v.shape(), labels.len()),
                ));
            }
            let c = v.shape()[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
            }
            let total: f64 = v
                .data()
                .chunks(c)
                .zip(labels)
                .map(|(row, &l)| log_sum_exp(row) - row[l])
                .sum();
            total / labels.len() as f64
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            self.rg(&[logits]),
            "cross_entropy",
        )
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut out = vec![0.0; m * n];
            matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
            Tensor::from_parts(vec![m, n], out)
        };
        self.push(t, Op::MatMul(a, b), self.rg(&[a, b]), "matmul")
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let t = {
            let v = self.value(x);
            if v.ndim() != 2 {
                return Err(Error::shape("transpose", format!("{:?}", v.shape())));
            }
            let (r, c) = (v.shape()[0], v.shape()[1]);
            Tensor::from_parts(vec![c, r], transpose_data(v.data(), r, c))
        };
        self.push(t, Op::Transpose(x), self.rg(&[x]), "transpose")
    }

    /// Euclidean norm over the last axis; output keeps that axis with size 1.
    pub fn l2_norm(&self, x: Var) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let c = *v.shape().last().unwrap();
            let norms: Vec<f64> = v
                .data()
                .chunks(c)
                .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt())
                .collect();
            if norms.iter().any(|&n| n == 0.0) {
                return Err(Error::invalid("l2_norm of a zero vector"));
            }
            let mut shape = v.shape().to_vec();
            *shape.last_mut().unwrap() = 1;
            Tensor::from_parts(shape, norms)
        };
        self.push(t, Op::L2Norm(x), self.rg(&[x]), "l2_norm")
    }

    // ── structural ─────────────────────────────────────────────────────

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(x), self.rg(&[x]), "reshape")
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            let first = nodes
                .get(inputs.first().ok_or_else(|| Error::invalid("concat of nothing"))?.0)
                .unwrap()
                .value
                .shape()
                .to_vec();
            if axis >= first.len() {
                return Err(Error::shape("concat", "axis out of range"));
            }
            let mut total = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
                }
                total += s[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let block = t.shape()[axis] * inner;
                    out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first;
            shape[axis] = total;
            Tensor::from_parts(shape, out)
        };
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            self.rg(inputs),
            "concat",
        )
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let (outer, len, inner) = axis_split(v.shape(), axis, "slice")?;
            if start >= end || end > len {
                return Err(Error::shape("slice", format!("range {start}..{end} of {len}")));
            }
            let w = end - start;
            let mut out = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                out.extend_from_slice(&v.data()[(o * len + start) * inner..(o * len + end) * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = w;
            Tensor::from_parts(shape, out)
        };
        self.push(t, Op::Slice { x, axis, start }, self.rg(&[x]), "slice")
    }

    pub fn reverse(&self, x: Var, axis: usize) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let (outer, len, inner) = axis_split(v.shape(), axis, "reverse")?;
            let mut out = Vec::with_capacity(v.len());
            for o in 0..outer {
                for a in (0..len).rev() {
                    out.extend_from_slice(&v.data()[(o * len + a) * inner..(o * len + a + 1) * inner]);
                }
            }
            Tensor::from_parts(v.shape().to_vec(), out)
        };
        self.push(t, Op::Reverse { x, axis }, self.rg(&[x]), "reverse")
    }

    /// Gathers entries along axis 0.
    pub fn index_select(&self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = {
            let v = self.value(x);
            let rows = v.shape()[0];
            if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
                return Err(Error::shape("index_select", format!("indices {indices:?} of {rows}")));
            }
            let mut out = Vec::with_capacity(indices.len() * v.len() / rows);
            for &i in indices {
                out.extend_from_slice(v.row(i));
            }
            let mut shape = v.shape().to_vec();
            shape[0] = indices.len();
            Tensor::from_parts(shape, out)
        };
        self.push(
            t,
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
            },
            self.rg(&[x]),
            "index_select",
        )
    }

    /// Identity in the forward pass; contributes no gradient to `x`.
    pub fn stop_gradient(&self, x: Var) -> Result<Var> {
        let value = {
            let mut mode = self.stop_grads.borrow_mut();
            let current = self.value(x).clone();
            match &mut *mode {
                StopGradMode::Plain => current,
                StopGradMode::Record(rec) => {
                    rec.push(current.clone());
                    current
                }
                StopGradMode::Replay { values, cursor } => {
                    let v = values
                        .get(*cursor)
                        .cloned()
                        .ok_or_else(|| Error::invalid("stop-gradient replay exhausted"))?;
                    if v.shape() != current.shape() {
                        return Err(Error::shape("stop_gradient", "replayed value has a different shape"));
                    }
                    *cursor += 1;
                    v
                }
            }
        };
        self.push(value, Op::StopGradient, false, "stop_gradient")
    }

    // ── network layers ─────────────────────────────────────────────────

    /// Channels-last convolution over three spatial axes:
    /// `x: [N, D, H, W, Cin]`, `w: [KD, KH, KW, Cin, Cout]`.
    pub fn conv(&self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let t = {
            let nodes = self.nodes.borrow();
            conv::forward(&nodes[x.0].value, &nodes[w.0].value, &geom)?
        };
        self.push(t, Op::Conv { x, w, geom }, self.rg(&[x, w]), "conv")
    }

    /// Batch normalization over every axis but the last, using the batch's
    /// own statistics. Returns the output and the statistics so the caller
    /// can update running estimates.
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (t, xhat, inv_std, stats) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let c = bn_check(tx, tg, tb)?;
            let m = tx.len() / c;
            if m < 2 {
                return Err(Error::invalid("batch norm in train mode needs at least 2 rows"));
            }
            let mut mean = vec![0.0; c];
            for row in tx.data().chunks(c) {
                mean.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            mean.iter_mut().for_each(|s| *s /= m as f64);
            let mut var = vec![0.0; c];
            for row in tx.data().chunks(c) {
                for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
            let biased: Vec<f64> = var.iter().map(|s| s / m as f64).collect();
            let unbiased: Vec<f64> = var.iter().map(|s| s / (m - 1) as f64).collect();
            let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (out, xhat) = bn_apply(tx.data(), tg.data(), tb.data(), &mean, &inv_std, c);
            (
                Tensor::from_parts(tx.shape().to_vec(), out),
                xhat,
                inv_std,
                BatchStats { mean, var: unbiased },
            )
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch: true,
        };
        let v = self.push(t, op, self.rg(&[x, gamma, beta]), "batch_norm")?;
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (t, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let c = bn_check(tx, tg, tb)?;
            if mean.len() != c || var.len() != c {
                return Err(Error::shape("batch_norm", "running statistics width"));
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let (out, xhat) = bn_apply(tx.data(), tg.data(), tb.data(), mean, &inv_std, c);
            (Tensor::from_parts(tx.shape().to_vec(), out), xhat, inv_std)
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch: false,
        };
        self.push(t, op, self.rg(&[x, gamma, beta]), "batch_norm")
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` with respect to every node
    /// that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let mut out = Vec::with_capacity(nodes.len());
        for (node, g) in nodes.iter().zip(grads) {
            match g {
                Some(g) if node.requires_grad => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    out.push(Some(Tensor::from_parts(node.value.shape().to_vec(), g)));
                }
                _ => out.push(None),
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads: out, shapes })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if no path from `v` reaches the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(contribution).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

fn accumulate_with(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let needs = |v: &Var| nodes[v.0].requires_grad;
    let val = |v: &Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(a) {
                accumulate(grads, *a, reduce_to(g, node.value.shape(), val(a).shape(), |_, gi| gi));
            }
            if needs(b) {
                accumulate(
                    grads,
                    *b,
                    reduce_to(g, node.value.shape(), val(b).shape(), |_, gi| sign * gi),
                );
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let (ta, tb) = (val(a), val(b));
            let bc = Broadcast::new(ta.shape(), tb.shape(), "backward").expect("validated in forward");
            if needs(a) {
                let mut ga = vec![0.0; ta.len()];
                for (i, (&ia, &ib)) in bc.a_off.iter().zip(&bc.b_off).enumerate() {
                    let y = tb.data()[ib];
                    ga[ia] += if is_div { g[i] / y } else { g[i] * y };
                }
                accumulate(grads, *a, ga);
            }
            if needs(b) {
                let mut gb = vec![0.0; tb.len()];
                for (i, (&ia, &ib)) in bc.a_off.iter().zip(&bc.b_off).enumerate() {
                    let (x, y) = (ta.data()[ia], tb.data()[ib]);
                    gb[ib] += if is_div { -g[i] * x / (y * y) } else { g[i] * x };
                }
                accumulate(grads, *b, gb);
            }
        }
        Op::Scale(x, c) => {
            if needs(x) {
                accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
        }
        Op::AddScalar(x) | Op::Reshape(x) => {
            if needs(x) {
                accumulate(grads, *x, g.to_vec());
            }
        }
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if needs(a) {
                let bt = transpose_data(tb.data(), k, n);
                let mut ga = vec![0.0; m * k];
                matmul_into(g, &bt, &mut ga, m, n, k);
                accumulate(grads, *a, ga);
            }
            if needs(b) {
                let at = transpose_data(ta.data(), m, k);
                let mut gb = vec![0.0; k * n];
                matmul_into(&at, g, &mut gb, k, m, n);
                accumulate(grads, *b, gb);
            }
        }
        Op::Transpose(x) => {
            if needs(x) {
                let s = node.value.shape();
                accumulate(grads, *x, transpose_data(g, s[0], s[1]));
            }
        }
        Op::Relu(x) => {
            if needs(x) {
                let xv = val(x).data();
                accumulate(
                    grads,
                    *x,
                    g.iter().zip(xv).map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 }).collect(),
                );
            }
        }
        Op::Exp(x) => {
            if needs(x) {
                accumulate(grads, *x, g.iter().zip(node.value.data()).map(|(a, b)| a * b).collect());
            }
        }
        Op::Log(x) => {
            if needs(x) {
                accumulate(grads, *x, g.iter().zip(val(x).data()).map(|(a, b)| a / b).collect());
            }
        }
        Op::Sum(x) => {
            if needs(x) {
                accumulate(grads, *x, vec![g[0]; val(x).len()]);
            }
        }
        Op::SumAxis(x, axis) => {
            if needs(x) {
                let s = val(x).shape();
                let (outer, len, inner) = axis_split(s, *axis, "").unwrap();
                let mut gx = vec![0.0; val(x).len()];
                for o in 0..outer {
                    for a in 0..len {
                        gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::Softmax(x) => {
            if needs(x) {
                let c = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(node.value.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::LogSoftmax(x) => {
            if needs(x) {
                let c = *node.value.shape().last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(node.value.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = gi - yi.exp() * total;
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::CrossEntropy { logits, labels } => {
            if needs(logits) {
                let t = val(logits);
                let c = t.shape()[1];
                let scale = g[0] / labels.len() as f64;
                let mut gx = t.data().to_vec();
                for (row, &l) in gx.chunks_mut(c).zip(labels) {
                    softmax_in_place(row);
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(grads, *logits, gx);
            }
        }
        Op::Concat { inputs, axis } => {
            let s = node.value.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let total = s[*axis];
            let mut offset = 0;
            for v in inputs {
                let w = val(v).shape()[*axis];
                if needs(v) {
                    let mut gv = Vec::with_capacity(val(v).len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&g[base..base + w * inner]);
                    }
                    accumulate(grads, *v, gv);
                }
                offset += w;
            }
        }
        Op::Slice { x, axis, start } => {
            if needs(x) {
                let s = val(x).shape();
                let (outer, len, inner) = axis_split(s, *axis, "").unwrap();
                let w = node.value.shape()[*axis];
                let n = val(x).len();
                accumulate_with(grads, *x, n, |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * len + start) * inner..(o * len + start + w) * inner];
                        dst.iter_mut()
                            .zip(&g[o * w * inner..(o + 1) * w * inner])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
        }
        Op::Reverse { x, axis } => {
            if needs(x) {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis, "").unwrap();
                let mut gx = Vec::with_capacity(g.len());
                for o in 0..outer {
                    for a in (0..len).rev() {
                        gx.extend_from_slice(&g[(o * len + a) * inner..(o * len + a + 1) * inner]);
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::IndexSelect { x, indices } => {
            if needs(x) {
                let tx = val(x);
                let w = tx.len() / tx.shape()[0];
                accumulate_with(grads, *x, tx.len(), |gx| {
                    for (r, &i) in indices.iter().enumerate() {
                        gx[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
        }
        Op::L2Norm(x) => {
            if needs(x) {
                let tx = val(x);
                let c = *tx.shape().last().unwrap();
                let mut gx = vec![0.0; tx.len()];
                for (r, (xr, out)) in tx.data().chunks(c).zip(gx.chunks_mut(c)).enumerate() {
                    let scale = g[r] / node.value.data()[r];
                    out.iter_mut().zip(xr).for_each(|(o, v)| *o = v * scale);
                }
                accumulate(grads, *x, gx);
            }
        }
        Op::Conv { x, w, geom } => {
            let (gx, gw) = conv::backward(val(x), val(w), geom, g, needs(x), needs(w));
            if let Some(gx) = gx {
                accumulate(grads, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, *w, gw);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch,
        } => {
            let c = inv_std.len();
            let m = xhat.len() / c;
            let gam = val(gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    dgamma[j] += gr[j] * xr[j];
                    dbeta[j] += gr[j];
                }
            }
            if needs(x) {
                let mut gx = vec![0.0; g.len()];
                for ((gr, xr), out) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)) {
                    for j in 0..c {
                        out[j] = if *batch {
                            // d/dx of gamma * (x - mean(x)) / std(x) + beta
                            gam[j] * inv_std[j] * (gr[j] - dbeta[j] / m as f64 - xr[j] * dgamma[j] / m as f64)
                        } else {
                            gam[j] * inv_std[j] * gr[j]
                        };
                    }
                }
                accumulate(grads, *x, gx);
            }
            if needs(gamma) {
                accumulate(grads, *gamma, dgamma);
            }
            if needs(beta) {
                accumulate(grads, *beta, dbeta);
            }
        }
    }
}

fn bn_check(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let c = *x.shape().last().unwrap();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("input {:?} with {} scale / {} shift", x.shape(), gamma.len(), beta.len()),
        ));
    }
    Ok(c)
}

fn bn_apply(x: &[f64], gamma: &[f64], beta: &[f64], mean: &[f64], inv_std: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    for row in x.chunks(c) {
        for j in 0..c {
            let h = (row[j] - mean[j]) * inv_std[j];
            xhat.push(h);
            out.push(gamma[j] * h + beta[j]);
        }
    }
    (out, xhat)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} for shape {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Flat element offsets of each operand for every output element of a
/// numpy-style broadcast.
struct Broadcast {
    out_shape: Vec<usize>,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize], op: &'static str) -> Result<Self> {
        let nd = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; nd - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(nd);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
            }
            out_shape.push(x.max(y));
        }
        let eff = |p: &[usize]| -> Vec<usize> {
            strides(p)
                .into_iter()
                .zip(p)
                .map(|(s, &d)| if d == 1 { 0 } else { s })
                .collect()
        };
        let (sa, sb) = (eff(&pa), eff(&pb));
        let n: usize = out_shape.iter().product();
        let mut a_off = Vec::with_capacity(n);
        let mut b_off = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        let (mut oa, mut ob) = (0usize, 0usize);
        for _ in 0..n {
            a_off.push(oa);
            b_off.push(ob);
            for d in (0..nd).rev() {
                idx[d] += 1;
                oa += sa[d];
                ob += sb[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                oa -= sa[d] * idx[d];
                ob -= sb[d] * idx[d];
                idx[d] = 0;
            }
        }
        Ok(Self { out_shape, a_off, b_off })
    }
}

/// Sums an output-shaped gradient down to an operand's (broadcast) shape.
fn reduce_to(g: &[f64], out_shape: &[usize], shape: &[usize], f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    if out_shape == shape {
        return g.iter().enumerate().map(|(i, &v)| f(i, v)).collect();
    }
    let bc = Broadcast::new(out_shape, shape, "backward").expect("validated in forward");
    let mut r = vec![0.0; shape.iter().product()];
    for (i, &j) in bc.b_off.iter().enumerate() {
        r[j] += f(i, g[i]);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(g: &Graph, data: &[f64], rg: bool) -> Var {
        g.leaf(Tensor::vector(data.to_vec()), rg).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
        let i = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::new();
        let x = v(&g, &[0.0, 0.0, 0.0], false);
        let s = g.softmax(x).unwrap();
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reverse_vector() {
        let g = Graph::new();
        let x = v(&g, &[1.0, 2.0, 3.0], false);
        let r = g.reverse(x, 0).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 2.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let g = Graph::new();
        let x = v(&g, &[0.3, -2.0, 5.0], true);
        let s = g.sum(x).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let g = Graph::new();
        let x = v(&g, &[1.0, 2.0], true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn stop_gradient_freezes_one_factor() {
        let g = Graph::new();
        let x = v(&g, &[3.0], true);
        let sx = g.stop_gradient(x).unwrap();
        let p = g.mul(x, sx).unwrap();
        let s = g.sum(p).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[3.0]);

        let g = Graph::new();
        let x = v(&g, &[1.0, -1.0], true);
        let sx = g.stop_gradient(x).unwrap();
        let s = g.sum(sx).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let g = Graph::new();
        let x = v(&g, &[1.0, 2.0], true);
        let y = v(&g, &[5.0], true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.wrt(y).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = v(&g, &[1.0, 2.0], true);
        assert!(matches!(g.backward(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let g = Graph::new();
        let x = v(&g, &[0.0], true);
        assert!(matches!(g.log(x), Err(Error::NonFinite { .. })));
        let big = v(&g, &[1e6], true);
        assert!(matches!(g.exp(big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = Graph::new();
        let a = v(&g, &[1.0, 2.0], false);
        let b = v(&g, &[1.0, 2.0, 3.0], false);
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
        assert!(g.div(a, g.constant(Tensor::vector(vec![1.0, 0.0])).unwrap()).is_err());
    }

    #[test]
    fn broadcast_bias_add() {
        let g = Graph::new();
        let x = g.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap()).unwrap();
        let b = v(&g, &[10.0, 20.0], true);
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn constant_feature_batch_norm_outputs_shift() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 1], vec![2.5; 4]).unwrap()).unwrap();
        let gamma = v(&g, &[1.7], true);
        let beta = v(&g, &[0.3], true);
        let (y, _) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&o| (o - 0.3).abs() < 1e-12));
    }

    #[test]
    fn unit_batch_is_nearly_unchanged_by_batch_norm() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap()).unwrap();
        let gamma = v(&g, &[1.0], false);
        let beta = v(&g, &[0.0], false);
        let (y, stats) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let out = g.value(y);
        assert!((out.data()[0] + 1.0).abs() < 1e-5 && (out.data()[1] - 1.0).abs() < 1e-5);
        assert_eq!(stats.mean, vec![0.0]);
        assert_eq!(stats.var, vec![2.0]);
    }

    #[test]
    fn batch_norm_needs_two_rows() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        let gamma = v(&g, &[1.0, 1.0], false);
        let beta = v(&g, &[0.0, 0.0], false);
        assert!(g.batch_norm_train(x, gamma, beta, 1e-5).is_err());
    }

    #[test]
    fn replay_substitutes_stop_gradient_values() {
        let g = Graph::recording();
        let x = v(&g, &[1.0, 2.0], true);
        let _ = g.stop_gradient(x).unwrap();
        let rec = g.take_recorded_stop_gradients();
        assert_eq!(rec.len(), 1);

        let g = Graph::replaying(rec);
        let x = v(&g, &[7.0, 9.0], true);
        let s = g.stop_gradient(x).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0]);
    }
}
