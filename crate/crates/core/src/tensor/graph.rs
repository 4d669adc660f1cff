use std::collections::HashMap;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis selector for [`Graph::concat`] and [`Graph::slice`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    LogSumExp(Var),
    LayerNorm(Var, f64),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, usize, usize),
    Sum(Var),
    SumCols(Var),
    Mean(Var),
    Square(Var),
    Scale(Var, f64),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(vs, _) => vs.clone(),
            Op::Transpose(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::LogSumExp(a)
            | Op::LayerNorm(a, _)
            | Op::Slice(a, ..)
            | Op::Sum(a)
            | Op::SumCols(a)
            | Op::Mean(a)
            | Op::Square(a)
            | Op::Scale(a, _) => vec![*a],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Records primitive operations in topological order.
///
/// Operations are evaluated eagerly as they are added. Leaf values can be
/// rebound afterwards and the whole graph replayed with [`Graph::recompute`],
/// which is what [`Graph::evaluate`] and finite-difference checking use.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
    leaf_names: Vec<(Var, String)>,
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

    fn leaf(&mut self, name: Option<&str>, value: Tensor, requires_grad: bool) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf { requires_grad },
            value,
            needs_grad: requires_grad,
        });
        if let Some(name) = name {
            self.names.insert(name.to_string(), v);
            self.leaf_names.push((v, name.to_string()));
        }
        v
    }

    /// A named leaf that does not require gradients.
    pub fn input(&mut self, name: &str, value: Tensor) -> Var {
        self.leaf(Some(name), value, false)
    }

    /// A named leaf that requires gradients.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        self.leaf(Some(name), value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(None, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    pub fn name_of(&self, v: Var) -> Option<&str> {
        self.leaf_names
            .iter()
            .find(|(lv, _)| *lv == v)
            .map(|(_, n)| n.as_str())
    }

    /// Named leaves that require gradients, in creation order.
    pub fn params(&self) -> Vec<(Var, &str)> {
        self.leaf_names
            .iter()
            .filter(|(v, _)| self.requires_grad(*v))
            .map(|(v, n)| (*v, n.as_str()))
            .collect()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { requires_grad: true })
    }

    /// Replaces a leaf value. The new value must have the same shape.
    /// Dependent nodes are stale until [`Graph::recompute`] runs.
    pub fn set(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf { .. }) {
            return Err(Error::Contract(format!("node {} is not a leaf", v.0)));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    pub(crate) fn leaf_data_mut(&mut self, v: Var) -> &mut [f64] {
        debug_assert!(matches!(self.nodes[v.0].op, Op::Leaf { .. }));
        self.nodes[v.0].value.data_mut()
    }

    /// Re-evaluates every non-leaf node from the current leaf values.
    pub fn recompute(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let value = compute(&self.nodes[i].op, &self.nodes)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Binds named inputs, replays the graph and returns the requested outputs.
    pub fn evaluate(&mut self, inputs: &[(&str, Tensor)], outputs: &[Var]) -> Result<Vec<Tensor>> {
        for (name, value) in inputs {
            let v = self
                .lookup(name)
                .ok_or_else(|| Error::Contract(format!("unbound input {name:?}")))?;
            self.set(v, value.clone())?;
        }
        self.recompute()?;
        Ok(outputs.iter().map(|&v| self.value(v).clone()).collect())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = compute(&op, &self.nodes)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    /// Elementwise sum. Either operand may broadcast along an axis of size 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    /// Log-sum-exp over the last axis, producing a `[rows, 1]` column.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSumExp(a))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm(a, eps))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        self.push(Op::Concat(parts.to_vec(), axis))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        self.push(Op::Slice(a, axis, start, end))
    }

    /// Sum of all entries as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    /// Sum over the last axis, producing a `[rows, 1]` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumCols(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, factor))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
    ///
    /// Leaves that do not influence `output` get exact zeros.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        for &v in wrt {
            if !self.requires_grad(v) {
                return Err(Error::Contract(format!(
                    "gradient requested for node {} without requires_grad",
                    v.0
                )));
            }
        }
        let grads = self.backward(output)?;
        Ok(wrt
            .iter()
            .map(|&v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            })
            .collect())
    }

    /// Gradients for every named parameter leaf, keyed by name.
    pub fn param_gradients(&self, output: Var) -> Result<Vec<(String, Tensor)>> {
        let grads = self.backward(output)?;
        Ok(self
            .params()
            .into_iter()
            .map(|(v, name)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()));
                (name.to_string(), g)
            })
            .collect())
    }

    fn backward(&self, output: Var) -> Result<Vec<Option<Tensor>>> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::Contract(format!(
                "gradient of non-scalar output with shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(out.shape()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf { .. } = node.op {
                grads[i] = Some(g);
                continue;
            }
            for (input, contribution) in self.input_grads(i, &g) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contribution),
                }
            }
        }
        Ok(grads)
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf { .. } => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).as_matrix();
                let n = val(*b).cols();
                let da = kernels::matmul_nt(g.data(), val(*b).data(), m, n, k);
                let db = kernels::matmul_tn(val(*a).data(), g.data(), m, k, n);
                vec![
                    (*a, with_shape(val(*a), da)),
                    (*b, with_shape(val(*b), db)),
                ]
            }
            Op::Transpose(a) => {
                let (r, c) = g.as_matrix();
                vec![(*a, with_shape(val(*a), kernels::transpose(g.data(), r, c)))]
            }
            Op::Add(a, b) => vec![
                (*a, reduce_to(g, val(*a))),
                (*b, reduce_to(g, val(*b))),
            ],
            Op::Sub(a, b) => {
                let mut gb = reduce_to(g, val(*b));
                gb.data_mut().iter_mut().for_each(|x| *x = -*x);
                vec![(*a, reduce_to(g, val(*a))), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let ga = broadcast_zip(g, val(*b), |gv, bv| gv * bv).expect("shape checked");
                let gb = broadcast_zip(g, val(*a), |gv, av| gv * av).expect("shape checked");
                vec![(*a, reduce_to(&ga, val(*a))), (*b, reduce_to(&gb, val(*b)))]
            }
            Op::Exp(a) => vec![(*a, zip_map(g, y, |gv, yv| gv * yv))],
            Op::Log(a) => vec![(*a, zip_map(g, val(*a), |gv, xv| gv / xv))],
            Op::Tanh(a) => vec![(*a, zip_map(g, y, |gv, yv| gv * (1.0 - yv * yv)))],
            Op::Sigmoid(a) => vec![(*a, zip_map(g, y, |gv, yv| gv * yv * (1.0 - yv)))],
            Op::Softmax(a) => {
                let (r, c) = y.as_matrix();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..c {
                        out[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, with_shape(val(*a), out))]
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let (r, c) = x.as_matrix();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let lse = y.data()[i];
                    let gi = g.data()[i];
                    for j in 0..c {
                        out[i * c + j] = gi * (x.data()[i * c + j] - lse).exp();
                    }
                }
                vec![(*a, with_shape(x, out))]
            }
            Op::LayerNorm(a, eps) => {
                let x = val(*a);
                let (r, c) = x.as_matrix();
                let n = c as f64;
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let xr = &x.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let mu = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gx_mean = xr
                        .iter()
                        .zip(gr)
                        .map(|(xv, gv)| gv * (xv - mu) * inv)
                        .sum::<f64>()
                        / n;
                    for j in 0..c {
                        let xhat = (xr[j] - mu) * inv;
                        out[i * c + j] = inv * (gr[j] - g_mean - xhat * gx_mean);
                    }
                }
                vec![(*a, with_shape(x, out))]
            }
            Op::Concat(parts, axis) => {
                let (gr, gc) = g.as_matrix();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (pr, pc) = val(p).as_matrix();
                    let mut out = Vec::with_capacity(pr * pc);
                    match axis {
                        Axis::Rows => {
                            out.extend_from_slice(&g.data()[offset * gc..(offset + pr) * gc]);
                            offset += pr;
                        }
                        Axis::Cols => {
                            for i in 0..gr {
                                out.extend_from_slice(
                                    &g.data()[i * gc + offset..i * gc + offset + pc],
                                );
                            }
                            offset += pc;
                        }
                    }
                    res.push((p, with_shape(val(p), out)));
                }
                res
            }
            Op::Slice(a, axis, start, _) => {
                let x = val(*a);
                let (r, c) = x.as_matrix();
                let (gr, gc) = g.as_matrix();
                let mut out = vec![0.0; r * c];
                for i in 0..gr {
                    for j in 0..gc {
                        let (si, sj) = match axis {
                            Axis::Rows => (i + start, j),
                            Axis::Cols => (i, j + start),
                        };
                        out[si * c + sj] = g.data()[i * gc + j];
                    }
                }
                vec![(*a, with_shape(x, out))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.data()[0]))],
            Op::SumCols(a) => {
                let x = val(*a);
                let (r, c) = x.as_matrix();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    out[i * c..(i + 1) * c].fill(g.data()[i]);
                }
                vec![(*a, with_shape(x, out))]
            }
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), g.data()[0] / x.len() as f64))]
            }
            Op::Square(a) => vec![(*a, zip_map(g, val(*a), |gv, xv| 2.0 * gv * xv))],
            Op::Scale(a, s) => vec![(*a, g.map(|gv| gv * s))],
        }
    }
}

fn with_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape matches input")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    with_shape(b, data)
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(t.as_matrix())
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let err = || Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(err());
    }
    let (ar, ac) = a.as_matrix();
    let (br, bc) = b.as_matrix();
    match (broadcast_dim(ar, br), broadcast_dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(err()),
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(zip_map(a, b, f));
    }
    let (r, c) = broadcast_shape(a, b, "broadcast")?;
    let (ar, ac) = a.as_matrix();
    let (br, bc) = b.as_matrix();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let ia = if ar == 1 { 0 } else { i };
        let ib = if br == 1 { 0 } else { i };
        for j in 0..c {
            let ja = if ac == 1 { 0 } else { j };
            let jb = if bc == 1 { 0 } else { j };
            out.push(f(a.data()[ia * ac + ja], b.data()[ib * bc + jb]));
        }
    }
    Tensor::matrix(r, c, out)
}

/// Sums a broadcast gradient back down to the shape of `like`.
fn reduce_to(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        return g.clone();
    }
    let (gr, gc) = g.as_matrix();
    let (lr, lc) = like.as_matrix();
    let mut out = vec![0.0; lr * lc];
    for i in 0..gr {
        let li = if lr == 1 { 0 } else { i };
        for j in 0..gc {
            let lj = if lc == 1 { 0 } else { j };
            out[li * lc + lj] += g.data()[i * gc + j];
        }
    }
    with_shape(like, out)
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

fn require_finite(x: &Tensor, op: &'static str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain {
            op,
            detail: "non-finite input".into(),
        })
    }
}

fn compute(op: &Op, nodes: &[Node]) -> Result<Tensor> {
    let val = |v: &Var| &nodes[v.0].value;
    match op {
        Op::Leaf { .. } => unreachable!("leaves are not computed"),
        Op::MatMul(a, b) => {
            let (a, b) = (val(a), val(b));
            let (m, k) = dims2(a, "matmul")?;
            let (k2, n) = dims2(b, "matmul")?;
            if k != k2 {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Tensor::matrix(m, n, kernels::matmul(a.data(), b.data(), m, k, n))
        }
        Op::Transpose(a) => {
            let a = val(a);
            let (r, c) = dims2(a, "transpose")?;
            Tensor::matrix(c, r, kernels::transpose(a.data(), r, c))
        }
        Op::Add(a, b) => {
            broadcast_shape(val(a), val(b), "add")?;
            broadcast_zip(val(a), val(b), |x, y| x + y)
        }
        Op::Sub(a, b) => {
            broadcast_shape(val(a), val(b), "sub")?;
            broadcast_zip(val(a), val(b), |x, y| x - y)
        }
        Op::Mul(a, b) => {
            broadcast_shape(val(a), val(b), "mul")?;
            broadcast_zip(val(a), val(b), |x, y| x * y)
        }
        Op::Exp(a) => Ok(unary(val(a), f64::exp)),
        Op::Log(a) => {
            let x = val(a);
            if let Some(bad) = x.data().iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("argument {bad} outside (0, inf)"),
                });
            }
            Ok(unary(x, f64::ln))
        }
        Op::Tanh(a) => Ok(unary(val(a), f64::tanh)),
        Op::Sigmoid(a) => Ok(unary(val(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })),
        Op::Softmax(a) => {
            let x = val(a);
            require_finite(x, "softmax")?;
            let (r, c) = x.as_matrix();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    out[i * c + j] = e;
                    z += e;
                }
                out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= z);
            }
            Ok(with_shape(x, out))
        }
        Op::LogSumExp(a) => {
            let x = val(a);
            require_finite(x, "logsumexp")?;
            dims2(x, "logsumexp")?;
            let (r, c) = x.as_matrix();
            let out = (0..r)
                .map(|i| {
                    let row = &x.data()[i * c..(i + 1) * c];
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
                })
                .collect();
            Tensor::matrix(r, 1, out)
        }
        Op::LayerNorm(a, eps) => {
            let x = val(a);
            let (r, c) = x.as_matrix();
            let n = c as f64;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    out[i * c + j] = (row[j] - mu) * inv;
                }
            }
            Ok(with_shape(x, out))
        }
        Op::Concat(parts, axis) => {
            let first = parts.first().ok_or_else(|| Error::Contract("empty concat".into()))?;
            let (r0, c0) = dims2(val(first), "concat")?;
            let mismatch = |p: &Tensor| Error::Shape {
                op: "concat",
                lhs: val(first).shape().to_vec(),
                rhs: p.shape().to_vec(),
            };
            match axis {
                Axis::Rows => {
                    let mut data = Vec::new();
                    let mut rows = 0;
                    for p in parts {
                        let t = val(p);
                        let (r, c) = dims2(t, "concat")?;
                        if c != c0 {
                            return Err(mismatch(t));
                        }
                        data.extend_from_slice(t.data());
                        rows += r;
                    }
                    Tensor::matrix(rows, c0, data)
                }
                Axis::Cols => {
                    let mut cols = 0;
                    for p in parts {
                        let t = val(p);
                        let (r, c) = dims2(t, "concat")?;
                        if r != r0 {
                            return Err(mismatch(t));
                        }
                        cols += c;
                    }
                    let mut data = Vec::with_capacity(r0 * cols);
                    for i in 0..r0 {
                        for p in parts {
                            data.extend_from_slice(val(p).row_slice(i));
                        }
                    }
                    Tensor::matrix(r0, cols, data)
                }
            }
        }
        Op::Slice(a, axis, start, end) => {
            let x = val(a);
            let (r, c) = dims2(x, "slice")?;
            let limit = match axis {
                Axis::Rows => r,
                Axis::Cols => c,
            };
            if start >= end || *end > limit {
                return Err(Error::Shape {
                    op: "slice",
                    lhs: x.shape().to_vec(),
                    rhs: vec![*start, *end],
                });
            }
            match axis {
                Axis::Rows => Tensor::matrix(end - start, c, x.data()[start * c..end * c].to_vec()),
                Axis::Cols => {
                    let mut data = Vec::with_capacity(r * (end - start));
                    for i in 0..r {
                        data.extend_from_slice(&x.data()[i * c + start..i * c + end]);
                    }
                    Tensor::matrix(r, end - start, data)
                }
            }
        }
        Op::Sum(a) => Ok(Tensor::scalar(val(a).data().iter().sum())),
        Op::SumCols(a) => {
            let x = val(a);
            let (r, c) = x.as_matrix();
            let out = (0..r).map(|i| x.data()[i * c..(i + 1) * c].iter().sum()).collect();
            Tensor::matrix(r, 1, out)
        }
        Op::Mean(a) => {
            let x = val(a);
            if x.is_empty() {
                return Err(Error::Contract("mean of empty tensor".into()));
            }
            // offset by the first entry so a constant tensor averages to itself exactly
            let x0 = x.data()[0];
            let dev = x.data().iter().map(|v| v - x0).sum::<f64>();
            Ok(Tensor::scalar(x0 + dev / x.len() as f64))
        }
        Op::Square(a) => Ok(unary(val(a), |x| x * x)),
        Op::Scale(a, s) => Ok(unary(val(a), |x| x * s)),
    }
}
