//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is an append-only tape rebuilt for every training step. Ops
//! record their inputs and forward values; [`Graph::backward`] replays the
//! tape in reverse and accumulates vector-Jacobian products. There is no
//! broadcasting: every shape mismatch is a hard error, which keeps the
//! kernel small and bugs loud.
//!
//! [`Graph::stop_gradient`] is the identity in the forward direction and
//! contributes nothing in the backward direction; nodes reachable only
//! through it receive no gradient entry.

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Dense row-major tensor of 64-bit floats, optionally attached to a graph
/// node. Detached tensors act as constants and are interned on first use.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    node: Option<NodeId>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    /// Constant tensor. Fails on shape/data length mismatch or non-finite data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor construction".into(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::new(vec![1], vec![value])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            node: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor. Panics on non-scalars (programmer error).
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Detached copy: same value, no graph attachment.
    pub fn detached(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MinElem,
    MaxElem,
    MatMul,
    Relu,
    Exp,
    Log,
    SoftmaxLastAxis,
    ConcatLastAxis,
    Reshape,
    Mean,
    Sum,
    StopGradient,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul_elementwise",
            Op::Div => "div_elementwise",
            Op::MinElem => "min_elementwise",
            Op::MaxElem => "max_elementwise",
            Op::MatMul => "matmul",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::SoftmaxLastAxis => "softmax_lastaxis",
            Op::ConcatLastAxis => "concat_lastaxis",
            Op::Reshape => "reshape",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::StopGradient => "stop_gradient",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Gradient map returned by [`Graph::backward`], keyed by node id.
/// Nodes reachable from the loss only through stop-gradient edges have no
/// entry; [`Gradients::wrt_or_zeros`] reads those as exact zeros.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node_id()?;
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn wrt_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.wrt(t)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

/// Append-only differentiation tape. One graph per training step; values
/// may leave a graph only as detached tensors.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a trainable leaf and returns the attached tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        self.push(Op::Leaf, vec![], t.shape.clone(), t.data.clone())
    }

    fn intern(&mut self, t: &Tensor) -> NodeId {
        match t.node {
            Some(id) => id,
            None => {
                let out = self.push(Op::Leaf, vec![], t.shape.clone(), t.data.clone());
                out.node.unwrap()
            }
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs,
            shape: shape.clone(),
            data: data.clone(),
        });
        Tensor {
            shape,
            data,
            node: Some(id),
        }
    }

    fn push_checked(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<Tensor> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{} forward", op.name()),
            });
        }
        Ok(self.push(op, inputs, shape, data))
    }

    fn elementwise(
        &mut self,
        op: Op,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(Error::Shape {
                op: op.name(),
                detail: format!("{:?} vs {:?}", a.shape, b.shape),
            });
        }
        let ia = self.intern(a);
        let ib = self.intern(b);
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        self.push_checked(op, vec![ia, ib], a.shape.clone(), data)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::Div, a, b, |x, y| x / y)
    }

    pub fn min_elem(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::MinElem, a, b, f64::min)
    }

    pub fn max_elem(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise(Op::MaxElem, a, b, f64::max)
    }

    fn unary(
        &mut self,
        op: Op,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
    ) -> Result<Tensor> {
        let ia = self.intern(a);
        let data = a.data.iter().map(|&x| f(x)).collect();
        self.push_checked(op, vec![ia], a.shape.clone(), data)
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Relu, a, |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Log, a, f64::ln)
    }

    /// Matrix product. Supported ranks: [m,k]x[k,n] -> [m,n],
    /// [m,k]x[k] -> [m], [k]x[k,n] -> [n].
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k, n, out_shape) = match (a.shape.as_slice(), b.shape.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => (*m, *k1, *n, vec![*m, *n]),
            ([m, k1], [k2]) if k1 == k2 => (*m, *k1, 1, vec![*m]),
            ([k1], [k2, n]) if k1 == k2 => (1, *k1, *n, vec![*n]),
            _ => {
                return Err(Error::Shape {
                    op: "matmul",
                    detail: format!("{:?} x {:?}", a.shape, b.shape),
                })
            }
        };
        let ia = self.intern(a);
        let ib = self.intern(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * b.data[p * n + j];
                }
            }
        }
        self.push_checked(Op::MatMul, vec![ia, ib], out_shape, out)
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax_lastaxis(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.intern(a);
        let last = *a.shape.last().ok_or(Error::Shape {
            op: "softmax_lastaxis",
            detail: "rank-0 tensor".into(),
        })?;
        let mut data = vec![0.0; a.data.len()];
        for (row_out, row_in) in data.chunks_mut(last).zip(a.data.chunks(last)) {
            let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &x) in row_out.iter_mut().zip(row_in) {
                *o = (x - max).exp();
                denom += *o;
            }
            for o in row_out.iter_mut() {
                *o /= denom;
            }
        }
        self.push_checked(Op::SoftmaxLastAxis, vec![ia], a.shape.clone(), data)
    }

    /// Concatenation along the last axis; all other axes must agree.
    pub fn concat_lastaxis(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat_lastaxis",
                detail: "no inputs".into(),
            });
        }
        let lead = &parts[0].shape[..parts[0].shape.len() - 1];
        for p in parts {
            if p.shape.is_empty() || &p.shape[..p.shape.len() - 1] != lead {
                return Err(Error::Shape {
                    op: "concat_lastaxis",
                    detail: format!("{:?} vs {:?}", parts[0].shape, p.shape),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape.last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut shape = lead.to_vec();
        shape.push(total);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| self.intern(p)).collect();
        self.push_checked(Op::ConcatLastAxis, ids, shape, data)
    }

    /// Shape reinterpretation of the same row-major data.
    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", a.shape, shape),
            });
        }
        let ia = self.intern(a);
        self.push_checked(Op::Reshape, vec![ia], shape.to_vec(), a.data.clone())
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.intern(a);
        let m = a.data.iter().sum::<f64>() / a.data.len() as f64;
        self.push_checked(Op::Mean, vec![ia], vec![1], vec![m])
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let ia = self.intern(a);
        let s = a.data.iter().sum::<f64>();
        self.push_checked(Op::Sum, vec![ia], vec![1], vec![s])
    }

    /// Forward identity that blocks all gradient flow into `a`.
    pub fn stop_gradient(&mut self, a: &Tensor) -> Tensor {
        let ia = self.intern(a);
        self.push(Op::StopGradient, vec![ia], a.shape.clone(), a.data.clone())
    }

    /// Reverse accumulation from a scalar loss. Deterministic for a fixed
    /// tape: nodes are visited in strictly decreasing id order.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_id = loss.node_id().ok_or(Error::Shape {
            op: "backward",
            detail: "loss is not part of this graph".into(),
        })?;
        if !loss.is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", loss.shape),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.apply_vjp(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]) {
        match &mut grads[id] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            None => grads[id] = Some(contrib.to_vec()),
        }
    }

    fn apply_vjp(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let inp = |i: usize| -> &Node { &self.nodes[node.inputs[i]] };
        match node.op {
            Op::Leaf | Op::StopGradient => {
                // Leaves terminate; stop_gradient contributes nothing upstream.
            }
            Op::Add => {
                Self::accumulate(grads, node.inputs[0], g);
                Self::accumulate(grads, node.inputs[1], g);
            }
            Op::Sub => {
                Self::accumulate(grads, node.inputs[0], g);
                let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                Self::accumulate(grads, node.inputs[1], &neg);
            }
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                let da: Vec<f64> = g.iter().zip(&b.data).map(|(&gi, &bv)| gi * bv).collect();
                let db: Vec<f64> = g.iter().zip(&a.data).map(|(&gi, &av)| gi * av).collect();
                Self::accumulate(grads, node.inputs[0], &da);
                Self::accumulate(grads, node.inputs[1], &db);
            }
            Op::Div => {
                let (a, b) = (inp(0), inp(1));
                let da: Vec<f64> = g.iter().zip(&b.data).map(|(&gi, &bv)| gi / bv).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(a.data.iter().zip(&b.data))
                    .map(|(&gi, (&av, &bv))| -gi * av / (bv * bv))
                    .collect();
                Self::accumulate(grads, node.inputs[0], &da);
                Self::accumulate(grads, node.inputs[1], &db);
            }
            Op::MinElem | Op::MaxElem => {
                // Ties route the full subgradient to the first argument.
                let (a, b) = (inp(0), inp(1));
                let mut da = vec![0.0; a.data.len()];
                let mut db = vec![0.0; b.data.len()];
                for i in 0..g.len() {
                    let first_wins = if node.op == Op::MinElem {
                        a.data[i] <= b.data[i]
                    } else {
                        a.data[i] >= b.data[i]
                    };
                    if first_wins {
                        da[i] = g[i];
                    } else {
                        db[i] = g[i];
                    }
                }
                Self::accumulate(grads, node.inputs[0], &da);
                Self::accumulate(grads, node.inputs[1], &db);
            }
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = match (a.shape.as_slice(), b.shape.as_slice()) {
                    ([m, k], [_, n]) => (*m, *k, *n),
                    ([m, k], [_]) => (*m, *k, 1),
                    ([k], [_, n]) => (1, *k, *n),
                    _ => unreachable!("validated at forward"),
                };
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for j in 0..n {
                        let gi = g[i * n + j];
                        if gi == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            da[i * k + p] += gi * b.data[p * n + j];
                            db[p * n + j] += gi * a.data[i * k + p];
                        }
                    }
                }
                Self::accumulate(grads, node.inputs[0], &da);
                Self::accumulate(grads, node.inputs[1], &db);
            }
            Op::Relu => {
                let out = &node.data;
                let da: Vec<f64> = g
                    .iter()
                    .zip(out)
                    .map(|(&gi, &o)| if o > 0.0 { gi } else { 0.0 })
                    .collect();
                Self::accumulate(grads, node.inputs[0], &da);
            }
            Op::Exp => {
                let out = &node.data;
                let da: Vec<f64> = g.iter().zip(out).map(|(&gi, &o)| gi * o).collect();
                Self::accumulate(grads, node.inputs[0], &da);
            }
            Op::Log => {
                let a = inp(0);
                let da: Vec<f64> = g.iter().zip(&a.data).map(|(&gi, &x)| gi / x).collect();
                Self::accumulate(grads, node.inputs[0], &da);
            }
            Op::SoftmaxLastAxis => {
                let p = &node.data;
                let last = *node.shape.last().unwrap();
                let mut da = vec![0.0; p.len()];
                for r in 0..p.len() / last {
                    let row = r * last;
                    let dot: f64 = (0..last).map(|j| g[row + j] * p[row + j]).sum();
                    for j in 0..last {
                        da[row + j] = p[row + j] * (g[row + j] - dot);
                    }
                }
                Self::accumulate(grads, node.inputs[0], &da);
            }
            Op::ConcatLastAxis => {
                let widths: Vec<usize> = node
                    .inputs
                    .iter()
                    .map(|&i| *self.nodes[i].shape.last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = node.data.len() / total;
                let mut offset = 0;
                for (slot, &w) in node.inputs.iter().zip(&widths) {
                    let mut part = vec![0.0; rows * w];
                    for r in 0..rows {
                        part[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    Self::accumulate(grads, *slot, &part);
                    offset += w;
                }
            }
            Op::Reshape => {
                Self::accumulate(grads, node.inputs[0], g);
            }
            Op::Mean => {
                let a = inp(0);
                let scale = g[0] / a.data.len() as f64;
                let da = vec![scale; a.data.len()];
                Self::accumulate(grads, node.inputs[0], &da);
            }
            Op::Sum => {
                let a = inp(0);
                let da = vec![g[0]; a.data.len()];
                Self::accumulate(grads, node.inputs[0], &da);
            }
        }
    }

    /// Smallest distance to a kink of any piecewise-linear op recorded so
    /// far (relu pre-activation zero, min/max tie). Finite-difference
    /// checks use this to construct test points away from kinks.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match node.op {
                Op::Relu => {
                    let input = &self.nodes[node.inputs[0]];
                    for &x in &input.data {
                        margin = margin.min(x.abs());
                    }
                }
                Op::MinElem | Op::MaxElem => {
                    let a = &self.nodes[node.inputs[0]];
                    let b = &self.nodes[node.inputs[1]];
                    for (&x, &y) in a.data.iter().zip(&b.data) {
                        margin = margin.min((x - y).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

/// Central-difference gradient check.
///
/// `build_loss` must be a deterministic scalar function of the leaf
/// tensors it is handed. Returns the maximum relative error between the
/// reverse-mode gradient and central differences over every coordinate of
/// every parameter; pairs of magnitudes below 1e-6 are compared absolutely.
pub fn check_gradients<F>(build_loss: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!(
            "gradient check eps must be in (0, 1e-2], got {eps}"
        )));
    }

    let eval = |values: &[Tensor]| -> Result<(f64, Option<Gradients>, Vec<Tensor>)> {
        let mut g = Graph::new();
        let leaves: Vec<Tensor> = values.iter().map(|t| g.leaf(t)).collect();
        let loss = build_loss(&mut g, &leaves)?;
        if !loss.is_scalar() {
            return Err(Error::Shape {
                op: "check_gradients",
                detail: format!("loss shape {:?}", loss.shape()),
            });
        }
        let grads = g.backward(&loss)?;
        Ok((loss.item(), Some(grads), leaves))
    };

    let (base_loss, grads, leaves) = eval(params)?;
    let grads = grads.unwrap();
    let (repeat_loss, _, _) = eval(params)?;
    if base_loss.to_bits() != repeat_loss.to_bits() {
        return Err(Error::Data(format!(
            "build_loss is not deterministic: {base_loss} vs {repeat_loss}"
        )));
    }

    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| grads.wrt_or_zeros(l)).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.iter().map(Tensor::detached).collect();
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.numel() {
            let orig = param.data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let mut g = Graph::new();
            let leaves: Vec<Tensor> = work.iter().map(|t| g.leaf(t)).collect();
            let plus = build_loss(&mut g, &leaves)?.item();

            work[pi].data_mut()[ci] = orig - eps;
            let mut g = Graph::new();
            let leaves: Vec<Tensor> = work.iter().map(|t| g.leaf(t)).collect();
            let minus = build_loss(&mut g, &leaves)?.item();

            work[pi].data_mut()[ci] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let ad = analytic[pi][ci];
            let denom = ad.abs().max(fd.abs());
            let err = if denom < 1e-6 {
                (ad - fd).abs()
            } else {
                (ad - fd).abs() / denom
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
