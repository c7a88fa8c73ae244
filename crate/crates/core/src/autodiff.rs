//! A small tape-based reverse-mode differentiator over [`Matrix`] values.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! a valid topological order. A node only carries gradient when one of its
//! inputs does; frozen parameters and constants never get a gradient buffer.

use std::collections::HashMap;

use crate::error::{ensure, Result};
use crate::objectives::{self, CrossEntropyCache, InfoNceCache};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `x + tile(b)`: row `i` of `x` receives row `i mod b.rows` of `b`.
    AddTiled(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        seq_len: usize,
        heads: usize,
        /// One `seq_len × seq_len` weight matrix per (segment, head).
        probs: Vec<Matrix>,
    },
    /// Mean over consecutive blocks of `seg_len` rows.
    SegmentMean(NodeId, usize),
    StackRows(Vec<NodeId>),
    InfoNce {
        queries: NodeId,
        keys: NodeId,
        cache: Box<InfoNceCache>,
    },
    CrossEntropy {
        logits: NodeId,
        cache: Box<CrossEntropyCache>,
    },
    WeightedSum(Vec<(NodeId, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A single forward evaluation. Build it, read values, optionally call
/// [`Graph::backward`] once on a scalar output.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    track: bool,
}

impl Graph {
    /// A graph that tracks gradients for trainable parameters.
    pub fn new() -> Self {
        Self {
            track: true,
            ..Self::default()
        }
    }

    /// A graph in which nothing requires gradient.
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[(0, 0)]
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; one node per parameter per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id) {
            return node;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: self.track && p.trainable,
            param: Some(id),
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push(v, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            InvalidArgument,
            "add shape mismatch: {:?} + {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn add_tiled(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.value(x).shape(), self.value(b).shape());
        ensure!(
            bs.1 == xs.1 && bs.0 >= 1 && xs.0 % bs.0 == 0,
            InvalidArgument,
            "add_tiled shape mismatch: {xs:?} + tile({bs:?})"
        );
        let mut v = self.value(x).clone();
        let bm = self.value(b);
        for i in 0..xs.0 {
            for (o, a) in v.row_mut(i).iter_mut().zip(bm.row(i % bs.0)) {
                *o += a;
            }
        }
        Ok(self.push(v, Op::AddTiled(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).scaled(s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|z| {
            let u = GELU_C * (z + GELU_A * z * z * z);
            0.5 * z * (1.0 + u.tanh())
        });
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        ensure!(
            self.value(gain).shape() == (1, cols) && self.value(bias).shape() == (1, cols),
            InvalidArgument,
            "layer_norm affine parameters must be 1x{cols}"
        );
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xm.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = xhat.clone();
        for i in 0..rows {
            for ((o, gj), bj) in out.row_mut(i).iter_mut().zip(g.row(0)).zip(b.row(0)) {
                *o = *o * gj + bj;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Multi-head scaled dot-product self-attention applied independently
    /// to each block of `seq_len` rows.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, seq_len: usize, heads: usize) -> Result<NodeId> {
        let (rows, width) = self.value(q).shape();
        ensure!(
            self.value(k).shape() == (rows, width) && self.value(v).shape() == (rows, width),
            InvalidArgument,
            "attention q/k/v shapes differ"
        );
        ensure!(
            seq_len >= 1 && rows % seq_len == 0,
            InvalidArgument,
            "attention: {rows} rows is not a multiple of sequence length {seq_len}"
        );
        ensure!(
            heads >= 1 && width % heads == 0,
            InvalidArgument,
            "attention: width {width} not divisible by {heads} heads"
        );
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(rows, width);
        let mut probs = Vec::with_capacity(rows / seq_len * heads);
        for s in 0..rows / seq_len {
            let base = s * seq_len;
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = Matrix::zeros(seq_len, seq_len);
                for i in 0..seq_len {
                    let qi = &qm.row(base + i)[c0..c0 + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..seq_len {
                        let kj = &km.row(base + j)[c0..c0 + dh];
                        let sc = crate::tensor::dot(qi, kj) * scale;
                        p[(i, j)] = sc;
                        mx = mx.max(sc);
                    }
                    let mut z = 0.0;
                    for j in 0..seq_len {
                        let e = (p[(i, j)] - mx).exp();
                        p[(i, j)] = e;
                        z += e;
                    }
                    for j in 0..seq_len {
                        p[(i, j)] /= z;
                    }
                    let orow = &mut out.row_mut(base + i)[c0..c0 + dh];
                    for j in 0..seq_len {
                        let w = p[(i, j)];
                        for (o, vv) in orow.iter_mut().zip(&vm.row(base + j)[c0..c0 + dh]) {
                            *o += w * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    pub fn segment_mean(&mut self, x: NodeId, seg_len: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(x).shape();
        ensure!(
            seg_len >= 1 && rows % seg_len == 0,
            InvalidArgument,
            "segment_mean: {rows} rows is not a multiple of {seg_len}"
        );
        let xm = self.value(x);
        let mut out = Matrix::zeros(rows / seg_len, cols);
        for i in 0..rows {
            for (o, v) in out.row_mut(i / seg_len).iter_mut().zip(xm.row(i)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / seg_len as f64);
        Ok(self.push(out, Op::SegmentMean(x, seg_len), &[x]))
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::stack_rows(&mats)?;
        Ok(self.push(v, Op::StackRows(parts.to_vec()), parts))
    }

    /// Mean InfoNCE over cosine similarities; see [`crate::objectives`].
    pub fn info_nce(
        &mut self,
        queries: NodeId,
        keys: NodeId,
        targets: &[usize],
        exclusions: Option<&[bool]>,
        tau: f64,
    ) -> Result<NodeId> {
        let cache = objectives::info_nce_forward(self.value(queries), self.value(keys), targets, exclusions, tau)?;
        let v = Matrix::filled(1, 1, cache.loss);
        Ok(self.push(
            v,
            Op::InfoNce {
                queries,
                keys,
                cache: Box::new(cache),
            },
            &[queries, keys],
        ))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let cache = objectives::cross_entropy_forward(self.value(logits), labels)?;
        let v = Matrix::filled(1, 1, cache.loss);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                cache: Box::new(cache),
            },
            &[logits],
        ))
    }

    /// `Σ w_i · x_i` over scalar nodes. Zero-weight terms are dropped from
    /// the tape entirely, so nothing flows back through them.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let kept: Vec<(NodeId, f64)> = terms.iter().copied().filter(|&(_, w)| w != 0.0).collect();
        let mut total = 0.0;
        for &(id, w) in &kept {
            ensure!(
                self.value(id).shape() == (1, 1),
                InvalidArgument,
                "weighted_sum expects scalar nodes"
            );
            total += w * self.scalar(id);
        }
        let inputs: Vec<NodeId> = kept.iter().map(|&(id, _)| id).collect();
        Ok(self.push(Matrix::filled(1, 1, total), Op::WeightedSum(kept), &inputs))
    }

    /// Gradients of the scalar `output` with respect to every trainable
    /// parameter it depends on.
    pub fn backward(&self, output: NodeId, num_params: usize) -> Result<Gradients> {
        ensure!(
            self.value(output).shape() == (1, 1),
            InvalidArgument,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result = Gradients::new(num_params);
        if !self.nodes[output.0].requires_grad {
            return Ok(result);
        }
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                result.accumulate(pid, &g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(result)
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut send = |id: NodeId, delta: Matrix| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    send(*a, g.matmul_bt(self.value(*b))?);
                }
                if wants(*b) {
                    send(*b, self.value(*a).matmul_at(g)?);
                }
            }
            Op::MatMulBt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if wants(*a) {
                    send(*a, g.matmul(self.value(*b))?);
                }
                if wants(*b) {
                    send(*b, g.matmul_at(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::AddTiled(x, b) => {
                send(*x, g.clone());
                if wants(*b) {
                    let period = self.value(*b).rows();
                    let mut db = Matrix::zeros(period, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in db.row_mut(i % period).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Scale(x, s) => send(*x, g.scaled(*s)),
            Op::Gelu(x) => {
                let xm = self.value(*x);
                let mut d = g.clone();
                for (o, &z) in d.as_mut_slice().iter_mut().zip(xm.as_slice()) {
                    let u = GELU_C * (z + GELU_A * z * z * z);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * z * z);
                    *o *= 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du;
                }
                send(*x, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                if wants(*gain) || wants(*bias) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            dg[(0, j)] += g[(i, j)] * xhat[(i, j)];
                            db[(0, j)] += g[(i, j)];
                        }
                    }
                    send(*gain, dg);
                    send(*bias, db);
                }
                if wants(*x) {
                    let gm = self.value(*gain);
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for i in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            let dxh = g[(i, j)] * gm[(0, j)];
                            mean_d += dxh;
                            mean_dx += dxh * xhat[(i, j)];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for j in 0..cols {
                            let dxh = g[(i, j)] * gm[(0, j)];
                            dx[(i, j)] = inv_std[i] * (dxh - mean_d - xhat[(i, j)] * mean_dx);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, width) = qm.shape();
                let (seq_len, heads) = (*seq_len, *heads);
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(rows, width);
                let mut dk = Matrix::zeros(rows, width);
                let mut dv = Matrix::zeros(rows, width);
                for s in 0..rows / seq_len {
                    let base = s * seq_len;
                    for h in 0..heads {
                        let c0 = h * dh;
                        let p = &probs[s * heads + h];
                        // dP = dO Vᵀ ; dV = Pᵀ dO
                        let mut dp = Matrix::zeros(seq_len, seq_len);
                        for i in 0..seq_len {
                            let go = &g.row(base + i)[c0..c0 + dh];
                            for j in 0..seq_len {
                                dp[(i, j)] = crate::tensor::dot(go, &vm.row(base + j)[c0..c0 + dh]);
                                let w = p[(i, j)];
                                for (o, gv) in dv.row_mut(base + j)[c0..c0 + dh].iter_mut().zip(go) {
                                    *o += w * gv;
                                }
                            }
                        }
                        // dS = P ∘ (dP - rowsum(dP ∘ P))
                        for i in 0..seq_len {
                            let rs: f64 = (0..seq_len).map(|j| dp[(i, j)] * p[(i, j)]).sum();
                            for j in 0..seq_len {
                                let ds = p[(i, j)] * (dp[(i, j)] - rs) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj: Vec<f64> = km.row(base + j)[c0..c0 + dh].to_vec();
                                for (o, kv) in dq.row_mut(base + i)[c0..c0 + dh].iter_mut().zip(&kj) {
                                    *o += ds * kv;
                                }
                                let qi = &qm.row(base + i)[c0..c0 + dh];
                                for (o, qv) in dk.row_mut(base + j)[c0..c0 + dh].iter_mut().zip(qi) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                }
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
            Op::SegmentMean(x, seg_len) => {
                let rows = self.value(*x).rows();
                let mut dx = Matrix::zeros(rows, g.cols());
                let inv = 1.0 / *seg_len as f64;
                for i in 0..rows {
                    for (o, v) in dx.row_mut(i).iter_mut().zip(g.row(i / seg_len)) {
                        *o = v * inv;
                    }
                }
                send(*x, dx);
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if wants(p) {
                        let slice = g.as_slice()[offset * g.cols()..(offset + r) * g.cols()].to_vec();
                        send(p, Matrix::from_vec(r, g.cols(), slice)?);
                    }
                    offset += r;
                }
            }
            Op::InfoNce { queries, keys, cache } => {
                let (dq, dk) =
                    objectives::info_nce_backward(cache, self.value(*queries), self.value(*keys), g[(0, 0)]);
                send(*queries, dq);
                send(*keys, dk);
            }
            Op::CrossEntropy { logits, cache } => {
                send(*logits, objectives::cross_entropy_backward(cache, g[(0, 0)]));
            }
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    send(id, Matrix::filled(1, 1, w * g[(0, 0)]));
                }
            }
        }
        Ok(())
    }
}
