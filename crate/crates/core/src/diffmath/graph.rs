//! Eagerly evaluated expression graph over a [`ParamStore`].
//!
//! Every node is a dense vector (scalars are length-1 vectors). Values are
//! computed when a node is created, so builders can inspect intermediate
//! results; [`Graph::backward`] then walks the nodes in reverse creation order
//! and accumulates exact derivatives into per-slot gradient buffers.
//!
//! The vocabulary is fixed: add, sub, scale, mul, div, matvec, row lookup,
//! concat, tanh, exp, log, sigmoid, dot, l2norm, softmax, sum, mean and
//! squared distance.

use super::params::{ParamStore, SlotId, SlotKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(SlotId),
    Input,
    Add(Vec<NodeId>),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatVec(SlotId, NodeId),
    Row(SlotId, usize),
    Concat(Vec<NodeId>),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Dot(NodeId, NodeId),
    L2Norm(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SqDist(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Gradients for every slot of a store; `None` for frozen slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn zeros(params: &ParamStore) -> Self {
        Grads {
            slots: params
                .slots()
                .iter()
                .map(|s| s.trainable.then(|| vec![0.0; s.len()]))
                .collect(),
        }
    }

    pub fn get(&self, id: SlotId) -> Option<&[f64]> {
        self.slots.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Largest absolute entry; NaN if any entry is NaN.
    pub fn max_abs(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v.abs()) })
    }

    fn slot_mut(&mut self, id: SlotId) -> Option<&mut Vec<f64>> {
        self.slots[id.index()].as_mut()
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    pub fn dim(&self, id: NodeId) -> usize {
        self.nodes[id.0].value.len()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn describe(&self, id: NodeId) -> String {
        format!("node {} (dim {})", id.0, self.dim(id))
    }

    fn same_dim(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.dim(a) != self.dim(b) {
            return Err(Error::shape(op, self.describe(a), self.describe(b)));
        }
        Ok(())
    }

    /// A vector-valued parameter slot.
    pub fn param(&mut self, slot: SlotId) -> Result<NodeId> {
        let s = self.params.slot(slot);
        if s.kind != SlotKind::Vector {
            return Err(Error::shape("param", s.shape_string(), "vector"));
        }
        let value = s.data.clone();
        Ok(self.push(Op::Param(slot), value))
    }

    /// A constant; receives no gradient.
    pub fn input(&mut self, value: Vec<f64>) -> Result<NodeId> {
        if value.is_empty() {
            return Err(Error::shape("input", "empty vector", "dim >= 1"));
        }
        Ok(self.push(Op::Input, value))
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.push(Op::Input, vec![value])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_all(&[a, b])
    }

    pub fn add_all(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = terms.first() else {
            return Err(Error::shape("add", "no operands", "at least one"));
        };
        let mut value = self.value(first).to_vec();
        for &t in &terms[1..] {
            self.same_dim("add", first, t)?;
            for (acc, v) in value.iter_mut().zip(self.value(t)) {
                *acc += v;
            }
        }
        Ok(self.push(Op::Add(terms.to_vec()), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dim("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).iter().map(|x| x * factor).collect();
        self.push(Op::Scale(a, factor), value)
    }

    fn broadcast_pair(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (da, db) = (self.dim(a), self.dim(b));
        if da == db || db == 1 || (op == "mul" && da == 1) {
            Ok(())
        } else {
            Err(Error::shape(op, self.describe(a), self.describe(b)))
        }
    }

    /// Element-wise product; either side may be a scalar.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_pair("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.len().max(vb.len());
        let value = (0..n)
            .map(|i| va[if va.len() == 1 { 0 } else { i }] * vb[if vb.len() == 1 { 0 } else { i }])
            .collect();
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Element-wise quotient; the divisor may be a scalar.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.broadcast_pair("div", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if vb.contains(&0.0) {
            return Err(Error::domain("div", format!("division by zero in {}", self.describe(b))));
        }
        let value = va
            .iter()
            .enumerate()
            .map(|(i, x)| x / vb[if vb.len() == 1 { 0 } else { i }])
            .collect();
        Ok(self.push(Op::Div(a, b), value))
    }

    pub fn matvec(&mut self, w: SlotId, x: NodeId) -> Result<NodeId> {
        let s = self.params.slot(w);
        if s.kind != SlotKind::Matrix || s.cols != self.dim(x) {
            return Err(Error::shape("matvec", s.shape_string(), self.describe(x)));
        }
        let xv = self.value(x);
        let value = s
            .data
            .chunks(s.cols)
            .map(|row| row.iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.push(Op::MatVec(w, x), value))
    }

    /// Row `row` of a matrix slot (embedding lookup).
    pub fn row(&mut self, table: SlotId, row: usize) -> Result<NodeId> {
        let s = self.params.slot(table);
        if s.kind != SlotKind::Matrix || row >= s.rows {
            return Err(Error::shape("row", s.shape_string(), format!("row {row}")));
        }
        let value = s.row(row).to_vec();
        Ok(self.push(Op::Row(table, row), value))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands", "at least one"));
        }
        let value = parts.iter().flat_map(|&p| self.value(p).iter().copied()).collect();
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(a), value)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain("log", format!("argument {bad} is not positive")));
        }
        let value = self.value(a).iter().map(|x| x.ln()).collect();
        Ok(self.push(Op::Log(a), value))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), value)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dim("dot", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot(a, b), vec![v]))
    }

    pub fn l2norm(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(Op::L2Norm(a), vec![v])
    }

    /// Max-subtracted softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let value = softmax(self.value(a));
        self.push(Op::Softmax(a), value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![v])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = x.iter().sum::<f64>() / x.len() as f64;
        self.push(Op::Mean(a), vec![v])
    }

    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_dim("sq_dist", a, b)?;
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::SqDist(a, b), vec![v]))
    }

    /// Reverse-mode pass from a scalar node. Returns the node value and the
    /// gradient with respect to every trainable slot.
    pub fn backward(&self, loss: NodeId) -> Result<(f64, Grads)> {
        if self.dim(loss) != 1 {
            return Err(Error::shape("backward", self.describe(loss), "scalar"));
        }
        let mut grads = Grads::zeros(self.params);
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        fn acc<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> &'a mut Vec<f64> {
            adj[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => {
                    if let Some(buf) = grads.slot_mut(*slot) {
                        buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v);
                    }
                }
                Op::Add(terms) => {
                    for &t in terms {
                        let a = acc(&mut adj, &self.nodes, t);
                        a.iter_mut().zip(&g).for_each(|(b, v)| *b += v);
                    }
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, &self.nodes, *a).iter_mut().zip(&g).for_each(|(x, v)| *x += v);
                    acc(&mut adj, &self.nodes, *b).iter_mut().zip(&g).for_each(|(x, v)| *x -= v);
                }
                Op::Scale(a, c) => {
                    acc(&mut adj, &self.nodes, *a)
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, v)| *x += c * v);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    let pick = |v: &[f64], k: usize| v[if v.len() == 1 { 0 } else { k }];
                    let ga = acc(&mut adj, &self.nodes, *a);
                    let sa = ga.len() == 1;
                    for (k, gk) in g.iter().enumerate() {
                        ga[if sa { 0 } else { k }] += gk * pick(&vb, k);
                    }
                    let gb = acc(&mut adj, &self.nodes, *b);
                    let sb = gb.len() == 1;
                    for (k, gk) in g.iter().enumerate() {
                        gb[if sb { 0 } else { k }] += gk * pick(&va, k);
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    let den = |k: usize| vb[if vb.len() == 1 { 0 } else { k }];
                    let ga = acc(&mut adj, &self.nodes, *a);
                    for (k, gk) in g.iter().enumerate() {
                        ga[k] += gk / den(k);
                    }
                    let gb = acc(&mut adj, &self.nodes, *b);
                    let sb = gb.len() == 1;
                    for (k, gk) in g.iter().enumerate() {
                        let d = den(k);
                        gb[if sb { 0 } else { k }] -= gk * va[k] / (d * d);
                    }
                }
                Op::MatVec(w, x) => {
                    let s = self.params.slot(*w);
                    let xv = self.value(*x);
                    if let Some(buf) = grads.slot_mut(*w) {
                        for (r, gr) in g.iter().enumerate() {
                            let row = &mut buf[r * s.cols..(r + 1) * s.cols];
                            row.iter_mut().zip(xv).for_each(|(b, xj)| *b += gr * xj);
                        }
                    }
                    let gx = acc(&mut adj, &self.nodes, *x);
                    for (r, gr) in g.iter().enumerate() {
                        gx.iter_mut().zip(s.row(r)).for_each(|(b, wij)| *b += gr * wij);
                    }
                }
                Op::Row(table, r) => {
                    let cols = self.params.slot(*table).cols;
                    if let Some(buf) = grads.slot_mut(*table) {
                        buf[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(b, v)| *b += v);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.dim(p);
                        acc(&mut adj, &self.nodes, p)
                            .iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(b, v)| *b += v);
                        off += n;
                    }
                }
                Op::Tanh(a) => {
                    acc(&mut adj, &self.nodes, *a)
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(b, (gk, yk))| *b += gk * (1.0 - yk * yk));
                }
                Op::Exp(a) => {
                    acc(&mut adj, &self.nodes, *a)
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(b, (gk, yk))| *b += gk * yk);
                }
                Op::Log(a) => {
                    let xa = self.value(*a).to_vec();
                    acc(&mut adj, &self.nodes, *a)
                        .iter_mut()
                        .zip(g.iter().zip(&xa))
                        .for_each(|(b, (gk, xk))| *b += gk / xk);
                }
                Op::Sigmoid(a) => {
                    acc(&mut adj, &self.nodes, *a)
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(b, (gk, yk))| *b += gk * yk * (1.0 - yk));
                }
                Op::Dot(a, b) => {
                    let (va, vb) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    acc(&mut adj, &self.nodes, *a)
                        .iter_mut()
                        .zip(&vb)
                        .for_each(|(x, v)| *x += g[0] * v);
                    acc(&mut adj, &self.nodes, *b)
                        .iter_mut()
                        .zip(&va)
                        .for_each(|(x, v)| *x += g[0] * v);
                }
                Op::L2Norm(a) => {
                    // zero subgradient at the origin
                    if y[0] > 0.0 {
                        let va = self.value(*a).to_vec();
                        acc(&mut adj, &self.nodes, *a)
                            .iter_mut()
                            .zip(&va)
                            .for_each(|(x, v)| *x += g[0] * v / y[0]);
                    }
                }
                Op::Softmax(a) => {
                    let gy: f64 = g.iter().zip(y).map(|(gk, yk)| gk * yk).sum();
                    acc(&mut adj, &self.nodes, *a)
                        .iter_mut()
                        .zip(g.iter().zip(y))
                        .for_each(|(b, (gk, yk))| *b += yk * (gk - gy));
                }
                Op::Sum(a) => {
                    acc(&mut adj, &self.nodes, *a).iter_mut().for_each(|b| *b += g[0]);
                }
                Op::Mean(a) => {
                    let n = self.dim(*a) as f64;
                    acc(&mut adj, &self.nodes, *a).iter_mut().for_each(|b| *b += g[0] / n);
                }
                Op::SqDist(a, b) => {
                    let diff: Vec<f64> = self
                        .value(*a)
                        .iter()
                        .zip(self.value(*b))
                        .map(|(x, z)| 2.0 * g[0] * (x - z))
                        .collect();
                    acc(&mut adj, &self.nodes, *a)
                        .iter_mut()
                        .zip(&diff)
                        .for_each(|(x, d)| *x += d);
                    acc(&mut adj, &self.nodes, *b)
                        .iter_mut()
                        .zip(&diff)
                        .for_each(|(x, d)| *x -= d);
                }
            }
        }
        Ok((self.scalar(loss), grads))
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

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Builds an expression with `build`, evaluates it and returns its value and
/// gradients with respect to every trainable slot of `params`.
pub fn eval_with_grads<F>(params: &ParamStore, build: F) -> Result<(f64, Grads)>
where
    F: FnOnce(&mut Graph<'_>) -> Result<NodeId>,
{
    let mut g = Graph::new(params);
    let loss = build(&mut g)?;
    g.backward(loss)
}
