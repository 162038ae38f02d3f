//! Dense-tensor computation graph with first- and second-order reverse-mode
//! differentiation.
//!
//! The graph is define-then-run: nodes are appended once (parents always before
//! children), leaves are bound to values, and `forward` recomputes every node in
//! insertion order. `backward` does not compute raw gradients directly; it builds
//! the backward pass out of the same primitives, appending gradient nodes to the
//! graph. Calling `backward` again on a scalar assembled from those gradient
//! nodes yields second-order derivatives (backward-of-backward).
//!
//! All tensors are 2-D row-major `f64` matrices. Flattening of images happens on
//! the data side; `reshape` covers the rest.

use std::collections::HashMap;

use crate::error::{GatError, Result};

pub type NodeId = usize;

/// Primitive operations. Every op that can appear on a differentiable path has
/// a vector-Jacobian product expressed in the same primitive set, so the
/// backward pass itself is differentiable.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf { name: String },
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `[n,k] + [1,k]`, bias broadcast over rows.
    AddRow(NodeId, NodeId),
    Relu(NodeId),
    /// Heaviside gate of the relu; derivative is zero everywhere (relu'' := 0).
    Step(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    /// Row-wise softmax.
    Softmax(NodeId),
    /// Row-wise log-sum-exp, `[n,k] -> [n,1]`.
    LogSumExp(NodeId),
    /// Full reduction to `[1,1]`.
    Sum(NodeId),
    /// Sum over rows, `[n,k] -> [1,k]`.
    SumRows(NodeId),
    /// Sum over columns, `[n,k] -> [n,1]`.
    SumCols(NodeId),
    BroadcastRows(NodeId, usize),
    BroadcastCols(NodeId, usize),
    Concat(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    PadCols(NodeId, usize, usize),
    Reshape(NodeId, usize, usize),
}

impl Op {
    fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Leaf { .. } | Const => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | AddRow(a, b)
            | Concat(a, b) => vec![a, b],
            Neg(a) | Scale(a, _) | AddScalar(a, _) | Transpose(a) | Relu(a) | Step(a)
            | Sigmoid(a) | Softplus(a) | Softmax(a) | LogSumExp(a) | Sum(a) | SumRows(a)
            | SumCols(a) | BroadcastRows(a, _) | BroadcastCols(a, _) | SliceCols(a, _, _)
            | PadCols(a, _, _) | Reshape(a, _, _) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    /// Set on gradient nodes created by a non-recording backward pass.
    /// Differentiating through them is an error (the tape was not recording).
    detached: bool,
}

/// Computation graph plus its value tape.
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Vec<f64>>>,
    leaves: HashMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(name: &str, vals: &[f64]) -> Result<()> {
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(GatError::NonFinite(name.to_string()));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), values: Vec::new(), leaves: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        let requires_grad = op
            .parents()
            .iter()
            .any(|&p| self.nodes[p].requires_grad && !self.nodes[p].detached);
        self.nodes.push(Node { op, rows, cols, requires_grad, detached: false });
        self.values.push(None);
        self.nodes.len() - 1
    }

    // ── Construction ────────────────────────────────────────────────

    pub fn leaf(&mut self, name: &str, rows: usize, cols: usize, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf { name: name.to_string() },
            rows,
            cols,
            requires_grad,
            detached: false,
        });
        self.values.push(None);
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, rows: usize, cols: usize, vals: Vec<f64>) -> NodeId {
        assert_eq!(vals.len(), rows * cols, "constant value length");
        let id = self.push(Op::Const, rows, cols);
        self.values[id] = Some(vals);
        id
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(1, 1, vec![v])
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GatError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let (r, c) = self.shape(a);
        Ok(self.push(Op::Add(a, b), r, c))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let (r, c) = self.shape(a);
        Ok(self.push(Op::Sub(a, b), r, c))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let (r, c) = self.shape(a);
        Ok(self.push(Op::Mul(a, b), r, c))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        let (r, c) = self.shape(a);
        Ok(self.push(Op::Div(a, b), r, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Neg(a), r, c)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Scale(a, k), r, c)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::AddScalar(a, k), r, c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(GatError::ShapeMismatch(format!(
                "matmul: ({ar},{ac}) x ({br},{bc})"
            )));
        }
        Ok(self.push(Op::MatMul(a, b), ar, bc))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Transpose(a), c, r)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != c {
            return Err(GatError::ShapeMismatch(format!(
                "add_row: ({r},{c}) + ({br},{bc})"
            )));
        }
        Ok(self.push(Op::AddRow(a, bias), r, c))
    }

    /// `x W + b` with `x: [n,d]`, `w: [d,k]`, `b: [1,k]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Relu(a), r, c)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Sigmoid(a), r, c)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Softplus(a), r, c)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Softmax(a), r, c)
    }

    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.shape(a);
        self.push(Op::LogSumExp(a), r, 1)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), 1, 1)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        self.push(Op::SumRows(a), 1, c)
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.shape(a);
        self.push(Op::SumCols(a), r, 1)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(GatError::ShapeMismatch(format!("broadcast_rows of ({r},{c})")));
        }
        Ok(self.push(Op::BroadcastRows(a, n), n, c))
    }

    pub fn broadcast_cols(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(GatError::ShapeMismatch(format!("broadcast_cols of ({r},{c})")));
        }
        Ok(self.push(Op::BroadcastCols(a, k), r, k))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != br {
            return Err(GatError::ShapeMismatch(format!(
                "concat rows: {ar} vs {br}"
            )));
        }
        Ok(self.push(Op::Concat(a, b), ar, ac + bc))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if lo >= hi || hi > c {
            return Err(GatError::ShapeMismatch(format!(
                "slice_cols {lo}..{hi} of {c}"
            )));
        }
        Ok(self.push(Op::SliceCols(a, lo, hi), r, hi - lo))
    }

    pub fn pad_cols(&mut self, a: NodeId, offset: usize, total: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if offset + c > total {
            return Err(GatError::ShapeMismatch(format!(
                "pad_cols offset {offset} + {c} > {total}"
            )));
        }
        Ok(self.push(Op::PadCols(a, offset, total), r, total))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(GatError::ShapeMismatch(format!(
                "reshape ({r},{c}) -> ({rows},{cols})"
            )));
        }
        Ok(self.push(Op::Reshape(a, rows, cols), rows, cols))
    }

    /// Dot product of two same-shape tensors as a `[1,1]` node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    /// Marks a node as a stop-gradient boundary: downstream nodes treat it as
    /// a constant.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let id = self.push(Op::Reshape(a, r, c), r, c);
        self.nodes[id].requires_grad = false;
        self.nodes[id].detached = true;
        id
    }

    // ── Loss composites ─────────────────────────────────────────────

    /// Per-sample softmax cross-entropy, `[n,1]`. `onehot` is a `[n,k]`
    /// zero/one constant or leaf.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, onehot: NodeId) -> Result<NodeId> {
        let (_, k) = self.shape(logits);
        self.same_shape(logits, onehot, "softmax_cross_entropy")?;
        let lse = self.logsumexp(logits);
        let lse_b = self.broadcast_cols(lse, k)?;
        let log_probs = self.sub(logits, lse_b)?;
        let picked = self.mul(onehot, log_probs)?;
        let per_sample = self.sum_cols(picked);
        Ok(self.neg(per_sample))
    }

    /// Per-sample binary cross-entropy on a single logit column, `[n,1]`.
    /// `targets` holds values in `{0,1}` (or soft labels).
    /// Uses `bce = y*softplus(-z) + (1-y)*softplus(z)`.
    pub fn sigmoid_binary_cross_entropy(
        &mut self,
        logit: NodeId,
        targets: NodeId,
    ) -> Result<NodeId> {
        self.same_shape(logit, targets, "sigmoid_binary_cross_entropy")?;
        let neg_z = self.neg(logit);
        let sp_neg = self.softplus(neg_z);
        let sp_pos = self.softplus(logit);
        let pos_term = self.mul(targets, sp_neg)?;
        let neg_t = self.neg(targets);
        let one_minus = self.add_scalar(neg_t, 1.0);
        let neg_term = self.mul(one_minus, sp_pos)?;
        self.add(pos_term, neg_term)
    }

    /// Per-sample squared error, `[n,1]`.
    pub fn squared_error(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let d = self.sub(pred, target)?;
        self.mul(d, d)
    }

    // ── Evaluation ──────────────────────────────────────────────────

    pub fn bind(&mut self, name: &str, vals: Vec<f64>) -> Result<()> {
        let &id = self
            .leaves
            .get(name)
            .ok_or_else(|| GatError::UnknownLeaf(name.to_string()))?;
        let n = self.nodes[id].rows * self.nodes[id].cols;
        if vals.len() != n {
            return Err(GatError::ShapeMismatch(format!(
                "bind '{name}': {} values for shape {:?}",
                vals.len(),
                self.shape(id)
            )));
        }
        check_finite(name, &vals)?;
        self.values[id] = Some(vals);
        Ok(())
    }

    pub fn leaf_id(&self, name: &str) -> Result<NodeId> {
        self.leaves
            .get(name)
            .copied()
            .ok_or_else(|| GatError::UnknownLeaf(name.to_string()))
    }

    /// Recomputes every non-leaf node in insertion order. Deterministic:
    /// identical bindings produce bit-identical values.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            match &self.nodes[i].op {
                Op::Leaf { name } => {
                    if self.values[i].is_none() {
                        return Err(GatError::UnboundLeaf(name.clone()));
                    }
                }
                Op::Const => {}
                _ => {
                    let out = eval_node(&self.nodes[i], &self.values)?;
                    self.values[i] = Some(out);
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        self.values[id]
            .as_deref()
            .expect("node value not computed; call forward() first")
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "scalar_value on non-scalar node");
        v[0]
    }

    /// Binds the given leaves, runs forward, returns the output values.
    pub fn evaluate_forward(
        &mut self,
        bindings: &[(&str, Vec<f64>)],
        output: NodeId,
    ) -> Result<Vec<f64>> {
        for (name, vals) in bindings {
            self.bind(name, vals.clone())?;
        }
        self.forward()?;
        Ok(self.value(output).to_vec())
    }

    // ── Differentiation ─────────────────────────────────────────────

    /// Builds gradient nodes of a scalar `output` with respect to the given
    /// leaves and returns their node ids (zero constants for untouched
    /// leaves). With `record = true` the gradient subgraph is itself
    /// differentiable; with `record = false` it is detached and a later
    /// backward through it fails with `TapeNotRecording`.
    ///
    /// Values are not computed here; call `forward()` afterwards.
    pub fn backward(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
        record: bool,
    ) -> Result<Vec<NodeId>> {
        if self.shape(output) != (1, 1) {
            return Err(GatError::NonScalarOutput);
        }
        for &w in wrt {
            if w >= self.nodes.len() {
                return Err(GatError::UnknownLeaf(format!("node {w}")));
            }
            if self.ancestry_detached(output, w) {
                return Err(GatError::TapeNotRecording);
            }
        }

        // needs[i]: some wrt leaf is reachable from i through parent edges.
        let mut needs = vec![false; self.nodes.len()];
        for &w in wrt {
            needs[w] = true;
        }
        for i in 0..self.nodes.len() {
            if !needs[i] && !self.nodes[i].detached {
                let reach = self.nodes[i].op.parents().iter().any(|&p| needs[p]);
                if reach {
                    needs[i] = true;
                }
            }
        }

        let start = self.nodes.len();
        let mut adjoint: HashMap<NodeId, NodeId> = HashMap::new();
        let seed = self.constant(1, 1, vec![1.0]);
        adjoint.insert(output, seed);

        for id in (0..=output).rev() {
            let Some(&u) = adjoint.get(&id) else { continue };
            if !needs[id] {
                continue;
            }
            let contributions = self.vjp(id, u)?;
            for (parent, grad) in contributions {
                if !needs[parent] || self.nodes[parent].detached {
                    continue;
                }
                match adjoint.get(&parent) {
                    Some(&existing) => {
                        let summed = self.add(existing, grad)?;
                        adjoint.insert(parent, summed);
                    }
                    None => {
                        adjoint.insert(parent, grad);
                    }
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let id = match adjoint.get(&w) {
                Some(&g) => g,
                None => {
                    let (r, c) = self.shape(w);
                    self.constant(r, c, vec![0.0; r * c])
                }
            };
            out.push(id);
        }
        if !record {
            for i in start..self.nodes.len() {
                self.nodes[i].detached = true;
                self.nodes[i].requires_grad = false;
            }
        }
        Ok(out)
    }

    /// True when every differentiable path from `output` back to `wrt` is
    /// blocked by a detached gradient node, while `output` does depend on
    /// detached nodes that themselves depend on `wrt` (i.e. the first-order
    /// pass was not recorded).
    fn ancestry_detached(&self, output: NodeId, wrt: NodeId) -> bool {
        // Live reachability (through non-detached nodes).
        let mut live = vec![false; self.nodes.len()];
        live[wrt] = true;
        for i in 0..self.nodes.len() {
            if i != wrt && !self.nodes[i].detached {
                live[i] = self.nodes[i].op.parents().iter().any(|&p| live[p]);
            }
        }
        if live[output] {
            return false;
        }
        // Any-path reachability (including detached nodes).
        let mut any = vec![false; self.nodes.len()];
        any[wrt] = true;
        for i in 0..self.nodes.len() {
            if i != wrt {
                any[i] = self.nodes[i].op.parents().iter().any(|&p| any[p]);
            }
        }
        // Blocked only by detachment: reachable in general but not live, and
        // the blockage involves a non-recording gradient node rather than an
        // explicit detach().
        if !any[output] {
            return false;
        }
        let mut q = vec![output];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(i) = q.pop() {
            if seen[i] {
                continue;
            }
            seen[i] = true;
            if self.nodes[i].detached && any[i] && !matches!(self.nodes[i].op, Op::Reshape(..)) {
                return true;
            }
            for p in self.nodes[i].op.parents() {
                q.push(p);
            }
        }
        false
    }

    /// Builds the vjp contributions of node `id` given upstream adjoint `u`.
    fn vjp(&mut self, id: NodeId, u: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[id].op.clone();
        use Op::*;
        Ok(match op {
            Leaf { .. } | Const => vec![],
            Add(a, b) => vec![(a, u), (b, u)],
            Sub(a, b) => {
                let nu = self.neg(u);
                vec![(a, u), (b, nu)]
            }
            Mul(a, b) => {
                let ga = self.mul(u, b)?;
                let gb = self.mul(u, a)?;
                vec![(a, ga), (b, gb)]
            }
            Div(a, b) => {
                let ga = self.div(u, b)?;
                let ua = self.mul(u, a)?;
                let bb = self.mul(b, b)?;
                let frac = self.div(ua, bb)?;
                let gb = self.neg(frac);
                vec![(a, ga), (b, gb)]
            }
            Neg(a) => {
                let g = self.neg(u);
                vec![(a, g)]
            }
            Scale(a, k) => {
                let g = self.scale(u, k);
                vec![(a, g)]
            }
            AddScalar(a, _) => vec![(a, u)],
            MatMul(a, b) => {
                let bt = self.transpose(b);
                let ga = self.matmul(u, bt)?;
                let at = self.transpose(a);
                let gb = self.matmul(at, u)?;
                vec![(a, ga), (b, gb)]
            }
            Transpose(a) => {
                let g = self.transpose(u);
                vec![(a, g)]
            }
            AddRow(a, bias) => {
                let gb = self.sum_rows(u);
                vec![(a, u), (bias, gb)]
            }
            Relu(a) => {
                let gate = self.push(Op::Step(a), self.nodes[a].rows, self.nodes[a].cols);
                let g = self.mul(u, gate)?;
                vec![(a, g)]
            }
            Step(_) => vec![],
            Sigmoid(a) => {
                let s = id;
                let ns = self.neg(s);
                let om = self.add_scalar(ns, 1.0);
                let sp = self.mul(s, om)?;
                let g = self.mul(u, sp)?;
                vec![(a, g)]
            }
            Softplus(a) => {
                let s = self.sigmoid(a);
                let g = self.mul(u, s)?;
                vec![(a, g)]
            }
            Softmax(a) => {
                let s = id;
                let (_, k) = self.shape(a);
                let us = self.mul(u, s)?;
                let row = self.sum_cols(us);
                let rb = self.broadcast_cols(row, k)?;
                let diff = self.sub(u, rb)?;
                let g = self.mul(s, diff)?;
                vec![(a, g)]
            }
            LogSumExp(a) => {
                let (_, k) = self.shape(a);
                let s = self.softmax(a);
                let ub = self.broadcast_cols(u, k)?;
                let g = self.mul(s, ub)?;
                vec![(a, g)]
            }
            Sum(a) => {
                let (r, c) = self.shape(a);
                let col = self.broadcast_rows(u, r)?; // [1,1] -> [r,1]
                let g = self.broadcast_cols(col, c)?;
                vec![(a, g)]
            }
            SumRows(a) => {
                let (r, _) = self.shape(a);
                let g = self.broadcast_rows(u, r)?;
                vec![(a, g)]
            }
            SumCols(a) => {
                let (_, c) = self.shape(a);
                let g = self.broadcast_cols(u, c)?;
                vec![(a, g)]
            }
            BroadcastRows(a, _) => {
                let g = self.sum_rows(u);
                vec![(a, g)]
            }
            BroadcastCols(a, _) => {
                let g = self.sum_cols(u);
                vec![(a, g)]
            }
            Concat(a, b) => {
                let (_, ca) = self.shape(a);
                let (_, cb) = self.shape(b);
                let ga = self.slice_cols(u, 0, ca)?;
                let gb = self.slice_cols(u, ca, ca + cb)?;
                vec![(a, ga), (b, gb)]
            }
            SliceCols(a, lo, _) => {
                let (_, c) = self.shape(a);
                let g = self.pad_cols(u, lo, c)?;
                vec![(a, g)]
            }
            PadCols(a, off, _) => {
                let (_, c) = self.shape(a);
                let g = self.slice_cols(u, off, off + c)?;
                vec![(a, g)]
            }
            Reshape(a, _, _) => {
                let (r, c) = self.shape(a);
                let g = self.reshape(u, r, c)?;
                vec![(a, g)]
            }
        })
    }

    /// Central finite-difference check of `grads[i] = d output / d wrt[i]`.
    /// Components whose perturbation flips a relu gate are excluded from the
    /// maximum and reported back.
    pub fn finite_difference_check(
        &mut self,
        output: NodeId,
        wrt: &[NodeId],
        grads: &[NodeId],
        h: f64,
    ) -> Result<FdReport> {
        if h <= 0.0 {
            return Err(GatError::InvalidArgument("h must be positive".into()));
        }
        if self.shape(output) != (1, 1) {
            return Err(GatError::NonScalarOutput);
        }
        self.forward()?;
        let analytic: Vec<Vec<f64>> = grads.iter().map(|&g| self.value(g).to_vec()).collect();
        let relu_inputs: Vec<NodeId> = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(a),
                _ => None,
            })
            .collect();

        let mut max_rel = 0.0f64;
        let mut excluded = Vec::new();
        for (wi, &w) in wrt.iter().enumerate() {
            let base = self.values[w].clone().expect("wrt leaf unbound");
            for k in 0..base.len() {
                let mut kink = false;
                let mut fd = [0.0f64; 2];
                for (side, delta) in [(0usize, h), (1usize, -h)] {
                    let mut v = base.clone();
                    v[k] += delta;
                    self.values[w] = Some(v);
                    self.forward()?;
                    fd[side] = self.scalar_value(output);
                    for &ri in &relu_inputs {
                        if self.value(ri).iter().any(|&x| x.abs() <= h) {
                            kink = true;
                        }
                    }
                }
                self.values[w] = Some(base.clone());
                if kink {
                    excluded.push((wi, k));
                    continue;
                }
                let numeric = (fd[0] - fd[1]) / (2.0 * h);
                let a = analytic[wi][k];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
                max_rel = max_rel.max(rel);
            }
        }
        self.forward()?;
        Ok(FdReport { max_rel_error: max_rel, excluded })
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(wrt index, component index)` pairs skipped because the perturbation
    /// straddles a relu kink.
    pub excluded: Vec<(usize, usize)>,
}

fn eval_node(node: &Node, values: &[Option<Vec<f64>>]) -> Result<Vec<f64>> {
    let v = |id: NodeId| -> &[f64] { values[id].as_deref().expect("parent value missing") };
    use Op::*;
    let out = match node.op {
        Leaf { .. } | Const => unreachable!(),
        Add(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x + y).collect(),
        Sub(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x - y).collect(),
        Mul(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x * y).collect(),
        Div(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x / y).collect(),
        Neg(a) => v(a).iter().map(|x| -x).collect(),
        Scale(a, k) => v(a).iter().map(|x| x * k).collect(),
        AddScalar(a, k) => v(a).iter().map(|x| x + k).collect(),
        MatMul(a, b) => {
            let (n, m) = (node.rows, node.cols);
            let inner = v(a).len() / n;
            let (av, bv) = (v(a), v(b));
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for k in 0..inner {
                    let aik = av[i * inner + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * m..(k + 1) * m];
                    let orow = &mut out[i * m..(i + 1) * m];
                    for j in 0..m {
                        orow[j] += aik * brow[j];
                    }
                }
            }
            out
        }
        Transpose(a) => {
            let (r, c) = (node.cols, node.rows); // parent shape
            let av = v(a);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = av[i * c + j];
                }
            }
            out
        }
        AddRow(a, bias) => {
            let c = node.cols;
            let bv = v(bias);
            v(a)
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv[i % c])
                .collect()
        }
        Relu(a) => v(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        Step(a) => v(a).iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect(),
        Sigmoid(a) => v(a)
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect(),
        Softplus(a) => v(a)
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect(),
        Softmax(a) => {
            let c = node.cols;
            let av = v(a);
            let mut out = vec![0.0; av.len()];
            for i in 0..node.rows {
                let row = &av[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    out[i * c + j] = e;
                    denom += e;
                }
                for j in 0..c {
                    out[i * c + j] /= denom;
                }
            }
            out
        }
        LogSumExp(a) => {
            let av = v(a);
            let c = av.len() / node.rows;
            (0..node.rows)
                .map(|i| {
                    let row = &av[i * c..(i + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                })
                .collect()
        }
        Sum(a) => vec![v(a).iter().sum()],
        SumRows(a) => {
            let c = node.cols;
            let av = v(a);
            let mut out = vec![0.0; c];
            for (i, x) in av.iter().enumerate() {
                out[i % c] += x;
            }
            out
        }
        SumCols(a) => {
            let av = v(a);
            let c = av.len() / node.rows;
            (0..node.rows)
                .map(|i| av[i * c..(i + 1) * c].iter().sum())
                .collect()
        }
        BroadcastRows(a, n) => {
            let av = v(a);
            let mut out = Vec::with_capacity(av.len() * n);
            for _ in 0..n {
                out.extend_from_slice(av);
            }
            out
        }
        BroadcastCols(a, k) => {
            let av = v(a);
            let mut out = Vec::with_capacity(av.len() * k);
            for &x in av {
                out.extend(std::iter::repeat(x).take(k));
            }
            out
        }
        Concat(a, b) => {
            let (av, bv) = (v(a), v(b));
            let ca = av.len() / node.rows;
            let cb = bv.len() / node.rows;
            let mut out = Vec::with_capacity(av.len() + bv.len());
            for i in 0..node.rows {
                out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
                out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
            }
            out
        }
        SliceCols(a, lo, hi) => {
            let av = v(a);
            let c = av.len() / node.rows;
            let mut out = Vec::with_capacity(node.rows * (hi - lo));
            for i in 0..node.rows {
                out.extend_from_slice(&av[i * c + lo..i * c + hi]);
            }
            out
        }
        PadCols(a, off, total) => {
            let av = v(a);
            let c = av.len() / node.rows;
            let mut out = vec![0.0; node.rows * total];
            for i in 0..node.rows {
                out[i * total + off..i * total + off + c]
                    .copy_from_slice(&av[i * c..(i + 1) * c]);
            }
            out
        }
        Reshape(a, _, _) => v(a).to_vec(),
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ln2() -> f64 {
        std::f64::consts::LN_2
    }

    #[test]
    fn affine_identity_passthrough() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 2, true);
        let w = g.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let b = g.constant(1, 2, vec![0.0, 0.0]);
        let y = g.affine(x, w, b).unwrap();
        let out = g.evaluate_forward(&[("x", vec![1.0, 2.0])], y).unwrap();
        assert_eq!(out, vec![1.0, 2.0]);
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 2, false);
        let y = g.relu(x);
        let out = g.evaluate_forward(&[("x", vec![-1.0, 2.0])], y).unwrap();
        assert_eq!(out, vec![0.0, 2.0]);
    }

    #[test]
    fn softmax_ce_symmetric_logits() {
        let mut g = Graph::new();
        let z = g.leaf("z", 1, 2, false);
        let y = g.constant(1, 2, vec![1.0, 0.0]);
        let loss = g.softmax_cross_entropy(z, y).unwrap();
        let out = g.evaluate_forward(&[("z", vec![0.0, 0.0])], loss).unwrap();
        assert!((out[0] - ln2()).abs() < 1e-12);
    }

    #[test]
    fn forward_is_pure() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 3, false);
        let s = g.softmax(x);
        let a = g.evaluate_forward(&[("x", vec![0.3, -1.2, 2.0])], s).unwrap();
        let b = g.evaluate_forward(&[("x", vec![0.3, -1.2, 2.0])], s).unwrap();
        assert_eq!(a, b, "bit-identical outputs for identical bindings");
    }

    #[test]
    fn unbound_leaf_is_error() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 2, false);
        let _y = g.relu(x);
        assert!(matches!(g.forward(), Err(GatError::UnboundLeaf(_))));
    }

    #[test]
    fn non_finite_binding_rejected() {
        let mut g = Graph::new();
        g.leaf("x", 1, 2, false);
        assert!(matches!(
            g.bind("x", vec![1.0, f64::NAN]),
            Err(GatError::NonFinite(_))
        ));
    }

    #[test]
    fn backward_linear_map() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 2, true);
        let w = g.constant(1, 2, vec![3.0, -4.0]);
        let out = g.dot(w, x).unwrap();
        let grads = g.backward(out, &[x], false).unwrap();
        g.bind("x", vec![0.5, 0.5]).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(grads[0]), &[3.0, -4.0]);
    }

    #[test]
    fn backward_relu_subgradient() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 2, true);
        let r = g.relu(x);
        let out = g.sum(r);
        let grads = g.backward(out, &[x], false).unwrap();
        g.bind("x", vec![-1.0, 2.0]).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(grads[0]), &[0.0, 1.0]);
    }

    #[test]
    fn backward_untouched_leaf_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 2, true);
        let z = g.leaf("z", 1, 2, true);
        let out = g.sum(x);
        let grads = g.backward(out, &[x, z], false).unwrap();
        g.bind("x", vec![1.0, 1.0]).unwrap();
        g.bind("z", vec![5.0, 5.0]).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(grads[1]), &[0.0, 0.0]);
    }

    #[test]
    fn backward_non_scalar_output_rejected() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 2, true);
        let r = g.relu(x);
        assert!(matches!(
            g.backward(r, &[x], false),
            Err(GatError::NonScalarOutput)
        ));
    }

    fn random_mlp_graph(rng: &mut ChaCha8Rng, din: usize, dh: usize) -> (Graph, NodeId, NodeId) {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, din, true);
        let w1 = g.constant(
            din,
            dh,
            (0..din * dh).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let b1 = g.constant(1, dh, (0..dh).map(|_| rng.gen_range(-0.3..0.3)).collect());
        let w2 = g.constant(dh, 1, (0..dh).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b2 = g.constant(1, 1, vec![rng.gen_range(-0.3..0.3)]);
        let h = g.affine(x, w1, b1).unwrap();
        let a = g.relu(h);
        let o = g.affine(a, w2, b2).unwrap();
        let out = g.sum(o);
        (g, x, out)
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (mut g, x, out) = random_mlp_graph(&mut rng, 4, 6);
            let grads = g.backward(out, &[x], false).unwrap();
            g.bind("x", (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let rep = g.finite_difference_check(out, &[x], &grads, 1e-3).unwrap();
            assert!(
                rep.max_rel_error < 1e-4,
                "rel err {}",
                rep.max_rel_error
            );
        }
    }

    #[test]
    fn gradient_linearity_on_random_graphs() {
        // grad(f + g) = grad f + grad g
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 3, true);
        let w1 = g.constant(1, 3, (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let w2 = g.constant(1, 3, (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let f = g.dot(w1, x).unwrap();
        let f2 = g.mul(f, f).unwrap();
        let h = g.dot(w2, x).unwrap();
        let total = g.add(f2, h).unwrap();
        let gf = g.backward(f2, &[x], false).unwrap()[0];
        let gh = g.backward(h, &[x], false).unwrap()[0];
        let gt = g.backward(total, &[x], false).unwrap()[0];
        g.bind("x", vec![0.4, -0.2, 0.9]).unwrap();
        g.forward().unwrap();
        for k in 0..3 {
            assert!((g.value(gt)[k] - (g.value(gf)[k] + g.value(gh)[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn second_order_quadratic_analytic() {
        // L = (w.x)^2, reg = ||dL/dx||^2 = 4 (w.x)^2 ||w||^2.
        // d reg / dw = 8 (w.x) ||w||^2 x + 8 (w.x)^2 w, which at w=(1,0),
        // x=(1,1) is (16, 8). Confirmed below by central differences on reg.
        let reg_of = |w: [f64; 2]| {
            let wx = w[0] + w[1];
            4.0 * wx * wx * (w[0] * w[0] + w[1] * w[1])
        };
        let h = 1e-5;
        let fd = [
            (reg_of([1.0 + h, 0.0]) - reg_of([1.0 - h, 0.0])) / (2.0 * h),
            (reg_of([1.0, h]) - reg_of([1.0, -h])) / (2.0 * h),
        ];

        let mut g = Graph::new();
        let w = g.leaf("w", 1, 2, true);
        let x = g.leaf("x", 1, 2, true);
        let wx = g.dot(w, x).unwrap();
        let loss = g.mul(wx, wx).unwrap();
        let gx = g.backward(loss, &[x], true).unwrap()[0];
        let reg = g.dot(gx, gx).unwrap();
        let gw = g.backward(reg, &[w], false).unwrap()[0];
        g.bind("w", vec![1.0, 0.0]).unwrap();
        g.bind("x", vec![1.0, 1.0]).unwrap();
        g.forward().unwrap();
        let got = g.value(gw);
        assert!((got[0] - 16.0).abs() < 1e-10, "got {:?}", got);
        assert!((got[1] - 8.0).abs() < 1e-10, "got {:?}", got);
        assert!((got[0] - fd[0]).abs() < 1e-4 && (got[1] - fd[1]).abs() < 1e-4);
    }

    #[test]
    fn second_order_detached_reg_is_constant() {
        let mut g = Graph::new();
        let w = g.leaf("w", 1, 2, true);
        let x = g.leaf("x", 1, 2, true);
        let wx = g.dot(w, x).unwrap();
        let loss = g.mul(wx, wx).unwrap();
        let gx = g.backward(loss, &[x], true).unwrap()[0];
        let gxd = g.detach(gx);
        let reg = g.dot(gxd, gxd).unwrap();
        let gw = g.backward(reg, &[w], false).unwrap()[0];
        g.bind("w", vec![1.0, 0.0]).unwrap();
        g.bind("x", vec![1.0, 1.0]).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(gw), &[0.0, 0.0]);
    }

    #[test]
    fn second_order_without_recording_is_error() {
        let mut g = Graph::new();
        let w = g.leaf("w", 1, 2, true);
        let x = g.leaf("x", 1, 2, true);
        let wx = g.dot(w, x).unwrap();
        let loss = g.mul(wx, wx).unwrap();
        let gx = g.backward(loss, &[x], false).unwrap()[0];
        let reg = g.dot(gx, gx).unwrap();
        assert!(matches!(
            g.backward(reg, &[w], false),
            Err(GatError::TapeNotRecording)
        ));
    }

    #[test]
    fn second_order_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let din = 3;
            let dh = 4;
            let mut g = Graph::new();
            let x = g.leaf("x", 1, din, true);
            let w1 = g.leaf("w1", din, dh, true);
            let b1 = g.leaf("b1", 1, dh, true);
            let w2 = g.leaf("w2", dh, 1, true);
            let h = g.affine(x, w1, b1).unwrap();
            let a = g.relu(h);
            let o = g.matmul(a, w2).unwrap();
            let loss = g.sum(o);
            let gx = g.backward(loss, &[x], true).unwrap()[0];
            let reg = g.dot(gx, gx).unwrap();
            let params = [w1, b1, w2];
            let greg = g.backward(reg, &params, false).unwrap();
            g.bind("x", (0..din).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            g.bind(
                "w1",
                (0..din * dh).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            g.bind("b1", (0..dh).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .unwrap();
            g.bind("w2", (0..dh).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let rep = g
                .finite_difference_check(reg, &params, &greg, 1e-4)
                .unwrap();
            assert!(rep.max_rel_error < 1e-3, "rel err {}", rep.max_rel_error);
        }
    }

    #[test]
    fn fd_check_linear_is_exact() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 3, true);
        let w = g.constant(1, 3, vec![2.0, -1.0, 0.5]);
        let out = g.dot(w, x).unwrap();
        let grads = g.backward(out, &[x], false).unwrap();
        g.bind("x", vec![0.1, 0.2, 0.3]).unwrap();
        let rep = g.finite_difference_check(out, &[x], &grads, 1e-3).unwrap();
        assert!(rep.max_rel_error < 1e-10);
    }

    #[test]
    fn fd_check_quadratic() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 2, true);
        let w = g.constant(1, 2, vec![1.5, -0.7]);
        let wx = g.dot(w, x).unwrap();
        let out = g.mul(wx, wx).unwrap();
        let grads = g.backward(out, &[x], false).unwrap();
        g.bind("x", vec![0.3, 0.8]).unwrap();
        let rep = g.finite_difference_check(out, &[x], &grads, 1e-3).unwrap();
        assert!(rep.max_rel_error < 1e-6);
    }

    #[test]
    fn fd_check_flags_relu_kink() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 1, true);
        let r = g.relu(x);
        let out = g.sum(r);
        let grads = g.backward(out, &[x], false).unwrap();
        g.bind("x", vec![0.0]).unwrap();
        let rep = g.finite_difference_check(out, &[x], &grads, 1e-3).unwrap();
        assert_eq!(rep.excluded, vec![(0, 0)]);
    }

    #[test]
    fn fd_check_rejects_nonpositive_h() {
        let mut g = Graph::new();
        let x = g.leaf("x", 1, 1, true);
        let out = g.sum(x);
        let grads = g.backward(out, &[x], false).unwrap();
        g.bind("x", vec![0.5]).unwrap();
        assert!(g.finite_difference_check(out, &[x], &grads, 0.0).is_err());
    }

    #[test]
    fn concat_and_slice_roundtrip_gradient() {
        let mut g = Graph::new();
        let a = g.leaf("a", 2, 2, true);
        let b = g.leaf("b", 2, 1, true);
        let c = g.concat(a, b).unwrap();
        let out = g.sum(c);
        let grads = g.backward(out, &[a, b], false).unwrap();
        g.bind("a", vec![1.0; 4]).unwrap();
        g.bind("b", vec![2.0; 2]).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(grads[0]), &[1.0; 4]);
        assert_eq!(g.value(grads[1]), &[1.0; 2]);
    }

    #[test]
    fn bce_matches_hand_value() {
        // z = 0 -> s = 0.5, loss = ln 2 for either label
        let mut g = Graph::new();
        let z = g.leaf("z", 1, 1, false);
        let y = g.constant(1, 1, vec![1.0]);
        let l = g.sigmoid_binary_cross_entropy(z, y).unwrap();
        let out = g.evaluate_forward(&[("z", vec![0.0])], l).unwrap();
        assert!((out[0] - ln2()).abs() < 1e-12);
    }

    #[test]
    fn mse_perfect_prediction_is_zero() {
        let mut g = Graph::new();
        let p = g.leaf("p", 2, 1, false);
        let t = g.constant(2, 1, vec![0.3, -1.0]);
        let se = g.squared_error(p, t).unwrap();
        let m = g.mean(se);
        let out = g.evaluate_forward(&[("p", vec![0.3, -1.0])], m).unwrap();
        assert_eq!(out[0], 0.0);
    }
}
