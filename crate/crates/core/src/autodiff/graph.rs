//! Reverse-mode computation graph over dense tensors.
//!
//! Graphs are built define-by-run: every op method evaluates its forward
//! value eagerly and records the node, so construction order is already a
//! topological order. `backward` walks the node list once in reverse.
//! Leaves are constants, named inputs, or named parameters; only parameters
//! (and nodes depending on them) receive gradients.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a node inside a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LeafKind {
    Constant,
    Input,
    Parameter,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKind),
    Neg(Value),
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    Div(Value, Value),
    /// `[S,N] + [N]`, the bias broadcast over rows.
    AddBias(Value, Value),
    /// `[S,N] + [S]`, the addend broadcast over columns.
    AddCol(Value, Value),
    Scale(Value, f64),
    AddScalar(Value, f64),
    /// Tensor times a scalar-valued node.
    MulScalar(Value, Value),
    MatMul(Value, Value),
    /// `a · bᵀ` without materializing the transpose.
    MatMulTb(Value, Value),
    Transpose(Value),
    Exp(Value),
    Log(Value),
    Tanh(Value),
    Softmax(Value, usize),
    LogSoftmax(Value, usize),
    LayerNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        eps: f64,
    },
    L2NormalizeRows(Value),
    Norm(Value),
    Sum(Value),
    Mean(Value),
    SumAxis(Value, usize),
    MeanAxis(Value, usize),
    Concat(Vec<Value>, usize),
    SliceRows(Value, usize, usize),
    SliceCols(Value, usize, usize),
    GatherRows(Value, Vec<usize>),
    /// Pick element `(i, idx[i])` from each row, yielding `[N, 1]`.
    TakePerRow(Value, Vec<usize>),
    Reshape(Value),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Gradients of the loss with respect to every reachable node.
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for an arbitrary node, if one was produced.
    pub fn wrt(&self, v: Value) -> Option<&[f64]> {
        self.node_grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Report produced by [`grad_check`]: per-parameter maximum relative error
/// between analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.values().cloned().fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<(&str, f64)> {
        self.per_param
            .iter()
            .filter(|(_, &e)| e > self.tolerance)
            .map(|(n, &e)| (n.as_str(), e))
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Value>,
    inputs: BTreeMap<String, Value>,
    outputs: BTreeMap<String, Value>,
    loss: Option<Value>,
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

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, t: Tensor) -> Value {
        self.push_leaf(t, LeafKind::Constant, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Value {
        self.constant(Tensor::scalar(x))
    }

    /// Named re-bindable input leaf. Inputs never receive gradients.
    pub fn input(&mut self, name: &str, t: Tensor) -> Result<Value> {
        if self.inputs.contains_key(name) || self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate leaf name '{name}'")));
        }
        let v = self.push_leaf(t, LeafKind::Input, false);
        self.inputs.insert(name.to_string(), v);
        Ok(v)
    }

    /// Named trainable leaf; gradients are collected per parameter name.
    pub fn parameter(&mut self, name: &str, t: Tensor) -> Result<Value> {
        if self.inputs.contains_key(name) || self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate leaf name '{name}'")));
        }
        let v = self.push_leaf(t, LeafKind::Parameter, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn push_leaf(&mut self, t: Tensor, kind: LeafKind, needs_grad: bool) -> Value {
        let (shape, data) = (t.shape().to_vec(), t.data().to_vec());
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            shape,
            data,
            needs_grad,
        });
        Value(self.nodes.len() - 1)
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn param_value(&self, name: &str) -> Option<Value> {
        self.params.get(name).copied()
    }

    // ── bookkeeping ─────────────────────────────────────────────────────

    pub fn mark_output(&mut self, name: &str, v: Value) -> Result<()> {
        self.check(v)?;
        self.outputs.insert(name.to_string(), v);
        Ok(())
    }

    /// Designates the scalar loss for `backward` and `grad_check`.
    pub fn set_loss(&mut self, v: Value) -> Result<()> {
        self.check(v)?;
        if self.nodes[v.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[v.0].shape
            )));
        }
        self.loss = Some(v);
        Ok(())
    }

    pub fn loss_value(&self) -> Result<f64> {
        let v = self
            .loss
            .ok_or_else(|| Error::Contract("no loss designated on graph".into()))?;
        Ok(self.nodes[v.0].data[0])
    }

    /// Current forward value of a node.
    pub fn value(&self, v: Value) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.data.clone(), &n.shape).expect("node invariant")
    }

    pub fn shape_of(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn check(&self, v: Value) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Contract(
                "value handle does not belong to this graph".into(),
            ));
        }
        Ok(())
    }

    /// Rebind a named input or parameter leaf to new data of the same shape.
    pub fn rebind(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let v = self
            .inputs
            .get(name)
            .or_else(|| self.params.get(name))
            .copied()
            .ok_or_else(|| Error::Contract(format!("no leaf named '{name}'")))?;
        if self.nodes[v.0].shape != t.shape() {
            return Err(Error::Shape(format!(
                "rebind '{name}': expected shape {:?}, got {:?}",
                self.nodes[v.0].shape,
                t.shape()
            )));
        }
        self.nodes[v.0].data.copy_from_slice(t.data());
        Ok(())
    }

    fn set_leaf_element(&mut self, v: Value, idx: usize, x: f64) {
        self.nodes[v.0].data[idx] = x;
    }

    fn leaf_element(&self, v: Value, idx: usize) -> f64 {
        self.nodes[v.0].data[idx]
    }

    // ── op constructors ─────────────────────────────────────────────────

    fn push_op(&mut self, op: Op) -> Result<Value> {
        let (shape, data) = eval_op(&self.nodes, &op)?;
        let needs_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
        });
        Ok(Value(self.nodes.len() - 1))
    }

    pub fn neg(&mut self, a: Value) -> Result<Value> {
        self.push_op(Op::Neg(a))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.push_op(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.push_op(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.push_op(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.push_op(Op::Div(a, b))
    }

    pub fn add_bias(&mut self, a: Value, bias: Value) -> Result<Value> {
        self.push_op(Op::AddBias(a, bias))
    }

    pub fn add_col(&mut self, a: Value, col: Value) -> Result<Value> {
        self.push_op(Op::AddCol(a, col))
    }

    pub fn scale(&mut self, a: Value, c: f64) -> Result<Value> {
        self.push_op(Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Value, c: f64) -> Result<Value> {
        self.push_op(Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Value, s: Value) -> Result<Value> {
        self.push_op(Op::MulScalar(a, s))
    }

    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.push_op(Op::MatMul(a, b))
    }

    /// `a · bᵀ`; the workhorse for similarity and attention-score matrices.
    pub fn matmul_tb(&mut self, a: Value, b: Value) -> Result<Value> {
        self.push_op(Op::MatMulTb(a, b))
    }

    pub fn transpose(&mut self, a: Value) -> Result<Value> {
        self.push_op(Op::Transpose(a))
    }

    pub fn exp(&mut self, a: Value) -> Result<Value> {
        self.push_op(Op::Exp(a))
    }

    pub fn log(&mut self, a: Value) -> Result<Value> {
        self.push_op(Op::Log(a))
    }

    pub fn tanh(&mut self, a: Value) -> Result<Value> {
        self.push_op(Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Value, axis: usize) -> Result<Value> {
        self.push_op(Op::Softmax(a, axis))
    }

    pub fn log_softmax(&mut self, a: Value, axis: usize) -> Result<Value> {
        self.push_op(Op::LogSoftmax(a, axis))
    }

    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: f64) -> Result<Value> {
        self.push_op(Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Row-wise L2 normalization; rejects zero-norm rows.
    pub fn l2_normalize_rows(&mut self, a: Value) -> Result<Value> {
        self.push_op(Op::L2NormalizeRows(a))
    }

    /// Euclidean norm of all elements, as a scalar node.
    pub fn norm(&mut self, a: Value) -> Result<Value> {
        self.push_op(Op::Norm(a))
    }

    pub fn sum(&mut self, a: Value) -> Result<Value> {
        self.push_op(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Value) -> Result<Value> {
        self.push_op(Op::Mean(a))
    }

    pub fn sum_axis(&mut self, a: Value, axis: usize) -> Result<Value> {
        self.push_op(Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: Value, axis: usize) -> Result<Value> {
        self.push_op(Op::MeanAxis(a, axis))
    }

    pub fn concat(&mut self, parts: &[Value], axis: usize) -> Result<Value> {
        self.push_op(Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice_rows(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        self.push_op(Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: Value, start: usize, end: usize) -> Result<Value> {
        self.push_op(Op::SliceCols(a, start, end))
    }

    pub fn row(&mut self, a: Value, i: usize) -> Result<Value> {
        self.slice_rows(a, i, i + 1)
    }

    pub fn gather_rows(&mut self, table: Value, indices: &[usize]) -> Result<Value> {
        self.push_op(Op::GatherRows(table, indices.to_vec()))
    }

    pub fn take_per_row(&mut self, a: Value, indices: &[usize]) -> Result<Value> {
        self.push_op(Op::TakePerRow(a, indices.to_vec()))
    }

    pub fn reshape(&mut self, a: Value, new_shape: &[usize]) -> Result<Value> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::Shape(format!(
                "reshape to {:?} changes element count of {:?}",
                new_shape, self.nodes[a.0].shape
            )));
        }
        let v = self.push_op(Op::Reshape(a))?;
        self.nodes[v.0].shape = new_shape.to_vec();
        Ok(v)
    }

    // ── execution ───────────────────────────────────────────────────────

    /// Recomputes every non-leaf node in topological order from the current
    /// leaf bindings.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf(_)) {
                continue;
            }
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            let (_shape, data) = eval_op(head, &node.op)?;
            // Reshape nodes keep their overridden shape; element count is the
            // invariant that must hold on every path.
            debug_assert_eq!(data.len(), node.data.len(), "replay changed a node size");
            node.data = data;
        }
        Ok(())
    }

    fn check_finite_forward(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.data.iter().all(|x| x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite forward value at node {i} ({:?})",
                    op_name(&n.op)
                )));
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from the designated loss. Each node is visited
    /// exactly once; gradients only propagate into subgraphs that reach a
    /// parameter.
    pub fn backward(&self) -> Result<Gradients> {
        let loss = self
            .loss
            .ok_or_else(|| Error::Contract("no loss designated on graph".into()))?;
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract("loss must be scalar".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        // Consumers always sit at higher indices than their inputs, so one
        // reverse sweep sees every node's accumulated gradient exactly once.
        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { node_grads: grads })
    }

    /// Named parameter gradients from a completed backward sweep. Parameters
    /// the loss does not reach get zero gradients.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.params {
            let node = &self.nodes[v.0];
            let buf = grads
                .wrt(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; node.data.len()]);
            let t = Tensor::new(buf, &node.shape).expect("grad shape invariant");
            out.insert(name.clone(), t);
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut sink = |v: Value, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].data.len()]);
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        };
        let val = |v: Value| -> &[f64] { &self.nodes[v.0].data };
        let dims = |v: Value| -> (usize, usize) { matrix_dims(&self.nodes[v.0].shape) };

        match &node.op {
            Op::Leaf(_) => {}
            Op::Neg(a) => sink(*a, g.iter().map(|x| -x).collect()),
            Op::Add(a, b) => {
                sink(*a, g.to_vec());
                sink(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                sink(*a, g.to_vec());
                sink(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                sink(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                sink(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                sink(*a, g.iter().zip(bv).map(|(x, y)| x / y).collect());
                sink(
                    *b,
                    g.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(x, (n, d))| -x * n / (d * d))
                        .collect(),
                );
            }
            Op::AddBias(a, bias) => {
                sink(*a, g.to_vec());
                let (rows, cols) = dims(*a);
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += g[r * cols + c];
                    }
                }
                sink(*bias, db);
            }
            Op::AddCol(a, col) => {
                sink(*a, g.to_vec());
                let (rows, cols) = dims(*a);
                let mut dc = vec![0.0; rows];
                for r in 0..rows {
                    for c in 0..cols {
                        dc[r] += g[r * cols + c];
                    }
                }
                sink(*col, dc);
            }
            Op::Scale(a, c) => sink(*a, g.iter().map(|x| x * c).collect()),
            Op::AddScalar(a, _) => sink(*a, g.to_vec()),
            Op::MulScalar(a, s) => {
                let sv = val(*s)[0];
                sink(*a, g.iter().map(|x| x * sv).collect());
                let ds: f64 = g.iter().zip(val(*a)).map(|(x, y)| x * y).sum();
                sink(*s, vec![ds]);
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let (_, n) = dims(*b);
                // dA = g · Bᵀ, with B as the [k,n] "transposed" operand.
                let mut da = vec![0.0; m * k];
                matmul_tb_into(g, val(*b), m, k, n, &mut da);
                sink(*a, da);
                // dB = Aᵀ · g
                let mut db = vec![0.0; k * n];
                matmul_ta_into(val(*a), g, m, k, n, &mut db);
                sink(*b, db);
            }
            Op::MatMulTb(a, b) => {
                let (m, k) = dims(*a);
                let (n, _) = dims(*b);
                // C = A·Bᵀ, so dA = g · B and dB = gᵀ · A.
                let mut da = vec![0.0; m * k];
                matmul_into(g, val(*b), m, n, k, &mut da);
                sink(*a, da);
                let mut db = vec![0.0; n * k];
                matmul_ta_into(g, val(*a), m, n, k, &mut db);
                sink(*b, db);
            }
            Op::Transpose(a) => {
                let (rows, cols) = dims(*a);
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] = g[c * rows + r];
                    }
                }
                sink(*a, da);
            }
            Op::Exp(a) => sink(*a, g.iter().zip(&node.data).map(|(x, y)| x * y).collect()),
            Op::Log(a) => sink(*a, g.iter().zip(val(*a)).map(|(x, y)| x / y).collect()),
            Op::Tanh(a) => sink(
                *a,
                g.iter()
                    .zip(&node.data)
                    .map(|(x, y)| x * (1.0 - y * y))
                    .collect(),
            ),
            Op::Softmax(a, axis) => {
                let (rows, cols) = dims(*a);
                let axis = if self.nodes[a.0].shape.len() < 2 { 1 } else { *axis };
                let mut da = vec![0.0; rows * cols];
                for_each_lane(rows, cols, axis, |lane| {
                    let dot: f64 = lane.iter().map(|&i| g[i] * node.data[i]).sum();
                    for &i in lane {
                        da[i] = node.data[i] * (g[i] - dot);
                    }
                });
                sink(*a, da);
            }
            Op::LogSoftmax(a, axis) => {
                let (rows, cols) = dims(*a);
                let axis = if self.nodes[a.0].shape.len() < 2 { 1 } else { *axis };
                let mut da = vec![0.0; rows * cols];
                for_each_lane(rows, cols, axis, |lane| {
                    let gsum: f64 = lane.iter().map(|&i| g[i]).sum();
                    for &i in lane {
                        da[i] = g[i] - node.data[i].exp() * gsum;
                    }
                });
                sink(*a, da);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (rows, cols) = dims(*x);
                let (xv, gv) = (val(*x), val(*gamma));
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let grow = &g[r * cols..(r + 1) * cols];
                    let mut ghat_mean = 0.0;
                    let mut ghat_xhat_mean = 0.0;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv_std;
                        let ghat = grow[c] * gv[c];
                        ghat_mean += ghat;
                        ghat_xhat_mean += ghat * xhat;
                        dgamma[c] += grow[c] * xhat;
                        dbeta[c] += grow[c];
                    }
                    ghat_mean /= cols as f64;
                    ghat_xhat_mean /= cols as f64;
                    for c in 0..cols {
                        let xhat = (row[c] - mean) * inv_std;
                        let ghat = grow[c] * gv[c];
                        dx[r * cols + c] = inv_std * (ghat - ghat_mean - xhat * ghat_xhat_mean);
                    }
                }
                sink(*x, dx);
                sink(*gamma, dgamma);
                sink(*beta, dbeta);
            }
            Op::L2NormalizeRows(a) => {
                let (rows, cols) = dims(*a);
                let av = val(*a);
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    let row = &av[r * cols..(r + 1) * cols];
                    let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yrow = &node.data[r * cols..(r + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for c in 0..cols {
                        da[r * cols + c] = (grow[c] - yrow[c] * dot) / nrm;
                    }
                }
                sink(*a, da);
            }
            Op::Norm(a) => {
                let av = val(*a);
                let n = node.data[0];
                sink(*a, av.iter().map(|x| g[0] * x / n).collect());
            }
            Op::Sum(a) => sink(*a, vec![g[0]; self.nodes[a.0].data.len()]),
            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len() as f64;
                sink(*a, vec![g[0] / n; self.nodes[a.0].data.len()]);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (rows, cols) = dims(*a);
                let scale = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / (if *axis == 0 { rows } else { cols }) as f64
                } else {
                    1.0
                };
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let gi = if *axis == 0 { c } else { r };
                        da[r * cols + c] = g[gi] * scale;
                    }
                }
                sink(*a, da);
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].data.len();
                        sink(*p, g[off..off + len].to_vec());
                        off += len;
                    }
                } else {
                    let (rows, total_cols) = matrix_dims(&node.shape);
                    let mut col_off = 0;
                    for p in parts {
                        let (_, pc) = dims(*p);
                        let mut dp = vec![0.0; rows * pc];
                        for r in 0..rows {
                            for c in 0..pc {
                                dp[r * pc + c] = g[r * total_cols + col_off + c];
                            }
                        }
                        sink(*p, dp);
                        col_off += pc;
                    }
                }
            }
            Op::SliceRows(a, start, _end) => {
                let (rows, cols) = dims(*a);
                let mut da = vec![0.0; rows * cols];
                da[start * cols..start * cols + g.len()].copy_from_slice(g);
                sink(*a, da);
            }
            Op::SliceCols(a, start, end) => {
                let (rows, cols) = dims(*a);
                let w = end - start;
                let mut da = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..w {
                        da[r * cols + start + c] = g[r * w + c];
                    }
                }
                sink(*a, da);
            }
            Op::GatherRows(table, indices) => {
                let (rows, cols) = dims(*table);
                let mut dt = vec![0.0; rows * cols];
                for (out_r, &src_r) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dt[src_r * cols + c] += g[out_r * cols + c];
                    }
                }
                sink(*table, dt);
            }
            Op::TakePerRow(a, indices) => {
                let (rows, cols) = dims(*a);
                let mut da = vec![0.0; rows * cols];
                for (r, &c) in indices.iter().enumerate() {
                    da[r * cols + c] += g[r];
                }
                sink(*a, da);
            }
            Op::Reshape(a) => sink(*a, g.to_vec()),
        }
    }
}

/// Forward evaluation plus gradient collection against rebound inputs.
///
/// Rebinds every entry of `inputs` (all declared graph inputs must be
/// covered), replays the graph, verifies the forward pass is finite and the
/// loss scalar, then runs the backward sweep. Returns the marked outputs and
/// one gradient per parameter.
pub fn evaluate_with_gradients(
    graph: &mut Graph,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> {
    for name in inputs.keys() {
        if !graph.inputs.contains_key(name) {
            return Err(Error::Contract(format!("unknown input '{name}'")));
        }
    }
    for name in graph.inputs.keys() {
        if !inputs.contains_key(name) {
            return Err(Error::Contract(format!("input '{name}' not bound")));
        }
    }
    for (name, t) in inputs {
        graph.rebind(name, t)?;
    }
    graph.replay()?;
    graph.check_finite_forward()?;
    graph.loss_value()?; // enforces that a scalar loss is designated
    let grads = graph.backward()?;
    let param_grads = graph.param_grads(&grads);
    let outputs = graph
        .outputs
        .iter()
        .map(|(k, &v)| (k.clone(), graph.value(v)))
        .collect();
    Ok((outputs, param_grads))
}

/// Central-difference verification of every parameter gradient.
///
/// Relative error uses `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn grad_check(graph: &mut Graph, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    if step <= 0.0 || tolerance <= 0.0 {
        return Err(Error::Contract("step and tolerance must be positive".into()));
    }
    graph.replay()?;
    graph.check_finite_forward()?;
    let analytic = {
        let grads = graph.backward()?;
        graph.param_grads(&grads)
    };

    let names: Vec<String> = graph.params.keys().cloned().collect();
    let mut per_param = BTreeMap::new();
    for name in names {
        let v = graph.params[&name];
        let n = graph.nodes[v.0].data.len();
        let a = &analytic[&name];
        let mut max_err = 0.0f64;
        for idx in 0..n {
            let orig = graph.leaf_element(v, idx);
            graph.set_leaf_element(v, idx, orig + step);
            graph.replay()?;
            graph.check_finite_forward()?;
            let plus = graph.loss_value()?;
            graph.set_leaf_element(v, idx, orig - step);
            graph.replay()?;
            graph.check_finite_forward()?;
            let minus = graph.loss_value()?;
            graph.set_leaf_element(v, idx, orig);
            let fd = (plus - minus) / (2.0 * step);
            let an = a.data()[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            max_err = max_err.max(rel);
        }
        per_param.insert(name, max_err);
    }
    // Restore original forward values.
    graph.replay()?;
    Ok(GradCheckReport {
        per_param,
        tolerance,
    })
}

// ── forward kernels ─────────────────────────────────────────────────────

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1]),
        1 => (1, shape[0]),
        _ => (1, 1),
    }
}

/// Applies `f` to the flat indices of each lane along `axis` of a matrix.
fn for_each_lane(rows: usize, cols: usize, axis: usize, mut f: impl FnMut(&[usize])) {
    let mut lane = Vec::new();
    if axis == 1 {
        for r in 0..rows {
            lane.clear();
            lane.extend((0..cols).map(|c| r * cols + c));
            f(&lane);
        }
    } else {
        for c in 0..cols {
            lane.clear();
            lane.extend((0..rows).map(|r| r * cols + c));
            f(&lane);
        }
    }
}

/// c += a[m,k] · b[k,n]
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c += a[m,k] · b[n,k]ᵀ
fn matmul_tb_into(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] += s;
        }
    }
}

/// c += a[m,k]ᵀ · b[m,n]
fn matmul_ta_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf(LeafKind::Constant) => "constant",
        Op::Leaf(LeafKind::Input) => "input",
        Op::Leaf(LeafKind::Parameter) => "parameter",
        Op::Neg(_) => "neg",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddBias(..) => "add_bias",
        Op::AddCol(..) => "add_col",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::MatMul(..) => "matmul",
        Op::MatMulTb(..) => "matmul_tb",
        Op::Transpose(_) => "transpose",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::Tanh(_) => "tanh",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::L2NormalizeRows(_) => "l2_normalize_rows",
        Op::Norm(_) => "norm",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumAxis(..) => "sum_axis",
        Op::MeanAxis(..) => "mean_axis",
        Op::Concat(..) => "concat",
        Op::SliceRows(..) => "slice_rows",
        Op::SliceCols(..) => "slice_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::TakePerRow(..) => "take_per_row",
        Op::Reshape(_) => "reshape",
    }
}

fn op_inputs(op: &Op) -> Vec<Value> {
    match op {
        Op::Leaf(_) => vec![],
        Op::Neg(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Transpose(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Tanh(a)
        | Op::Softmax(a, _)
        | Op::LogSoftmax(a, _)
        | Op::L2NormalizeRows(a)
        | Op::Norm(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumAxis(a, _)
        | Op::MeanAxis(a, _)
        | Op::SliceRows(a, _, _)
        | Op::SliceCols(a, _, _)
        | Op::GatherRows(a, _)
        | Op::TakePerRow(a, _)
        | Op::Reshape(a) => vec![*a],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddBias(a, b)
        | Op::AddCol(a, b)
        | Op::MulScalar(a, b)
        | Op::MatMul(a, b)
        | Op::MatMulTb(a, b) => vec![*a, *b],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Concat(parts, _) => parts.clone(),
    }
}

fn eval_op(nodes: &[Node], op: &Op) -> Result<(Vec<usize>, Vec<f64>)> {
    let get = |v: &Value| -> Result<&Node> {
        nodes.get(v.0).ok_or_else(|| {
            Error::Contract("value handle does not belong to this graph".into())
        })
    };
    let same_shape = |a: &Node, b: &Node, what: &str| -> Result<()> {
        if a.shape != b.shape {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                a.shape, b.shape
            )));
        }
        Ok(())
    };

    match op {
        Op::Leaf(_) => unreachable!("leaves are never re-evaluated"),
        Op::Neg(a) => {
            let a = get(a)?;
            Ok((a.shape.clone(), a.data.iter().map(|x| -x).collect()))
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
            let (an, bn) = (get(a)?, get(b)?);
            same_shape(an, bn, op_name(op))?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                Op::Mul(..) => |x, y| x * y,
                _ => |x, y| x / y,
            };
            let data = an
                .data
                .iter()
                .zip(&bn.data)
                .map(|(&x, &y)| f(x, y))
                .collect();
            Ok((an.shape.clone(), data))
        }
        Op::AddBias(a, bias) => {
            let (an, bn) = (get(a)?, get(bias)?);
            let (rows, cols) = matrix_dims(&an.shape);
            if bn.data.len() != cols {
                return Err(Error::Shape(format!(
                    "add_bias: bias of {} elements against {cols} columns",
                    bn.data.len()
                )));
            }
            let mut data = an.data.clone();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += bn.data[c];
                }
            }
            Ok((an.shape.clone(), data))
        }
        Op::AddCol(a, col) => {
            let (an, cn) = (get(a)?, get(col)?);
            let (rows, cols) = matrix_dims(&an.shape);
            if cn.data.len() != rows {
                return Err(Error::Shape(format!(
                    "add_col: addend of {} elements against {rows} rows",
                    cn.data.len()
                )));
            }
            let mut data = an.data.clone();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += cn.data[r];
                }
            }
            Ok((an.shape.clone(), data))
        }
        Op::Scale(a, c) => {
            let a = get(a)?;
            Ok((a.shape.clone(), a.data.iter().map(|x| x * c).collect()))
        }
        Op::AddScalar(a, c) => {
            let a = get(a)?;
            Ok((a.shape.clone(), a.data.iter().map(|x| x + c).collect()))
        }
        Op::MulScalar(a, s) => {
            let (an, sn) = (get(a)?, get(s)?);
            if sn.data.len() != 1 {
                return Err(Error::Shape(format!(
                    "mul_scalar: scalar operand has shape {:?}",
                    sn.shape
                )));
            }
            let sv = sn.data[0];
            Ok((an.shape.clone(), an.data.iter().map(|x| x * sv).collect()))
        }
        Op::MatMul(a, b) => {
            let (an, bn) = (get(a)?, get(b)?);
            if an.shape.len() != 2 || bn.shape.len() != 2 {
                return Err(Error::Shape("matmul requires rank-2 operands".into()));
            }
            let (m, k) = (an.shape[0], an.shape[1]);
            let (k2, n) = (bn.shape[0], bn.shape[1]);
            if k != k2 {
                return Err(Error::Shape(format!(
                    "matmul: inner dimensions {k} and {k2} differ"
                )));
            }
            let mut data = vec![0.0; m * n];
            matmul_into(&an.data, &bn.data, m, k, n, &mut data);
            Ok((vec![m, n], data))
        }
        Op::MatMulTb(a, b) => {
            let (an, bn) = (get(a)?, get(b)?);
            if an.shape.len() != 2 || bn.shape.len() != 2 {
                return Err(Error::Shape("matmul_tb requires rank-2 operands".into()));
            }
            let (m, k) = (an.shape[0], an.shape[1]);
            let (n, k2) = (bn.shape[0], bn.shape[1]);
            if k != k2 {
                return Err(Error::Shape(format!(
                    "matmul_tb: inner dimensions {k} and {k2} differ"
                )));
            }
            let mut data = vec![0.0; m * n];
            matmul_tb_into(&an.data, &bn.data, m, n, k, &mut data);
            Ok((vec![m, n], data))
        }
        Op::Transpose(a) => {
            let an = get(a)?;
            let (rows, cols) = matrix_dims(&an.shape);
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                for c in 0..cols {
                    data[c * rows + r] = an.data[r * cols + c];
                }
            }
            Ok((vec![cols, rows], data))
        }
        Op::Exp(a) => {
            let a = get(a)?;
            Ok((a.shape.clone(), a.data.iter().map(|x| x.exp()).collect()))
        }
        Op::Log(a) => {
            let a = get(a)?;
            Ok((a.shape.clone(), a.data.iter().map(|x| x.ln()).collect()))
        }
        Op::Tanh(a) => {
            let a = get(a)?;
            Ok((a.shape.clone(), a.data.iter().map(|x| x.tanh()).collect()))
        }
        Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
            let an = get(a)?;
            if *axis >= 2 || (an.shape.len() < 2 && *axis != 0) {
                return Err(Error::Shape(format!("softmax axis {axis} out of range")));
            }
            let (rows, cols) = matrix_dims(&an.shape);
            // Rank-1 input softmaxes over its only axis.
            let axis = if an.shape.len() < 2 { 1 } else { *axis };
            let mut data = vec![0.0; rows * cols];
            let log_form = matches!(op, Op::LogSoftmax(..));
            for_each_lane(rows, cols, axis, |lane| {
                let max = lane
                    .iter()
                    .map(|&i| an.data[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for &i in lane {
                    denom += (an.data[i] - max).exp();
                }
                if log_form {
                    let lse = denom.ln() + max;
                    for &i in lane {
                        data[i] = an.data[i] - lse;
                    }
                } else {
                    for &i in lane {
                        data[i] = (an.data[i] - max).exp() / denom;
                    }
                }
            });
            Ok((an.shape.clone(), data))
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (xn, gn, bn) = (get(x)?, get(gamma)?, get(beta)?);
            let (rows, cols) = matrix_dims(&xn.shape);
            if gn.data.len() != cols || bn.data.len() != cols {
                return Err(Error::Shape(format!(
                    "layer_norm: gamma/beta of {}/{} elements against {cols} columns",
                    gn.data.len(),
                    bn.data.len()
                )));
            }
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &xn.data[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for c in 0..cols {
                    data[r * cols + c] = (row[c] - mean) * inv_std * gn.data[c] + bn.data[c];
                }
            }
            Ok((xn.shape.clone(), data))
        }
        Op::L2NormalizeRows(a) => {
            let an = get(a)?;
            let (rows, cols) = matrix_dims(&an.shape);
            let mut data = vec![0.0; rows * cols];
            for r in 0..rows {
                let row = &an.data[r * cols..(r + 1) * cols];
                let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm == 0.0 {
                    return Err(Error::Contract(format!(
                        "l2_normalize: zero-norm row {r}"
                    )));
                }
                for c in 0..cols {
                    data[r * cols + c] = row[c] / nrm;
                }
            }
            Ok((an.shape.clone(), data))
        }
        Op::Norm(a) => {
            let an = get(a)?;
            let n = an.data.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok((vec![], vec![n]))
        }
        Op::Sum(a) => {
            let an = get(a)?;
            Ok((vec![], vec![an.data.iter().sum()]))
        }
        Op::Mean(a) => {
            let an = get(a)?;
            let n = an.data.len() as f64;
            Ok((vec![], vec![an.data.iter().sum::<f64>() / n]))
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let an = get(a)?;
            if an.shape.len() != 2 || *axis >= 2 {
                return Err(Error::Shape("axis reduction requires rank-2 input".into()));
            }
            let (rows, cols) = (an.shape[0], an.shape[1]);
            let out_len = if *axis == 0 { cols } else { rows };
            let mut data = vec![0.0; out_len];
            for r in 0..rows {
                for c in 0..cols {
                    let i = if *axis == 0 { c } else { r };
                    data[i] += an.data[r * cols + c];
                }
            }
            if matches!(op, Op::MeanAxis(..)) {
                let denom = if *axis == 0 { rows } else { cols } as f64;
                for v in &mut data {
                    *v /= denom;
                }
            }
            Ok((vec![out_len], data))
        }
        Op::Concat(parts, axis) => {
            if parts.is_empty() {
                return Err(Error::Shape("concat of zero tensors".into()));
            }
            if *axis == 0 {
                let first = get(&parts[0])?;
                let cols = matrix_dims(&first.shape).1;
                let mut rows = 0;
                let mut data = Vec::new();
                for p in parts {
                    let pn = get(p)?;
                    let (pr, pc) = matrix_dims(&pn.shape);
                    if pc != cols {
                        return Err(Error::Shape(format!(
                            "concat axis 0: {pc} columns where {cols} expected"
                        )));
                    }
                    rows += pr;
                    data.extend_from_slice(&pn.data);
                }
                Ok((vec![rows, cols], data))
            } else {
                let first = get(&parts[0])?;
                let rows = matrix_dims(&first.shape).0;
                let mut widths = Vec::with_capacity(parts.len());
                let mut total = 0;
                for p in parts {
                    let pn = get(p)?;
                    let (pr, pc) = matrix_dims(&pn.shape);
                    if pr != rows {
                        return Err(Error::Shape(format!(
                            "concat axis 1: {pr} rows where {rows} expected"
                        )));
                    }
                    widths.push(pc);
                    total += pc;
                }
                let mut data = vec![0.0; rows * total];
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    let pn = get(p)?;
                    for r in 0..rows {
                        data[r * total + off..r * total + off + w]
                            .copy_from_slice(&pn.data[r * w..(r + 1) * w]);
                    }
                    off += w;
                }
                Ok((vec![rows, total], data))
            }
        }
        Op::SliceRows(a, start, end) => {
            let an = get(a)?;
            let (rows, cols) = matrix_dims(&an.shape);
            if *start >= *end || *end > rows {
                return Err(Error::Shape(format!(
                    "slice_rows {start}..{end} out of {rows} rows"
                )));
            }
            let data = an.data[start * cols..end * cols].to_vec();
            Ok((vec![end - start, cols], data))
        }
        Op::SliceCols(a, start, end) => {
            let an = get(a)?;
            let (rows, cols) = matrix_dims(&an.shape);
            if *start >= *end || *end > cols {
                return Err(Error::Shape(format!(
                    "slice_cols {start}..{end} out of {cols} columns"
                )));
            }
            let w = end - start;
            let mut data = vec![0.0; rows * w];
            for r in 0..rows {
                data[r * w..(r + 1) * w]
                    .copy_from_slice(&an.data[r * cols + start..r * cols + end]);
            }
            Ok((vec![rows, w], data))
        }
        Op::GatherRows(table, indices) => {
            let tn = get(table)?;
            let (rows, cols) = matrix_dims(&tn.shape);
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                if i >= rows {
                    return Err(Error::Shape(format!(
                        "gather_rows: index {i} out of {rows} rows"
                    )));
                }
                data.extend_from_slice(&tn.data[i * cols..(i + 1) * cols]);
            }
            Ok((vec![indices.len(), cols], data))
        }
        Op::TakePerRow(a, indices) => {
            let an = get(a)?;
            let (rows, cols) = matrix_dims(&an.shape);
            if indices.len() != rows {
                return Err(Error::Shape(format!(
                    "take_per_row: {} indices for {rows} rows",
                    indices.len()
                )));
            }
            let mut data = Vec::with_capacity(rows);
            for (r, &c) in indices.iter().enumerate() {
                if c >= cols {
                    return Err(Error::Shape(format!(
                        "take_per_row: column {c} out of {cols}"
                    )));
                }
                data.push(an.data[r * cols + c]);
            }
            Ok((vec![rows, 1], data))
        }
        Op::Reshape(a) => {
            let an = get(a)?;
            // The public constructor overwrites the shape after pushing.
            Ok((an.shape.clone(), an.data.clone()))
        }
    }
}
