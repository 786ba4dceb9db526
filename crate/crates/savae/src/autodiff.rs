//! Reverse-mode automatic differentiation over dense f32 tensors.
//!
//! Operations are recorded on a [`Graph`] (a linear tape). The forward pass
//! appends nodes in topological order; [`Graph::backward`] replays the tape in
//! reverse, accumulating gradients by the chain rule. A tensor joins a graph
//! either through [`Graph::watch`] (trainable leaf) or implicitly as a
//! constant when it feeds a tracked operation. When no input of an operation
//! is tracked, nothing is recorded and the op is a plain computation —
//! inference builds no graph at all.
//!
//! Node identifiers are only valid for the graph that issued them; a tensor
//! carrying a reference into a dropped graph is treated as untracked data.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static GRAPH_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Reference to a node in a specific graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    graph: u64,
    id: usize,
}

/// Dense row-major f32 tensor with an optional gradient and an optional
/// handle into the active computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    node: Option<NodeRef>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: Arc::new(vec![value]),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    /// Trainable tensor (requires_grad = true).
    pub fn param(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let mut t = Tensor::from_vec(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the underlying values. Detaches the tensor from any
    /// graph it was recorded on (recorded forward values are snapshots).
    pub fn data_mut(&mut self) -> &mut [f32] {
        self.node = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn node(&self) -> Option<NodeRef> {
        self.node
    }

    /// Add this tensor's gradient from `graph` into its own `grad` buffer.
    /// Gradients accumulate additively until [`Tensor::zero_grad`].
    pub fn accumulate_grad(&mut self, graph: &Graph) {
        if let Some(src) = graph.grad(self) {
            let buf = self
                .grad
                .get_or_insert_with(|| vec![0.0; self.data.len()]);
            for (g, s) in buf.iter_mut().zip(src) {
                *g += s;
            }
        }
    }

    fn untracked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }
}

/// Operation kinds recorded on the tape.
#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    Matmul,
    Add,
    MulElementwise,
    ConcatLastDim,
    /// Select one time step of a [batch, time, dim] tensor.
    Slice { step: usize },
    Sigmoid,
    Tanh,
    Exp,
    Log,
    /// Fused log-softmax + NLL per row; `targets[i]` is row i's class id.
    SoftmaxCrossEntropy { targets: Vec<u32> },
    /// Row lookup into an embedding table.
    EmbeddingGather { ids: Vec<u32> },
    /// Multiplication by an externally sampled (inverted, scaled) mask.
    DropoutWithMask { mask: Vec<f32> },
    Sum,
    SumRows,
    Mean,
    BroadcastAddBias,
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    shape: Vec<usize>,
    value: Arc<Vec<f32>>,
    needs_grad: bool,
}

/// Append-only computation tape. Topological order is the append order.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: GRAPH_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Register `t` as a trainable leaf of this graph. No-op if `t` does not
    /// require gradients or is already watched here.
    pub fn watch(&mut self, t: &mut Tensor) {
        if !t.requires_grad {
            return;
        }
        if let Some(nr) = t.node {
            if nr.graph == self.id {
                return;
            }
        }
        let id = self.push(
            Op::Leaf { trainable: true },
            vec![],
            t.shape.clone(),
            Arc::clone(&t.data),
            true,
        );
        t.node = Some(NodeRef { graph: self.id, id });
    }

    /// Gradient of the last `backward` with respect to `t`, if `t` is a node
    /// of this graph that received one.
    pub fn grad(&self, t: &Tensor) -> Option<&[f32]> {
        let nr = t.node?;
        if nr.graph != self.id {
            return None;
        }
        self.grads.get(nr.id)?.as_deref()
    }

    fn node_id(&self, t: &Tensor) -> Option<usize> {
        match t.node {
            Some(nr) if nr.graph == self.id => Some(nr.id),
            _ => None,
        }
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        shape: Vec<usize>,
        value: Arc<Vec<f32>>,
        needs_grad: bool,
    ) -> usize {
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn intern_const(&mut self, t: &Tensor) -> usize {
        self.push(
            Op::Leaf { trainable: false },
            vec![],
            t.shape.clone(),
            Arc::clone(&t.data),
            false,
        )
    }

    /// Record an op result. If no input is tracked the result is plain data.
    fn emit(&mut self, op: Op, inputs: &[&Tensor], shape: Vec<usize>, value: Vec<f32>) -> Tensor {
        let any_tracked = inputs.iter().any(|t| self.node_id(t).is_some());
        if !any_tracked {
            return Tensor::untracked(shape, value);
        }
        let mut input_ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            let id = match self.node_id(t) {
                Some(id) => id,
                None => self.intern_const(t),
            };
            input_ids.push(id);
        }
        let needs_grad = input_ids.iter().any(|&i| self.nodes[i].needs_grad);
        let data = Arc::new(value);
        let id = self.push(op, input_ids, shape.clone(), Arc::clone(&data), needs_grad);
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            node: Some(NodeRef { graph: self.id, id }),
        }
    }

    // ── Forward operations ──────────────────────────────────────────────

    /// 2-D matrix product: [m, k] x [k, n] -> [m, n].
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
            return Err(shape_err("matmul", a, b));
        }
        let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = vec![0.0f32; m * n];
        kernels::sgemm_nn(m, k, n, &a.data, &b.data, &mut out);
        check_finite("matmul", &out)?;
        Ok(self.emit(Op::Matmul, &[a, b], vec![m, n], out))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(shape_err("add", a, b));
        }
        let out: Vec<f32> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        check_finite("add", &out)?;
        Ok(self.emit(Op::Add, &[a, b], a.shape.clone(), out))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape != b.shape {
            return Err(shape_err("mul-elementwise", a, b));
        }
        let out: Vec<f32> = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
        check_finite("mul-elementwise", &out)?;
        Ok(self.emit(Op::MulElementwise, &[a, b], a.shape.clone(), out))
    }

    /// Concatenate two [rows, a] and [rows, b] tensors into [rows, a + b].
    pub fn concat_last_dim(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[0] != b.shape[0] {
            return Err(shape_err("concat-last-dim", a, b));
        }
        let (rows, ca, cb) = (a.shape[0], a.shape[1], b.shape[1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(&a.data[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&b.data[r * cb..(r + 1) * cb]);
        }
        Ok(self.emit(Op::ConcatLastDim, &[a, b], vec![rows, ca + cb], out))
    }

    /// Select step `step` of a [batch, time, dim] tensor -> [batch, dim].
    pub fn slice_step(&mut self, x: &Tensor, step: usize) -> Result<Tensor> {
        if x.shape.len() != 3 {
            return Err(Error::Shape {
                op: "slice",
                lhs: x.shape.clone(),
                rhs: vec![],
            });
        }
        let (b, t, d) = (x.shape[0], x.shape[1], x.shape[2]);
        if step >= t {
            return Err(Error::Index(format!(
                "slice step {} out of range for time dimension {}",
                step, t
            )));
        }
        let mut out = Vec::with_capacity(b * d);
        for i in 0..b {
            let base = (i * t + step) * d;
            out.extend_from_slice(&x.data[base..base + d]);
        }
        Ok(self.emit(Op::Slice { step }, &[x], vec![b, d], out))
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f32> = x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        check_finite("sigmoid", &out)?;
        Ok(self.emit(Op::Sigmoid, &[x], x.shape.clone(), out))
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f32> = x.data.iter().map(|&v| v.tanh()).collect();
        check_finite("tanh", &out)?;
        Ok(self.emit(Op::Tanh, &[x], x.shape.clone(), out))
    }

    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f32> = x.data.iter().map(|&v| v.exp()).collect();
        check_finite("exp", &out)?;
        Ok(self.emit(Op::Exp, &[x], x.shape.clone(), out))
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        if let Some(&bad) = x.data.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Numeric {
                op: "log",
                detail: format!("input {} outside the positive domain", bad),
            });
        }
        let out: Vec<f32> = x.data.iter().map(|&v| v.ln()).collect();
        check_finite("log", &out)?;
        Ok(self.emit(Op::Log, &[x], x.shape.clone(), out))
    }

    /// Per-row negative log-likelihood of `targets` under softmax(logits).
    /// logits: [rows, classes], output: [rows]. Fused and max-shifted.
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
        if logits.shape.len() != 2 || logits.shape[0] != targets.len() {
            return Err(Error::Shape {
                op: "softmax-cross-entropy-with-logits",
                lhs: logits.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let (rows, classes) = (logits.shape[0], logits.shape[1]);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let t = targets[r] as usize;
            if t >= classes {
                return Err(Error::Index(format!(
                    "softmax-cross-entropy target {} out of range for {} classes (row {})",
                    t, classes, r
                )));
            }
            let row = &logits.data[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
            out.push(max + sum.ln() - row[t]);
        }
        check_finite("softmax-cross-entropy-with-logits", &out)?;
        Ok(self.emit(
            Op::SoftmaxCrossEntropy {
                targets: targets.to_vec(),
            },
            &[logits],
            vec![rows],
            out,
        ))
    }

    /// Gather rows of `table` ([vocab, dim]) by id. `prefix` is the leading
    /// output shape; the result is [prefix..., dim] with prefix product ==
    /// ids.len().
    pub fn gather(&mut self, table: &Tensor, ids: &[u32], prefix: &[usize]) -> Result<Tensor> {
        if table.shape.len() != 2 {
            return Err(Error::Shape {
                op: "embedding-gather",
                lhs: table.shape.clone(),
                rhs: prefix.to_vec(),
            });
        }
        let count: usize = prefix.iter().product();
        if count != ids.len() {
            return Err(Error::Contract(format!(
                "gather prefix {:?} does not cover {} ids",
                prefix,
                ids.len()
            )));
        }
        let (vocab, dim) = (table.shape[0], table.shape[1]);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for (pos, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= vocab {
                return Err(Error::Index(format!(
                    "embedding id {} out of range for vocabulary of {} (position {})",
                    id, vocab, pos
                )));
            }
            out.extend_from_slice(&table.data[id * dim..(id + 1) * dim]);
        }
        let mut shape = prefix.to_vec();
        shape.push(dim);
        Ok(self.emit(
            Op::EmbeddingGather { ids: ids.to_vec() },
            &[table],
            shape,
            out,
        ))
    }

    /// Multiply by an externally sampled mask (inverted dropout: entries are
    /// 0 or 1/(1-p)), so the forward pass stays a pure function.
    pub fn dropout(&mut self, x: &Tensor, mask: &[f32]) -> Result<Tensor> {
        if mask.len() != x.data.len() {
            return Err(Error::Shape {
                op: "dropout-with-mask",
                lhs: x.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let out: Vec<f32> = x.data.iter().zip(mask).map(|(v, m)| v * m).collect();
        check_finite("dropout-with-mask", &out)?;
        Ok(self.emit(
            Op::DropoutWithMask {
                mask: mask.to_vec(),
            },
            &[x],
            x.shape.clone(),
            out,
        ))
    }

    /// Sum of all elements -> rank-0 scalar.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f32 = x.data.iter().sum();
        check_finite("sum", &[s])?;
        Ok(self.emit(Op::Sum, &[x], vec![], vec![s]))
    }

    /// Row sums of a [rows, cols] tensor -> [rows].
    pub fn sum_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 2 {
            return Err(Error::Shape {
                op: "sum",
                lhs: x.shape.clone(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (x.shape[0], x.shape[1]);
        let out: Vec<f32> = (0..rows)
            .map(|r| x.data[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        check_finite("sum", &out)?;
        Ok(self.emit(Op::SumRows, &[x], vec![rows], out))
    }

    /// Mean of all elements -> rank-0 scalar.
    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.numel() == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s: f32 = x.data.iter().sum::<f32>() / x.numel() as f32;
        check_finite("mean", &[s])?;
        Ok(self.emit(Op::Mean, &[x], vec![], vec![s]))
    }

    /// Add a bias vector [cols] to every row of [rows, cols].
    pub fn add_bias(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 2 || bias.shape.len() != 1 || bias.shape[0] != x.shape[1] {
            return Err(shape_err("broadcast-add-bias", x, bias));
        }
        let (rows, cols) = (x.shape[0], x.shape[1]);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(x.data[r * cols + c] + bias.data[c]);
            }
        }
        check_finite("broadcast-add-bias", &out)?;
        Ok(self.emit(Op::BroadcastAddBias, &[x, bias], vec![rows, cols], out))
    }

    // ── Composites (no new op kinds) ────────────────────────────────────

    /// x * c, recorded as elementwise multiplication by a constant.
    pub fn scale(&mut self, x: &Tensor, c: f32) -> Result<Tensor> {
        let cs = Tensor::full(&x.shape, c);
        self.mul(x, &cs)
    }

    /// x + c, recorded as elementwise addition of a constant.
    pub fn add_scalar(&mut self, x: &Tensor, c: f32) -> Result<Tensor> {
        let cs = Tensor::full(&x.shape, c);
        self.add(x, &cs)
    }

    /// a - b.
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, &nb)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of watched leaves are
    /// retrievable through [`Graph::grad`] / [`Tensor::accumulate_grad`];
    /// they accumulate additively across multiple uses within the graph.
    pub fn backward(&mut self, loss: &Tensor) -> Result<()> {
        let loss_id = self.node_id(loss).ok_or_else(|| {
            Error::Contract("backward: loss tensor is not on the active graph".into())
        })?;
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape
            )));
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[loss_id] = Some(vec![1.0]);

        for id in (0..=loss_id).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(out_grad) = self.grads[id].take() else {
                continue;
            };
            backprop_node(&self.nodes, id, &out_grad, &mut self.grads);
            // Leaf gradients stay readable; interior grads are dropped as we
            // pass them (the `take` above) to bound memory.
            if matches!(self.nodes[id].op, Op::Leaf { trainable: true }) {
                self.grads[id] = Some(out_grad);
            }
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape.to_vec(),
        rhs: b.shape.to_vec(),
    }
}

fn check_finite(op: &'static str, values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            op,
            detail: "non-finite output".into(),
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: usize, len: usize) -> &mut [f32] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// Chain-rule step for one node: scatter `out_grad` into the node's inputs.
fn backprop_node(nodes: &[Node], id: usize, out_grad: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let node = &nodes[id];
    let wants = |i: usize| nodes[node.inputs[i]].needs_grad;
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Matmul => {
            let a = &nodes[node.inputs[0]];
            let b = &nodes[node.inputs[1]];
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            if wants(0) {
                let da = accumulate(grads, node.inputs[0], m * k);
                kernels::sgemm_nt_acc(m, n, k, out_grad, &b.value, da);
            }
            if wants(1) {
                let db = accumulate(grads, node.inputs[1], k * n);
                kernels::sgemm_tn_acc(k, m, n, &a.value, out_grad, db);
            }
        }
        Op::Add => {
            for slot in 0..2 {
                if wants(slot) {
                    let g = accumulate(grads, node.inputs[slot], out_grad.len());
                    for (gi, oi) in g.iter_mut().zip(out_grad) {
                        *gi += oi;
                    }
                }
            }
        }
        Op::MulElementwise => {
            let (a, b) = (node.inputs[0], node.inputs[1]);
            if wants(0) {
                let bv = Arc::clone(&nodes[b].value);
                let g = accumulate(grads, a, out_grad.len());
                for ((gi, oi), vi) in g.iter_mut().zip(out_grad).zip(bv.iter()) {
                    *gi += oi * vi;
                }
            }
            if wants(1) {
                let av = Arc::clone(&nodes[a].value);
                let g = accumulate(grads, b, out_grad.len());
                for ((gi, oi), vi) in g.iter_mut().zip(out_grad).zip(av.iter()) {
                    *gi += oi * vi;
                }
            }
        }
        Op::ConcatLastDim => {
            let ca = nodes[node.inputs[0]].shape[1];
            let cb = nodes[node.inputs[1]].shape[1];
            let rows = node.shape[0];
            if wants(0) {
                let g = accumulate(grads, node.inputs[0], rows * ca);
                for r in 0..rows {
                    for c in 0..ca {
                        g[r * ca + c] += out_grad[r * (ca + cb) + c];
                    }
                }
            }
            if wants(1) {
                let g = accumulate(grads, node.inputs[1], rows * cb);
                for r in 0..rows {
                    for c in 0..cb {
                        g[r * cb + c] += out_grad[r * (ca + cb) + ca + c];
                    }
                }
            }
        }
        Op::Slice { step } => {
            if wants(0) {
                let src = &nodes[node.inputs[0]];
                let (b, t, d) = (src.shape[0], src.shape[1], src.shape[2]);
                let g = accumulate(grads, node.inputs[0], b * t * d);
                for i in 0..b {
                    let base = (i * t + step) * d;
                    for j in 0..d {
                        g[base + j] += out_grad[i * d + j];
                    }
                }
            }
        }
        Op::Sigmoid => {
            if wants(0) {
                let y = Arc::clone(&node.value);
                let g = accumulate(grads, node.inputs[0], out_grad.len());
                for ((gi, oi), yi) in g.iter_mut().zip(out_grad).zip(y.iter()) {
                    *gi += oi * yi * (1.0 - yi);
                }
            }
        }
        Op::Tanh => {
            if wants(0) {
                let y = Arc::clone(&node.value);
                let g = accumulate(grads, node.inputs[0], out_grad.len());
                for ((gi, oi), yi) in g.iter_mut().zip(out_grad).zip(y.iter()) {
                    *gi += oi * (1.0 - yi * yi);
                }
            }
        }
        Op::Exp => {
            if wants(0) {
                let y = Arc::clone(&node.value);
                let g = accumulate(grads, node.inputs[0], out_grad.len());
                for ((gi, oi), yi) in g.iter_mut().zip(out_grad).zip(y.iter()) {
                    *gi += oi * yi;
                }
            }
        }
        Op::Log => {
            if wants(0) {
                let x = Arc::clone(&nodes[node.inputs[0]].value);
                let g = accumulate(grads, node.inputs[0], out_grad.len());
                for ((gi, oi), xi) in g.iter_mut().zip(out_grad).zip(x.iter()) {
                    *gi += oi / xi;
                }
            }
        }
        Op::SoftmaxCrossEntropy { targets } => {
            if wants(0) {
                let logits = Arc::clone(&nodes[node.inputs[0]].value);
                let classes = nodes[node.inputs[0]].shape[1];
                let g = accumulate(grads, node.inputs[0], logits.len());
                for (r, &t) in targets.iter().enumerate() {
                    let row = &logits[r * classes..(r + 1) * classes];
                    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
                    let go = out_grad[r];
                    for c in 0..classes {
                        let p = (row[c] - max).exp() / sum;
                        g[r * classes + c] += go * (p - if c == t as usize { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Op::EmbeddingGather { ids } => {
            if wants(0) {
                let table = &nodes[node.inputs[0]];
                let (vocab, dim) = (table.shape[0], table.shape[1]);
                let g = accumulate(grads, node.inputs[0], vocab * dim);
                for (pos, &id) in ids.iter().enumerate() {
                    let dst = id as usize * dim;
                    for j in 0..dim {
                        g[dst + j] += out_grad[pos * dim + j];
                    }
                }
            }
        }
        Op::DropoutWithMask { mask } => {
            if wants(0) {
                let g = accumulate(grads, node.inputs[0], out_grad.len());
                for ((gi, oi), mi) in g.iter_mut().zip(out_grad).zip(mask) {
                    *gi += oi * mi;
                }
            }
        }
        Op::Sum => {
            if wants(0) {
                let n = nodes[node.inputs[0]].value.len();
                let g = accumulate(grads, node.inputs[0], n);
                for gi in g.iter_mut() {
                    *gi += out_grad[0];
                }
            }
        }
        Op::SumRows => {
            if wants(0) {
                let src = &nodes[node.inputs[0]];
                let (rows, cols) = (src.shape[0], src.shape[1]);
                let g = accumulate(grads, node.inputs[0], rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        g[r * cols + c] += out_grad[r];
                    }
                }
            }
        }
        Op::Mean => {
            if wants(0) {
                let n = nodes[node.inputs[0]].value.len();
                let g = accumulate(grads, node.inputs[0], n);
                let w = out_grad[0] / n as f32;
                for gi in g.iter_mut() {
                    *gi += w;
                }
            }
        }
        Op::BroadcastAddBias => {
            let (rows, cols) = (node.shape[0], node.shape[1]);
            if wants(0) {
                let g = accumulate(grads, node.inputs[0], rows * cols);
                for (gi, oi) in g.iter_mut().zip(out_grad) {
                    *gi += oi;
                }
            }
            if wants(1) {
                let g = accumulate(grads, node.inputs[1], cols);
                for r in 0..rows {
                    for c in 0..cols {
                        g[c] += out_grad[r * cols + c];
                    }
                }
            }
        }
    }
}

mod kernels {
    //! f32 GEMM wrappers. The transposed variants index the same buffers with
    //! swapped strides, so no transpose is ever materialized.

    /// out = A[m,k] x B[k,n] (overwrite).
    pub fn sgemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    /// out += G[m,n] x B^T where B is [k,n] (gradient w.r.t. the left factor).
    pub fn sgemm_nt_acc(m: usize, n: usize, k: usize, g: &[f32], b: &[f32], out: &mut [f32]) {
        debug_assert_eq!(g.len(), m * n);
        debug_assert_eq!(b.len(), k * n);
        debug_assert_eq!(out.len(), m * k);
        unsafe {
            matrixmultiply::sgemm(
                m,
                n,
                k,
                1.0,
                g.as_ptr(),
                n as isize,
                1,
                b.as_ptr(),
                1,
                n as isize,
                1.0,
                out.as_mut_ptr(),
                k as isize,
                1,
            );
        }
    }

    /// out += A^T x G where A is [m,k], G is [m,n] (gradient w.r.t. the right
    /// factor).
    pub fn sgemm_tn_acc(k: usize, m: usize, n: usize, a: &[f32], g: &[f32], out: &mut [f32]) {
        debug_assert_eq!(a.len(), m * k);
        debug_assert_eq!(g.len(), m * n);
        debug_assert_eq!(out.len(), k * n);
        unsafe {
            matrixmultiply::sgemm(
                k,
                m,
                n,
                1.0,
                a.as_ptr(),
                1,
                k as isize,
                g.as_ptr(),
                n as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
