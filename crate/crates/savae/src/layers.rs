//! Neural building blocks: token embedding, affine projection, LSTM cell.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::Result;

/// Uniform init in [-0.08, 0.08], the default for every trainable tensor
/// except forget-gate biases.
pub const INIT_RANGE: f32 = 0.08;

fn uniform_param(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect();
    Tensor::param(shape, data).expect("shape/data consistent")
}

/// Token embedding table, one row per vocabulary entry.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weights: Tensor,
}

impl EmbeddingTable {
    pub fn new(vocab_size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        EmbeddingTable {
            weights: uniform_param(vec![vocab_size, dim], rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Look up `ids` (row-major [batch, time]) -> [batch, time, dim].
pub fn embed(g: &mut Graph, table: &EmbeddingTable, ids: &[u32], batch: usize, time: usize) -> Result<Tensor> {
    g.gather(&table.weights, ids, &[batch, time])
}

/// Parameters of one LSTM cell. Gate order is [input, forget, output, cell].
/// No peepholes; forget-gate bias starts at 1.0.
#[derive(Clone, Debug)]
pub struct LstmCellParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub input_weights: [Tensor; 4],
    pub recurrent_weights: [Tensor; 4],
    pub bias: [Tensor; 4],
}

pub const GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];
const FORGET: usize = 1;

impl LstmCellParams {
    pub fn new(input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let input_weights = std::array::from_fn(|_| uniform_param(vec![input_dim, hidden_dim], rng));
        let recurrent_weights =
            std::array::from_fn(|_| uniform_param(vec![hidden_dim, hidden_dim], rng));
        let mut bias: [Tensor; 4] = std::array::from_fn(|_| uniform_param(vec![hidden_dim], rng));
        for v in bias[FORGET].data_mut() {
            *v = 1.0;
        }
        LstmCellParams {
            input_dim,
            hidden_dim,
            input_weights,
            recurrent_weights,
            bias,
        }
    }

    pub fn watch(&mut self, g: &mut Graph) {
        for t in self
            .input_weights
            .iter_mut()
            .chain(self.recurrent_weights.iter_mut())
            .chain(self.bias.iter_mut())
        {
            g.watch(t);
        }
    }

    /// Visit all 12 tensors in a fixed order with checkpoint-style names
    /// (`w_i`, ..., `u_i`, ..., `b_i`, ...).
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (gate, name) in GATE_NAMES.iter().enumerate() {
            f(format!("w_{name}"), &self.input_weights[gate]);
        }
        for (gate, name) in GATE_NAMES.iter().enumerate() {
            f(format!("u_{name}"), &self.recurrent_weights[gate]);
        }
        for (gate, name) in GATE_NAMES.iter().enumerate() {
            f(format!("b_{name}"), &self.bias[gate]);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (gate, name) in GATE_NAMES.iter().enumerate() {
            f(format!("w_{name}"), &mut self.input_weights[gate]);
        }
        for (gate, name) in GATE_NAMES.iter().enumerate() {
            f(format!("u_{name}"), &mut self.recurrent_weights[gate]);
        }
        for (gate, name) in GATE_NAMES.iter().enumerate() {
            f(format!("b_{name}"), &mut self.bias[gate]);
        }
    }
}

/// Hidden and cell state, both [batch, hidden_dim].
#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden_dim: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[batch, hidden_dim]),
            c: Tensor::zeros(&[batch, hidden_dim]),
        }
    }
}

/// One step of the cell:
/// i = sigmoid(xW_i + hU_i + b_i), f, o analogous, g = tanh(xW_g + hU_g + b_g),
/// c' = f*c + i*g, h' = o*tanh(c').
pub fn lstm_step(
    g: &mut Graph,
    params: &LstmCellParams,
    x_t: &Tensor,
    state: &LstmState,
) -> Result<LstmState> {
    let mut pre = Vec::with_capacity(4);
    for gate in 0..4 {
        let xw = g.matmul(x_t, &params.input_weights[gate])?;
        let hu = g.matmul(&state.h, &params.recurrent_weights[gate])?;
        let s = g.add(&xw, &hu)?;
        pre.push(g.add_bias(&s, &params.bias[gate])?);
    }
    let i_gate = g.sigmoid(&pre[0])?;
    let f_gate = g.sigmoid(&pre[1])?;
    let o_gate = g.sigmoid(&pre[2])?;
    let g_gate = g.tanh(&pre[3])?;
    let keep = g.mul(&f_gate, &state.c)?;
    let write = g.mul(&i_gate, &g_gate)?;
    let c_new = g.add(&keep, &write)?;
    let c_act = g.tanh(&c_new)?;
    let h_new = g.mul(&o_gate, &c_act)?;
    Ok(LstmState { h: h_new, c: c_new })
}

/// Affine projection parameters.
#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearParams {
            weight: uniform_param(vec![in_dim, out_dim], rng),
            bias: uniform_param(vec![out_dim], rng),
        }
    }

    pub fn watch(&mut self, g: &mut Graph) {
        g.watch(&mut self.weight);
        g.watch(&mut self.bias);
    }

    pub fn apply(&self, g: &mut Graph, x: &Tensor) -> Result<Tensor> {
        linear(g, &self.weight, &self.bias, x)
    }
}

/// x W + b for x: [batch, in], W: [in, out], b: [out].
pub fn linear(g: &mut Graph, w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
    let xw = g.matmul(x, w)?;
    g.add_bias(&xw, b)
}
