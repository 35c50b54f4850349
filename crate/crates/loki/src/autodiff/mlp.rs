//! Multi-layer perceptron parameters and tape-based forward pass.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Activation, Tape, Var};
use crate::rng::standard_normal;
use crate::{LokiError, Result};

/// One dense layer: `y = act(W x + b)` with `W` row-major (out x in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameters of a fully connected network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<LayerParams>,
}

impl MlpParams {
    /// Initializes weights i.i.d. N(0, 1/in_dim) and biases zero. `dims` is
    /// `[input, hidden..., output]`; hidden layers use `hidden_act`, the last
    /// layer `output_act`.
    pub fn init(dims: &[usize], hidden_act: Activation, output_act: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for l in 0..dims.len() - 1 {
            let (in_dim, out_dim) = (dims[l], dims[l + 1]);
            let scale = 1.0 / (in_dim as f64).sqrt();
            let weight = (0..in_dim * out_dim)
                .map(|_| standard_normal(rng) * scale)
                .collect();
            layers.push(LayerParams {
                in_dim,
                out_dim,
                activation: if l + 2 == dims.len() { output_act } else { hidden_act },
                weight,
                bias: vec![0.0; out_dim],
            });
        }
        MlpParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    /// Tape-free forward pass for inference.
    pub fn infer(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "mlp input length mismatch");
        let mut cur = x.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.out_dim];
            for o in 0..layer.out_dim {
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut acc = layer.bias[o];
                for (i, &xi) in cur.iter().enumerate() {
                    acc += row[i] * xi;
                }
                next[o] = layer.activation.apply(acc);
            }
            cur = next;
        }
        cur
    }

    /// Flat parameter arrays in a fixed order (w0, b0, w1, b1, ...).
    pub fn arrays(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn array_lens(&self) -> Vec<usize> {
        self.arrays().iter().map(|a| a.len()).collect()
    }
}

/// An MLP's parameters registered as leaves on a tape. Binding once per tape
/// makes repeated forward passes accumulate gradients into the same leaves.
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
    dims: Vec<(usize, usize, Activation)>,
}

impl BoundMlp {
    pub fn bind(tape: &mut Tape, params: &MlpParams) -> Self {
        let mut vars = Vec::with_capacity(params.layers.len());
        let mut dims = Vec::with_capacity(params.layers.len());
        for l in &params.layers {
            let w = tape.leaf(&l.weight);
            let b = tape.leaf(&l.bias);
            vars.push((w, b));
            dims.push((l.in_dim, l.out_dim, l.activation));
        }
        BoundMlp { vars, dims }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0].0
    }

    /// Leaf gradients in `arrays()` order after a backward pass.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.vars.len() * 2);
        for (w, b) in &self.vars {
            out.push(tape.grad(*w).to_vec());
            out.push(tape.grad(*b).to_vec());
        }
        out
    }

    /// Gradient slices in `arrays()` order without copying.
    pub fn grad_refs<'t>(&self, tape: &'t Tape) -> Vec<&'t [f64]> {
        let mut out = Vec::with_capacity(self.vars.len() * 2);
        for (w, b) in &self.vars {
            out.push(tape.grad(*w));
            out.push(tape.grad(*b));
        }
        out
    }
}

/// Runs a bound MLP forward on the tape.
pub fn forward_mlp(tape: &mut Tape, mlp: &BoundMlp, input: Var) -> Result<Var> {
    if tape.value(input).len() != mlp.input_dim() {
        return Err(LokiError::InvalidArgument(format!(
            "mlp input length {} does not match first layer in_dim {}",
            tape.value(input).len(),
            mlp.input_dim()
        )));
    }
    let mut cur = input;
    for ((w, b), (_, _, act)) in mlp.vars.iter().zip(&mlp.dims) {
        let h = tape.affine(*w, *b, cur);
        cur = tape.activation(h, *act);
    }
    Ok(cur)
}
