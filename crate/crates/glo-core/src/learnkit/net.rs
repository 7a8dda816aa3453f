//! Toy encoder/predictor networks: two-layer tanh MLPs with hand-rolled
//! backpropagation, momentum-SGD, and flat little-endian f32 parameter
//! serialization with a JSON shape header.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LearnError;

/// Two-layer perceptron `out = W2 tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    /// Row-major `hidden_dim x in_dim`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `out_dim x hidden_dim`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Forward-pass activations needed for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub input: Vec<f64>,
    /// Post-tanh hidden activations.
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn init(in_dim: usize, hidden_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let scale1 = 1.0 / (in_dim as f64).sqrt();
        let scale2 = 1.0 / (hidden_dim as f64).sqrt();
        let n1 = Normal::new(0.0, scale1).expect("positive std");
        let n2 = Normal::new(0.0, scale2).expect("positive std");
        Mlp {
            in_dim,
            hidden_dim,
            out_dim,
            w1: (0..hidden_dim * in_dim).map(|_| n1.sample(rng)).collect(),
            b1: vec![0.0; hidden_dim],
            w2: (0..out_dim * hidden_dim).map(|_| n2.sample(rng)).collect(),
            b2: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> MlpTrace {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut hidden = vec![0.0; self.hidden_dim];
        for j in 0..self.hidden_dim {
            let mut acc = self.b1[j];
            for i in 0..self.in_dim {
                acc += self.w1[j * self.in_dim + i] * x[i];
            }
            hidden[j] = acc.tanh();
        }
        let mut output = vec![0.0; self.out_dim];
        for o in 0..self.out_dim {
            let mut acc = self.b2[o];
            for j in 0..self.hidden_dim {
                acc += self.w2[o * self.hidden_dim + j] * hidden[j];
            }
            output[o] = acc;
        }
        MlpTrace { input: x.to_vec(), hidden, output }
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).output
    }

    /// Accumulate parameter gradients for one sample into `grads` and
    /// return the gradient with respect to the input.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        debug_assert_eq!(grad_out.len(), self.out_dim);
        let mut grad_hidden = vec![0.0; self.hidden_dim];
        for o in 0..self.out_dim {
            let g = grad_out[o];
            grads.b2[o] += g;
            for j in 0..self.hidden_dim {
                grads.w2[o * self.hidden_dim + j] += g * trace.hidden[j];
                grad_hidden[j] += g * self.w2[o * self.hidden_dim + j];
            }
        }
        let mut grad_in = vec![0.0; self.in_dim];
        for j in 0..self.hidden_dim {
            let gpre = grad_hidden[j] * (1.0 - trace.hidden[j] * trace.hidden[j]);
            grads.b1[j] += gpre;
            for i in 0..self.in_dim {
                grads.w1[j * self.in_dim + i] += gpre * trace.input[i];
                grad_in[i] += gpre * self.w1[j * self.in_dim + i];
            }
        }
        grad_in
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn params_flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
    }

    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut cursor = 0;
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let len = part.len();
            part.copy_from_slice(&flat[cursor..cursor + len]);
            cursor += len;
        }
    }

    fn apply_flat_mut(&mut self, f: &mut impl FnMut(&mut f64, usize), offset: usize) -> usize {
        let mut idx = offset;
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            for v in part.iter_mut() {
                f(v, idx);
                idx += 1;
            }
        }
        idx
    }
}

/// Gradient buffers matching an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros(net: &Mlp) -> Self {
        MlpGrads {
            w1: vec![0.0; net.w1.len()],
            b1: vec![0.0; net.b1.len()],
            w2: vec![0.0; net.w2.len()],
            b2: vec![0.0; net.b2.len()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            for v in part.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn flat(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
    }
}

/// Encoder/predictor dimensions; small enough for exhaustive
/// finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyNetDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub predictor_hidden: usize,
}

impl Default for ToyNetDims {
    fn default() -> Self {
        ToyNetDims { input_dim: 16, hidden_dim: 32, embed_dim: 16, predictor_hidden: 32 }
    }
}

/// Encoder plus predictor for the toy contrastive trainer.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    pub dims: ToyNetDims,
    pub encoder: Mlp,
    pub predictor: Mlp,
}

impl ToyNet {
    pub fn init(dims: ToyNetDims, rng: &mut impl Rng) -> Self {
        ToyNet {
            dims,
            encoder: Mlp::init(dims.input_dim, dims.hidden_dim, dims.embed_dim, rng),
            predictor: Mlp::init(dims.embed_dim, dims.predictor_hidden, dims.embed_dim, rng),
        }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.output(x)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.predictor.param_count()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.params_flat(&mut out);
        self.predictor.params_flat(&mut out);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), LearnError> {
        if flat.len() != self.param_count() {
            return Err(LearnError::Serialization(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let enc = self.encoder.param_count();
        self.encoder.load_flat(&flat[..enc]);
        self.predictor.load_flat(&flat[enc..]);
        Ok(())
    }

    /// Write as a single-line JSON shape header followed by the flat
    /// parameter vector as little-endian 32-bit floats.
    pub fn write(&self, w: &mut impl Write) -> Result<(), LearnError> {
        let header = serde_json::json!({
            "format": "toynet-f32",
            "dims": self.dims,
            "param_count": self.param_count(),
        });
        let mut line = serde_json::to_string(&header)
            .map_err(|e| LearnError::Serialization(e.to_string()))?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        for v in self.params_flat() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self, LearnError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| LearnError::Serialization("missing header line".into()))?;
        #[derive(Deserialize)]
        struct Header {
            format: String,
            dims: ToyNetDims,
            param_count: usize,
        }
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| LearnError::Serialization(format!("bad header: {e}")))?;
        if header.format != "toynet-f32" {
            return Err(LearnError::Serialization(format!("unknown format `{}`", header.format)));
        }
        let body = &bytes[newline + 1..];
        if body.len() != header.param_count * 4 {
            return Err(LearnError::Serialization(format!(
                "expected {} parameter bytes, got {}",
                header.param_count * 4,
                body.len()
            )));
        }
        let flat: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = ToyNet::init(header.dims, &mut rng);
        net.load_flat(&flat)?;
        Ok(net)
    }
}

/// Momentum-SGD hyperparameters (PyTorch-style: weight decay is added to
/// the gradient, momentum buffers accumulate the decayed gradient).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: 0.9, weight_decay: 1e-4 }
    }
}

/// Velocity buffers for momentum-SGD over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<f64>,
    config: SgdConfig,
}

impl SgdState {
    pub fn new(param_count: usize, config: SgdConfig) -> Self {
        SgdState { velocity: vec![0.0; param_count], config }
    }

    /// One update over flat parameter and gradient slices.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.velocity.len());
        for i in 0..params.len() {
            let g = grads[i] + self.config.weight_decay * params[i];
            self.velocity[i] = self.config.momentum * self.velocity[i] + g;
            params[i] -= lr * self.velocity[i];
        }
    }

    /// One update applied in place to a whole toy network.
    pub fn step_net(&mut self, net: &mut ToyNet, grads_flat: &[f64], lr: f64) {
        let mut idx = 0;
        let momentum = self.config.momentum;
        let wd = self.config.weight_decay;
        let velocity = &mut self.velocity;
        let mut update = |v: &mut f64, i: usize| {
            let g = grads_flat[i] + wd * *v;
            velocity[i] = momentum * velocity[i] + g;
            *v -= lr * velocity[i];
        };
        idx = net.encoder.apply_flat_mut(&mut update, idx);
        net.predictor.apply_flat_mut(&mut update, idx);
    }
}
