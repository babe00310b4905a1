//! Small dense networks: parameters, forward evaluation, tape registration,
//! SGD with momentum, and JSON checkpoints.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Softmax,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major `out x in` weight matrix.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Parameters of a dense multilayer network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub output_head: OutputHead,
    /// Seed the weights were initialized from, carried for provenance.
    pub init_seed: u64,
}

impl MlpParams {
    /// Xavier-uniform initialization (uniform in ±sqrt(6/(fan_in+fan_out))),
    /// biases zero, from a dedicated seeded generator.
    pub fn init_seeded(dims: &[usize], activation: Activation, output_head: OutputHead, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidParameter {
                name: "dims",
                reason: format!("need at least input and output dimensions, got {dims:?}"),
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParameter {
                name: "dims",
                reason: format!("zero layer width in {dims:?}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            layers.push(Layer {
                weight: Tensor::matrix(fan_out, fan_in, weight)?,
                bias: Tensor::zeros(vec![fan_out]),
            });
        }
        Ok(MlpParams {
            layers,
            activation,
            output_head,
            init_seed: seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    /// Zeroes the final layer (weights and bias). Zero-headed softmax nets
    /// predict the uniform distribution regardless of input.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("at least one layer");
        let (r, c) = (last.out_dim(), last.in_dim());
        last.weight = Tensor::zeros(vec![r, c]);
        last.bias = Tensor::zeros(vec![r]);
    }

    fn check_layer_chain(&self) -> Result<()> {
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::InvalidShape {
                    context: "MlpParams layers",
                    reason: format!(
                        "layer {k} out={} incompatible with layer {} in={}",
                        pair[0].out_dim(),
                        k + 1,
                        pair[1].in_dim()
                    ),
                });
            }
        }
        Ok(())
    }

    /// Plain forward evaluation without gradient recording.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "forward input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let n_layers = self.layers.len();
        let mut cur = input.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.out_dim()];
            tensor::matvec(layer.weight.values(), layer.out_dim(), layer.in_dim(), &cur, &mut out);
            for (o, b) in out.iter_mut().zip(layer.bias.values()) {
                *o += b;
            }
            if k + 1 < n_layers {
                apply_activation(self.activation, &mut out);
            }
            cur = out;
        }
        if self.output_head == OutputHead::Softmax {
            let logits = cur.clone();
            tensor::softmax(&logits, &mut cur);
        }
        Ok(cur)
    }

    /// Forward pass returning both the last hidden activation and the output.
    /// Requires at least one hidden layer.
    pub fn forward_with_features(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.layers.len() < 2 {
            return Err(Error::InvalidParameter {
                name: "layers",
                reason: "feature extraction needs at least one hidden layer".into(),
            });
        }
        if input.len() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                context: "forward input",
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let n_layers = self.layers.len();
        let mut cur = input.to_vec();
        let mut features = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; layer.out_dim()];
            tensor::matvec(layer.weight.values(), layer.out_dim(), layer.in_dim(), &cur, &mut out);
            for (o, b) in out.iter_mut().zip(layer.bias.values()) {
                *o += b;
            }
            if k + 1 < n_layers {
                apply_activation(self.activation, &mut out);
                if k + 2 == n_layers {
                    features = out.clone();
                }
            }
            cur = out;
        }
        if self.output_head == OutputHead::Softmax {
            let logits = cur.clone();
            tensor::softmax(&logits, &mut cur);
        }
        Ok((features, cur))
    }

    /// Register all layer parameters as tape leaves.
    pub fn register_on_tape(&self, tape: &mut Tape) -> TapeParams {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            weights.push(tape.param(layer.weight.values()));
            biases.push(tape.param(layer.bias.values()));
        }
        TapeParams { weights, biases }
    }

    /// Forward pass recorded on a tape. Returns the output node and, when the
    /// net has a hidden layer, the last hidden activation node.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &TapeParams, input: NodeId) -> Result<TapeForward> {
        let n_layers = self.layers.len();
        let mut cur = input;
        let mut features = None;
        for (k, layer) in self.layers.iter().enumerate() {
            cur = tape.affine(params.weights[k], params.biases[k], cur, layer.out_dim(), layer.in_dim())?;
            if k + 1 < n_layers {
                cur = match self.activation {
                    Activation::Relu => tape.relu(cur),
                    Activation::Tanh => tape.tanh(cur),
                };
                if k + 2 == n_layers {
                    features = Some(cur);
                }
            }
        }
        let output = match self.output_head {
            OutputHead::Softmax => tape.softmax(cur),
            OutputHead::Identity => cur,
        };
        Ok(TapeForward { output, features })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let params: MlpParams = serde_json::from_reader(std::io::BufReader::new(file))?;
        params.check_layer_chain()?;
        Ok(params)
    }
}

fn apply_activation(activation: Activation, values: &mut [f64]) {
    match activation {
        Activation::Relu => {
            for v in values.iter_mut() {
                *v = v.max(0.0);
            }
        }
        Activation::Tanh => {
            for v in values.iter_mut() {
                *v = v.tanh();
            }
        }
    }
}

/// Node ids of parameters registered on a tape, in layer order.
pub struct TapeParams {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

pub struct TapeForward {
    pub output: NodeId,
    pub features: Option<NodeId>,
}

/// Per-layer parameter gradients in the same shapes as the parameters.
#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
    /// True when no gradient path reached this layer.
    pub detached: bool,
}

impl TapeParams {
    /// Collect per-layer gradients after a backward pass. Detached layers get
    /// zeros and a warning flag.
    pub fn collect_grads(&self, net: &MlpParams, grads: &Gradients) -> Vec<LayerGrads> {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .zip(net.layers.iter())
            .map(|((&w, &b), layer)| {
                let (d_weight, wd) = grads.of_or_zero(w, layer.weight.len());
                let (d_bias, bd) = grads.of_or_zero(b, layer.bias.len());
                LayerGrads {
                    d_weight,
                    d_bias,
                    detached: wd && bd,
                }
            })
            .collect()
    }
}

/// Epoch/batch/optimizer settings shared by the training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 36,
            learning_rate: 0.02,
            momentum: 0.5,
        }
    }
}

/// SGD with classical momentum and per-layer velocity buffers.
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    vel_w: Vec<Vec<f64>>,
    vel_b: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(net: &MlpParams, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::InvalidParameter {
                name: "learning_rate",
                reason: format!("{learning_rate} must be positive and finite"),
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidParameter {
                name: "momentum",
                reason: format!("{momentum} must lie in [0, 1)"),
            });
        }
        Ok(SgdMomentum {
            learning_rate,
            momentum,
            vel_w: net.layers.iter().map(|l| vec![0.0; l.weight.len()]).collect(),
            vel_b: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        })
    }

    /// v <- momentum*v + g; p <- p - lr*v. Rejects non-finite gradients with
    /// the offending layer index, leaving parameters untouched.
    pub fn step(&mut self, net: &mut MlpParams, grads: &[LayerGrads]) -> Result<()> {
        for (k, g) in grads.iter().enumerate() {
            let finite = g.d_weight.iter().chain(g.d_bias.iter()).all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFiniteGradient { layer: k });
            }
        }
        for (k, g) in grads.iter().enumerate() {
            let layer = &mut net.layers[k];
            for (i, dv) in g.d_weight.iter().enumerate() {
                let v = &mut self.vel_w[k][i];
                *v = self.momentum * *v + dv;
                layer.weight.values_mut()[i] -= self.learning_rate * *v;
            }
            for (i, dv) in g.d_bias.iter().enumerate() {
                let v = &mut self.vel_b[k][i];
                *v = self.momentum * *v + dv;
                layer.bias.values_mut()[i] -= self.learning_rate * *v;
            }
            layer.weight.check_finite("sgd weight update")?;
            layer.bias.check_finite("sgd bias update")?;
        }
        Ok(())
    }
}
