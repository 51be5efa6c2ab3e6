//! Convolutional feature extractor.
//!
//! Four blocks of (conv, [batch norm], activation) x 2 followed by max pooling
//! and dropout, then a single linear layer producing the embedding. Defaults
//! follow the Deep Fingerprinting network layout; the dense classifier head is
//! replaced by the linear embedding layer.

mod ops;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::trace::{ModelInput, DEFAULT_INPUT_DIM};

use ops::{BnCache, ConvShape, Nonlinearity};

pub const DEFAULT_EMBED_DIM: usize = 512;
const BLOCKS: usize = 4;
const ENCODE_CHUNK: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// ELU in the first block, ReLU afterwards.
    #[default]
    Df,
    Elu,
    Relu,
}

impl Activation {
    fn for_block(self, block: usize) -> Nonlinearity {
        match (self, block) {
            (Activation::Df, 0) | (Activation::Elu, _) => Nonlinearity::Elu,
            _ => Nonlinearity::Relu,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "df" => Ok(Activation::Df),
            "elu" => Ok(Activation::Elu),
            "relu" => Ok(Activation::Relu),
            other => Err(format!("unknown activation {other:?} (df, elu, relu)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub channels: [usize; BLOCKS],
    pub kernel_size: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    /// Applied after every block's pooling layer during training.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::df()
    }
}

impl EncoderConfig {
    /// Full-size network: 10,000 inputs, 512-dimensional embedding.
    pub fn df() -> Self {
        Self {
            input_dim: DEFAULT_INPUT_DIM,
            embed_dim: DEFAULT_EMBED_DIM,
            channels: [32, 64, 128, 256],
            kernel_size: 8,
            pool_size: 8,
            pool_stride: 4,
            activation: Activation::Df,
            batch_norm: true,
            dropout: 0.1,
        }
    }

    /// Small network for desk-scale experiments and tests.
    pub fn tiny() -> Self {
        Self {
            input_dim: 512,
            embed_dim: 32,
            channels: [8, 16, 16, 32],
            ..Self::df()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_dim == 0 || self.embed_dim == 0 {
            return bad("input and embedding dimensions must be positive".into());
        }
        if self.channels.iter().any(|c| *c == 0) {
            return bad(format!("channel sizes must be positive: {:?}", self.channels));
        }
        if self.kernel_size == 0 || self.pool_size == 0 || self.pool_stride == 0 {
            return bad("kernel, pool size and stride must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Sequence length after each block's pooling.
    pub fn block_lengths(&self) -> [usize; BLOCKS] {
        let mut len = self.input_dim;
        let mut out = [0; BLOCKS];
        for slot in &mut out {
            len = ops::pooled_len(len, self.pool_stride);
            *slot = len;
        }
        out
    }

    pub fn flattened_dim(&self) -> usize {
        self.block_lengths()[BLOCKS - 1] * self.channels[BLOCKS - 1]
    }
}

/// Named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

impl Param {
    fn new(name: String, shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Self { name, shape, value }
    }

    pub fn spec(&self) -> ParamSpec {
        ParamSpec {
            name: self.name.clone(),
            shape: self.shape.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { weight: usize, bias: usize, in_c: usize, out_c: usize, len: usize },
    Norm { gamma: usize, beta: usize, mean: usize, var: usize, channels: usize, len: usize },
    Act(Nonlinearity),
    Pool { channels: usize, len: usize },
    Dropout,
    Linear { weight: usize, bias: usize, in_f: usize, out_f: usize },
}

enum Cache {
    Conv(Vec<f64>),
    Norm(BnCache),
    Act(Vec<f64>),
    Pool(Vec<usize>, usize),
    Dropout(Vec<f64>),
    Linear(Vec<f64>),
}

/// Intermediate values kept by a training-mode forward pass.
pub struct Tape {
    batch: usize,
    caches: Vec<Cache>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    params: Vec<Param>,
    /// Batch-norm running statistics; saved but not trained.
    buffers: Vec<Param>,
    layers: Vec<Layer>,
}

impl PartialEq for Encoder {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.buffers == other.buffers
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

impl Encoder {
    /// Glorot-uniform weights, zero biases, deterministic per seed.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut layers = Vec::new();
        let k = config.kernel_size;

        let mut in_c = 1;
        let mut len = config.input_dim;
        for block in 0..BLOCKS {
            let out_c = config.channels[block];
            for conv in 1..=2 {
                let c_in = if conv == 1 { in_c } else { out_c };
                let prefix = format!("block{}.conv{conv}", block + 1);
                params.push(Param::new(
                    format!("{prefix}.weight"),
                    vec![out_c, c_in, k],
                    glorot(&mut rng, c_in * k, out_c * k, out_c * c_in * k),
                ));
                params.push(Param::new(format!("{prefix}.bias"), vec![out_c], vec![0.0; out_c]));
                layers.push(Layer::Conv {
                    weight: params.len() - 2,
                    bias: params.len() - 1,
                    in_c: c_in,
                    out_c,
                    len,
                });
                if config.batch_norm {
                    let prefix = format!("block{}.bn{conv}", block + 1);
                    params.push(Param::new(format!("{prefix}.gamma"), vec![out_c], vec![1.0; out_c]));
                    params.push(Param::new(format!("{prefix}.beta"), vec![out_c], vec![0.0; out_c]));
                    buffers.push(Param::new(format!("{prefix}.running_mean"), vec![out_c], vec![0.0; out_c]));
                    buffers.push(Param::new(format!("{prefix}.running_var"), vec![out_c], vec![1.0; out_c]));
                    layers.push(Layer::Norm {
                        gamma: params.len() - 2,
                        beta: params.len() - 1,
                        mean: buffers.len() - 2,
                        var: buffers.len() - 1,
                        channels: out_c,
                        len,
                    });
                }
                layers.push(Layer::Act(config.activation.for_block(block)));
            }
            layers.push(Layer::Pool { channels: out_c, len });
            if config.dropout > 0.0 {
                layers.push(Layer::Dropout);
            }
            in_c = out_c;
            len = ops::pooled_len(len, config.pool_stride);
        }
        let in_f = in_c * len;
        let out_f = config.embed_dim;
        params.push(Param::new(
            "embed.weight".into(),
            vec![out_f, in_f],
            glorot(&mut rng, in_f, out_f, out_f * in_f),
        ));
        params.push(Param::new("embed.bias".into(), vec![out_f], vec![0.0; out_f]));
        layers.push(Layer::Linear {
            weight: params.len() - 2,
            bias: params.len() - 1,
            in_f,
            out_f,
        });

        Ok(Self {
            config,
            params,
            buffers,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Param] {
        &self.buffers
    }

    /// Trainable tensors in a stable order.
    pub fn parameter_manifest(&self) -> Vec<ParamSpec> {
        self.params.iter().map(Param::spec).collect()
    }

    /// Replaces parameter and buffer values by name; every tensor must be
    /// present with the expected shape.
    pub fn load_tensors<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<(&'a [usize], &'a [f64])>) -> Result<()> {
        for p in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let (shape, values) = lookup(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
            if shape != p.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name, shape, p.shape
                )));
            }
            p.value.copy_from_slice(values);
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::Shape {
                expected: format!("inputs of length {}", self.config.input_dim),
                got: format!("length {}", x.cols()),
            });
        }
        Ok(())
    }

    /// Inference-mode embedding of a batch; rows are processed independently.
    pub fn encode(&self, inputs: &[ModelInput]) -> Result<Matrix> {
        let d = self.config.input_dim;
        if let Some(bad) = inputs.iter().find(|m| m.len() != d) {
            return Err(Error::Shape {
                expected: format!("inputs of length {d}"),
                got: format!("length {}", bad.len()),
            });
        }
        let mut flat = Vec::with_capacity(inputs.len() * d);
        for m in inputs {
            flat.extend_from_slice(m.as_slice());
        }
        self.encode_matrix(&Matrix::from_vec(inputs.len(), d, flat)?)
    }

    pub fn encode_matrix(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let d = self.config.input_dim;
        let chunks: Vec<Vec<f64>> = x
            .as_slice()
            .par_chunks(ENCODE_CHUNK * d)
            .map(|chunk| self.run(chunk.to_vec(), chunk.len() / d, None).0)
            .collect();
        Matrix::from_vec(x.rows(), self.config.embed_dim, chunks.concat())
    }

    /// Training-mode forward pass: batch statistics for normalisation (running
    /// statistics are updated), dropout masks drawn from `rng`.
    pub fn forward_train(&mut self, x: &Matrix, rng: &mut dyn RngCore) -> Result<(Matrix, Tape)> {
        self.check_input(x)?;
        let batch = x.rows();
        let (out, caches, stats) = self.run(x.as_slice().to_vec(), batch, Some(rng));
        for (mean_idx, var_idx, mean, var) in stats {
            let m = ops::BN_MOMENTUM;
            for (r, v) in self.buffers[mean_idx].value.iter_mut().zip(&mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, v) in self.buffers[var_idx].value.iter_mut().zip(&var) {
                *r = (1.0 - m) * *r + m * v;
            }
        }
        let tape = Tape {
            batch,
            caches: caches.expect("training pass records caches"),
        };
        Ok((Matrix::from_vec(batch, self.config.embed_dim, out)?, tape))
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        mut x: Vec<f64>,
        batch: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> (Vec<f64>, Option<Vec<Cache>>, Vec<(usize, usize, Vec<f64>, Vec<f64>)>) {
        let training = rng.is_some();
        let mut caches = training.then(|| Vec::with_capacity(self.layers.len()));
        let mut stats = Vec::new();
        let cfg = &self.config;
        for layer in &self.layers {
            let cache = match *layer {
                Layer::Conv { weight, bias, in_c, out_c, len } => {
                    let shape = ConvShape { batch, in_c, out_c, len, kernel: cfg.kernel_size };
                    let xpad = ops::pad_input(&x, &shape);
                    x = ops::conv_forward(&xpad, &self.params[weight].value, &self.params[bias].value, &shape);
                    Cache::Conv(xpad)
                }
                Layer::Norm { gamma, beta, mean, var, channels, len } => {
                    let (g, b) = (&self.params[gamma].value, &self.params[beta].value);
                    if training {
                        let (y, cache, m, v) = ops::bn_forward_train(&x, g, b, batch, channels, len);
                        stats.push((mean, var, m, v));
                        x = y;
                        Cache::Norm(cache)
                    } else {
                        ops::bn_forward_eval(&mut x, g, b, &self.buffers[mean].value, &self.buffers[var].value, channels, len);
                        continue;
                    }
                }
                Layer::Act(kind) => {
                    let pre = training.then(|| x.clone());
                    ops::act_forward(&mut x, kind);
                    match pre {
                        Some(p) => Cache::Act(p),
                        None => continue,
                    }
                }
                Layer::Pool { channels, len } => {
                    let input_len = x.len();
                    let (y, arg) = ops::pool_forward(&x, batch * channels, len, cfg.pool_size, cfg.pool_stride);
                    x = y;
                    Cache::Pool(arg, input_len)
                }
                Layer::Dropout => {
                    let Some(rng) = rng.as_mut() else { continue };
                    let keep = 1.0 - cfg.dropout;
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    x.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                    Cache::Dropout(mask)
                }
                Layer::Linear { weight, bias, in_f, out_f } => {
                    let y = ops::linear_forward(&x, &self.params[weight].value, &self.params[bias].value, in_f, out_f);
                    Cache::Linear(std::mem::replace(&mut x, y))
                }
            };
            if let Some(c) = caches.as_mut() {
                c.push(cache);
            }
        }
        (x, caches, stats)
    }

    /// Gradients of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the embeddings from [`Self::forward_train`].
    pub fn backward(&self, tape: &Tape, grad_out: &Matrix) -> Result<Vec<Vec<f64>>> {
        if grad_out.rows() != tape.batch || grad_out.cols() != self.config.embed_dim {
            return Err(Error::Shape {
                expected: format!("{}x{}", tape.batch, self.config.embed_dim),
                got: format!("{}x{}", grad_out.rows(), grad_out.cols()),
            });
        }
        let batch = tape.batch;
        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let mut dy = grad_out.as_slice().to_vec();
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            match (layer, cache) {
                (&Layer::Conv { weight, bias, in_c, out_c, len }, Cache::Conv(xpad)) => {
                    let shape = ConvShape { batch, in_c, out_c, len, kernel: self.config.kernel_size };
                    let (gw, gb) = two_mut(&mut grads, weight, bias);
                    match ops::conv_backward(xpad, &self.params[weight].value, &dy, &shape, gw, gb, i > 0) {
                        Some(dx) => dy = dx,
                        None => break,
                    }
                }
                (&Layer::Norm { gamma, beta, channels, len, .. }, Cache::Norm(c)) => {
                    let (gg, gb) = two_mut(&mut grads, gamma, beta);
                    dy = ops::bn_backward(&dy, c, &self.params[gamma].value, batch, channels, len, gg, gb);
                }
                (&Layer::Act(kind), Cache::Act(pre)) => ops::act_backward(&mut dy, pre, kind),
                (Layer::Pool { .. }, Cache::Pool(arg, input_len)) => {
                    dy = ops::pool_backward(&dy, arg, *input_len);
                }
                (Layer::Dropout, Cache::Dropout(mask)) => {
                    dy.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                }
                (&Layer::Linear { weight, bias, in_f, out_f }, Cache::Linear(x)) => {
                    let (gw, gb) = two_mut(&mut grads, weight, bias);
                    dy = ops::linear_backward(x, &self.params[weight].value, &dy, in_f, out_f, gw, gb);
                }
                _ => unreachable!("tape does not match layer plan"),
            }
        }
        Ok(grads)
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
