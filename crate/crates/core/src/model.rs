//! Encoder/decoder with a class-split latent space.
//!
//! The encoder is five 3x3 convolutions (stride 1, then four of stride 2),
//! each followed by ReLU, giving `L` latent maps at 1/16 of the input
//! resolution. The first `L/2` maps form the "real" half `h0`, the rest the
//! "fake" half `h1`. The decoder mirrors the encoder with nearest-neighbour
//! upsampling before each of its first four convolutions and a `tanh` output.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{config, contract, Error, Result};
use crate::optim::Param;
use crate::tensor::Tensor;

const DEPTH: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Real = 0,
    Fake = 1,
}

impl ClassLabel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Real => "real",
            ClassLabel::Fake => "fake",
        }
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_channels: usize,
    /// Square input side; must be divisible by 16.
    pub input_size: usize,
    /// Total latent maps `L`; each class owns `L / 2`.
    pub latent_maps: usize,
    /// Output channels of the five encoder layers; the last equals `L`.
    pub encoder_channels: Vec<usize>,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::with_latent(128)
    }
}

impl ArchConfig {
    /// Default desk-scale layout `[16, 32, 64, L, L]` for 64x64 RGB inputs.
    pub fn with_latent(latent_maps: usize) -> Self {
        Self {
            input_channels: 3,
            input_size: 64,
            latent_maps,
            encoder_channels: vec![16, 32, 64, latent_maps, latent_maps],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(config("input_channels must be positive"));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(config(format!(
                "input_size {} is not a positive multiple of 16",
                self.input_size
            )));
        }
        if self.latent_maps < 2 || self.latent_maps % 2 != 0 {
            return Err(config(format!(
                "latent_maps {} must be even and at least 2",
                self.latent_maps
            )));
        }
        if self.encoder_channels.len() != DEPTH {
            return Err(config(format!(
                "expected {DEPTH} encoder channel counts, got {}",
                self.encoder_channels.len()
            )));
        }
        if self.encoder_channels.contains(&0) {
            return Err(config("encoder channel counts must be positive"));
        }
        if self.encoder_channels[DEPTH - 1] != self.latent_maps {
            return Err(config(format!(
                "last encoder layer has {} maps but latent_maps is {}",
                self.encoder_channels[DEPTH - 1],
                self.latent_maps
            )));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.latent_maps / 2
    }

    pub fn latent_size(&self) -> usize {
        self.input_size / 16
    }

    /// `(name, cout, cin, stride)` for every layer, encoder first.
    pub(crate) fn layer_plan(&self) -> Vec<(String, usize, usize, usize)> {
        let enc = &self.encoder_channels;
        let mut plan = Vec::with_capacity(2 * DEPTH);
        let mut cin = self.input_channels;
        for (i, &cout) in enc.iter().enumerate() {
            plan.push((format!("enc{}", i + 1), cout, cin, if i == 0 { 1 } else { 2 }));
            cin = cout;
        }
        // Mirror: decoder layer k undoes encoder layer DEPTH + 1 - k.
        for k in 0..DEPTH {
            let cout = if k + 1 < DEPTH {
                enc[DEPTH - 2 - k]
            } else {
                self.input_channels
            };
            plan.push((format!("dec{}", k + 1), cout, cin, 1));
            cin = cout;
        }
        plan
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

/// All learnable tensors of the network, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub layers: Vec<Layer>,
}

/// He-uniform weights (`bound = sqrt(6 / fan_in)`) and zero biases, drawn
/// layer by layer from a ChaCha stream seeded with `cfg.seed`.
pub fn init_model(cfg: &ArchConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = cfg
        .layer_plan()
        .into_iter()
        .map(|(name, cout, cin, stride)| {
            let fan_in = cin * 9;
            let bound = (6.0 / fan_in as f32).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w: Vec<f32> = (0..cout * fan_in).map(|_| dist.sample(&mut rng)).collect();
            Layer {
                name,
                weight: Param::new(Tensor::new(vec![cout, cin, 3, 3], w).expect("weight shape")),
                bias: Param::new(Tensor::zeros(&[cout])),
                stride,
            }
        })
        .collect();
    Ok(ModelParams {
        arch: cfg.clone(),
        layers,
    })
}

impl ModelParams {
    pub fn encoder(&self) -> &[Layer] {
        &self.layers[..DEPTH]
    }

    pub fn decoder(&self) -> &[Layer] {
        &self.layers[DEPTH..]
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_parameters(&self) -> usize {
        self.params().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(Param::zero_grad);
    }

    /// Checks that the stored tensors have the shapes `arch` implies.
    pub fn check_shapes(&self) -> Result<()> {
        self.arch.validate()?;
        let plan = self.arch.layer_plan();
        if plan.len() != self.layers.len() {
            return Err(contract(format!(
                "expected {} layers, found {}",
                plan.len(),
                self.layers.len()
            )));
        }
        for ((name, cout, cin, _), layer) in plan.iter().zip(&self.layers) {
            if layer.weight.value.shape() != [*cout, *cin, 3, 3]
                || layer.bias.value.shape() != [*cout]
            {
                return Err(contract(format!("layer {name} has inconsistent shapes")));
            }
        }
        Ok(())
    }

    /// Fails unless `other` describes the same network geometry.
    pub fn ensure_arch(&self, other: &ArchConfig) -> Result<()> {
        let a = &self.arch;
        if a.input_channels != other.input_channels
            || a.input_size != other.input_size
            || a.latent_maps != other.latent_maps
            || a.encoder_channels != other.encoder_channels
        {
            return Err(Error::ArchMismatch {
                expected: describe(other),
                found: describe(a),
            });
        }
        Ok(())
    }

    /// Fails unless images of `channels` x `size` x `size` fit the encoder.
    pub fn ensure_arch_input(&self, channels: usize, size: usize) -> Result<()> {
        if channels != self.arch.input_channels || size != self.arch.input_size {
            return Err(config(format!(
                "data is {channels}x{size}x{size} but the model expects {}x{1}x{1}",
                self.arch.input_channels, self.arch.input_size
            )));
        }
        Ok(())
    }

    /// Records every parameter on `graph` as a trainable (or frozen) leaf.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundModel {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                (
                    graph.leaf(l.weight.value.clone(), trainable),
                    graph.leaf(l.bias.value.clone(), trainable),
                    l.stride,
                )
            })
            .collect();
        BoundModel {
            vars,
            half: self.arch.half(),
            input_channels: self.arch.input_channels,
            input_size: self.arch.input_size,
        }
    }

    /// Adds the gradients a backward pass left on `bound`'s leaves.
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &BoundModel) -> Result<()> {
        for (layer, &(w, b, _)) in self.layers.iter_mut().zip(&bound.vars) {
            if let Some(g) = graph.grad(w) {
                layer.weight.accumulate(g)?;
            }
            if let Some(g) = graph.grad(b) {
                layer.bias.accumulate(g)?;
            }
        }
        Ok(())
    }
}

fn describe(a: &ArchConfig) -> String {
    format!(
        "{}x{}x{} input, L={}, encoder {:?}",
        a.input_channels, a.input_size, a.input_size, a.latent_maps, a.encoder_channels
    )
}

/// Model parameters recorded on a particular graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    vars: Vec<(Var, Var, usize)>,
    half: usize,
    input_channels: usize,
    input_size: usize,
}

/// Batched latent code on a graph: `[N, L, S, S]` with `h0` in the first
/// `L / 2` channels.
#[derive(Clone, Copy, Debug)]
pub struct LatentVar {
    pub code: Var,
    pub half: usize,
}

impl BoundModel {
    /// Graph variable of parameter tensor `index` in declaration order
    /// (weights at even, biases at odd positions).
    pub fn param_var(&self, index: usize) -> Var {
        let (w, b, _) = self.vars[index / 2];
        if index % 2 == 0 {
            w
        } else {
            b
        }
    }

    pub fn encode(&self, graph: &mut Graph, x: Var) -> Result<LatentVar> {
        let s = graph.value(x).shape();
        if s.len() != 4 || s[1] != self.input_channels || s[2] != self.input_size || s[3] != self.input_size
        {
            return Err(contract(format!(
                "encoder expects [N, {}, {}, {}], got {s:?}",
                self.input_channels, self.input_size, self.input_size
            )));
        }
        let mut h = x;
        for &(w, b, stride) in &self.vars[..DEPTH] {
            let y = graph.conv2d(h, w, b, stride)?;
            h = graph.relu(y);
        }
        Ok(LatentVar {
            code: h,
            half: self.half,
        })
    }

    pub fn decode(&self, graph: &mut Graph, z: Var) -> Result<Var> {
        let mut h = z;
        for (k, &(w, b, stride)) in self.vars[DEPTH..].iter().enumerate() {
            if k + 1 < DEPTH {
                debug_assert_eq!(stride, 1);
                let y = graph.upsample_conv2d(h, w, b)?;
                h = graph.relu(y);
            } else {
                let y = graph.conv2d(h, w, b, stride)?;
                h = graph.tanh(y);
            }
        }
        Ok(h)
    }
}

/// Keeps each sample's own class half of the latent code and zeroes the other.
pub fn select(graph: &mut Graph, latent: LatentVar, labels: &[ClassLabel]) -> Result<Var> {
    let keep = labels
        .iter()
        .map(|l| (l.index() * latent.half, latent.half))
        .collect();
    graph.mask_channels(latent.code, keep)
}

/// Per-sample class activations `(a0, a1)`, each `[N]`: the mean absolute
/// value over every element of the corresponding latent half.
pub fn activations(graph: &mut Graph, latent: LatentVar) -> Result<(Var, Var)> {
    let a0 = graph.channel_mean_abs(latent.code, 0, latent.half)?;
    let a1 = graph.channel_mean_abs(latent.code, latent.half, latent.half)?;
    Ok((a0, a1))
}

/// Latent code of one sample, split into its class halves.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    /// `[L/2, S, S]`, responds to real images.
    pub h0: Tensor,
    /// `[L/2, S, S]`, responds to manipulated images.
    pub h1: Tensor,
}

impl LatentCode {
    /// Splits sample `index` of a batched `[N, L, S, S]` code.
    pub fn from_batch(code: &Tensor, index: usize) -> Result<Self> {
        let sample = code.sample(index)?;
        let s = sample.shape().to_vec();
        if s.len() != 3 || s[0] % 2 != 0 {
            return Err(contract(format!("latent code must be [L, S, S] with even L, got {s:?}")));
        }
        let half = s[0] / 2;
        let split = half * s[1] * s[2];
        let data = sample.into_data();
        Ok(Self {
            h0: Tensor::new(vec![half, s[1], s[2]], data[..split].to_vec())?,
            h1: Tensor::new(vec![half, s[1], s[2]], data[split..].to_vec())?,
        })
    }

    pub fn activations(&self) -> (f32, f32) {
        let mean_abs =
            |t: &Tensor| t.data().iter().map(|v| v.abs()).sum::<f32>() / t.numel() as f32;
        (mean_abs(&self.h0), mean_abs(&self.h1))
    }

    /// `concat(h0, 0)` for real, `concat(0, h1)` for fake: `[L, S, S]`.
    pub fn select(&self, label: ClassLabel) -> Tensor {
        let zeros = vec![0.0; self.h0.numel()];
        let (first, second) = match label {
            ClassLabel::Real => (self.h0.data(), &zeros[..]),
            ClassLabel::Fake => (&zeros[..], self.h1.data()),
        };
        let mut shape = self.h0.shape().to_vec();
        shape[0] *= 2;
        Tensor::new(shape, [first, second].concat()).expect("latent shape")
    }

    pub fn scaled(&self, alpha: f32) -> Self {
        Self {
            h0: self.h0.map(|v| alpha * v),
            h1: self.h1.map(|v| alpha * v),
        }
    }
}

/// Forward-only encoding of a preprocessed `[N, C, H, W]` batch.
pub fn encode_batch(model: &ModelParams, inputs: &Tensor) -> Result<Vec<LatentCode>> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let x = g.constant(inputs.clone());
    let latent = bound.encode(&mut g, x)?;
    let code = g.value(latent.code);
    (0..code.shape()[0])
        .map(|i| LatentCode::from_batch(code, i))
        .collect()
}

/// Forward-only decoding of a `[N, L, S, S]` latent batch.
pub fn decode_batch(model: &ModelParams, latent: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let z = g.constant(latent.clone());
    let out = bound.decode(&mut g, z)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests;
