//! Fully connected network substrate with hand-written backward passes.
//!
//! The encoder maps flattened images to unit-norm embeddings; the classifier
//! head holds unit-norm class centers without bias and produces the angles
//! consumed by [`crate::margin`].

mod checkpoint;
mod fd;

pub use checkpoint::{
    centers_bytes, network_bytes, parse_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};
pub use fd::{fd_oracle, max_rel_error};

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LatseError, Result};
use crate::margin::AngleBatch;
use crate::rng;

/// Cosines are clamped to `[−1 + ε, 1 − ε]` before `arccos`.
pub const COS_CLAMP_EPS: f64 = 1e-7;

/// Pre-normalization lengths below this are treated as a zero vector.
pub const MIN_EMBEDDING_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu,
    Sigmoid,
}

impl Activation {
    pub(crate) fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::LeakyRelu => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::LeakyRelu),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

/// Layer widths and activations; fully determines every parameter shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    /// Input width, hidden widths, output width.
    pub dims: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    pub leaky_slope: f64,
}

impl Topology {
    /// Encoder: `input → hidden… → embedding`, leaky hidden units, linear output.
    pub fn encoder(input: usize, hidden: &[usize], embedding: usize) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(embedding);
        Self {
            dims,
            hidden: Activation::LeakyRelu,
            output: Activation::Identity,
            leaky_slope: 0.01,
        }
    }

    /// Decoder: `embedding → hidden… → pixels`, sigmoid output.
    pub fn decoder(embedding: usize, hidden: &[usize], pixels: usize) -> Self {
        Self {
            output: Activation::Sigmoid,
            ..Self::encoder(embedding, hidden, pixels)
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("topology has at least two dims")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(LatseError::Shape(format!(
                "topology needs at least two positive dims, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// One affine layer `y = x·W + b`, `W` stored input-major (in × out).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub topology: Topology,
    pub layers: Vec<Dense>,
}

/// Gradients with the same layout as [`NetParams::layers`].
pub type NetGrads = Vec<Dense>;

/// Activations retained from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input of layer `l`; the last entry is the network output.
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activation values per layer.
    pub pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.inputs.last().expect("forward cache is never empty")
    }
}

fn apply_activation(act: Activation, slope: f64, z: &Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Identity => z.clone(),
        Activation::LeakyRelu => z.mapv(|v| if v > 0.0 { v } else { slope * v }),
        Activation::Sigmoid => z.mapv(|v| 1.0 / (1.0 + (-v).exp())),
    }
}

impl NetParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(topology: Topology, seed: u64) -> Result<Self> {
        topology.validate()?;
        let mut rng = rng::rng(seed);
        let layers = topology
            .dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-bound..bound));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { topology, layers })
    }

    pub fn zeros(topology: Topology) -> Result<Self> {
        topology.validate()?;
        let layers = topology
            .dims
            .windows(2)
            .map(|w| Dense {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(Self { topology, layers })
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.topology.output
        } else {
            self.topology.hidden
        }
    }

    pub fn forward(&self, input: &Array2<f64>) -> Result<ForwardCache> {
        if input.ncols() != self.topology.input_dim() {
            return Err(LatseError::Shape(format!(
                "network expects {} inputs, got {}",
                self.topology.input_dim(),
                input.ncols()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut pre = Vec::with_capacity(self.layers.len());
        inputs.push(input.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = inputs[l].dot(&layer.weight);
            z += &layer.bias;
            let a = apply_activation(self.activation_of(l), self.topology.leaky_slope, &z);
            pre.push(z);
            inputs.push(a);
        }
        Ok(ForwardCache { inputs, pre })
    }

    /// Backpropagates `grad_output` (∂L/∂output). Returns parameter gradients
    /// and, when `want_input_grad`, ∂L/∂input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &Array2<f64>,
        want_input_grad: bool,
    ) -> (NetGrads, Option<Array2<f64>>) {
        let slope = self.topology.leaky_slope;
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_output.clone();
        for l in (0..self.layers.len()).rev() {
            let dz = match self.activation_of(l) {
                Activation::Identity => upstream,
                Activation::LeakyRelu => {
                    Zip::from(&mut upstream).and(&cache.pre[l]).for_each(|g, &z| {
                        if z <= 0.0 {
                            *g *= slope;
                        }
                    });
                    upstream
                }
                Activation::Sigmoid => {
                    Zip::from(&mut upstream)
                        .and(&cache.inputs[l + 1])
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    upstream
                }
            };
            let weight = cache.inputs[l].t().dot(&dz);
            let bias = dz.sum_axis(Axis(0));
            grads.push(Dense { weight, bias });
            upstream = if l > 0 || want_input_grad {
                dz.dot(&self.layers[l].weight.t())
            } else {
                Array2::zeros((0, 0))
            };
        }
        grads.reverse();
        let input_grad = want_input_grad.then_some(upstream);
        (grads, input_grad)
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.topology.num_params());
        for layer in &self.layers {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.topology.num_params() {
            return Err(LatseError::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.topology.num_params()
            )));
        }
        let mut it = flat.iter();
        for layer in &mut self.layers {
            layer
                .weight
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .for_each(|p| *p = *it.next().expect("length checked"));
        }
        Ok(())
    }
}

pub fn flatten_grads(grads: &NetGrads) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.weight.iter().chain(g.bias.iter()).copied())
        .collect()
}

/// Unit-norm embeddings plus the lengths they had before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub vectors: Array2<f64>,
    pub pre_norm_lengths: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Row-normalizes `raw`, failing on (near) zero rows.
    pub fn normalize(raw: &Array2<f64>) -> Result<Self> {
        let mut vectors = raw.clone();
        let mut lengths = Vec::with_capacity(raw.nrows());
        for (row, mut v) in vectors.rows_mut().into_iter().enumerate() {
            let length = v.dot(&v).sqrt();
            if !(length > MIN_EMBEDDING_NORM) {
                return Err(LatseError::DegenerateEmbedding { row, length });
            }
            v.mapv_inplace(|x| x / length);
            lengths.push(length);
        }
        Ok(Self {
            vectors,
            pre_norm_lengths: lengths,
        })
    }

    /// Pulls ∂L/∂(unit vector) back to ∂L/∂(raw vector):
    /// `(g − x·(x·g)) / ‖r‖`.
    pub fn normalize_backward(&self, grad: &Array2<f64>) -> Array2<f64> {
        let mut out = grad.clone();
        for ((mut g, x), &len) in out
            .rows_mut()
            .into_iter()
            .zip(self.vectors.rows())
            .zip(&self.pre_norm_lengths)
        {
            let proj = x.dot(&g);
            Zip::from(&mut g).and(&x).for_each(|gi, &xi| *gi = (*gi - xi * proj) / len);
        }
        out
    }
}

/// Forward state of an encoder call, needed by [`encoder_backward`].
#[derive(Debug, Clone)]
pub struct EncodeCache {
    pub net: ForwardCache,
}

fn check_images(images: &Array2<f64>) -> Result<()> {
    if let Some(&bad) = images.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(LatseError::Shape(format!(
            "pixel value {bad} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Encodes a batch of flattened images (N × H·W) into unit-norm embeddings.
pub fn encode(params: &NetParams, images: &Array2<f64>) -> Result<(EmbeddingBatch, EncodeCache)> {
    check_images(images)?;
    let net = params.forward(images)?;
    let emb = EmbeddingBatch::normalize(net.output())?;
    Ok((emb, EncodeCache { net }))
}

/// Encoder gradients given ∂L/∂(unit embedding).
pub fn encoder_backward(
    params: &NetParams,
    emb: &EmbeddingBatch,
    cache: &EncodeCache,
    grad_embedding: &Array2<f64>,
) -> NetGrads {
    let grad_raw = emb.normalize_backward(grad_embedding);
    params.backward(&cache.net, &grad_raw, false).0
}

/// Unit-norm class centers, K × d, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    pub centers: Array2<f64>,
}

impl ClassifierWeights {
    /// Gaussian-free init: uniform entries, then row normalization.
    pub fn init(num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = rng::rng(seed);
        let centers = Array2::from_shape_simple_fn((num_classes, dim), || rng.gen_range(-1.0..1.0));
        let mut w = Self { centers };
        w.renormalize();
        w
    }

    pub fn num_classes(&self) -> usize {
        self.centers.nrows()
    }

    pub fn renormalize(&mut self) {
        for mut row in self.centers.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
        }
    }
}

/// Cosines and angles between each embedding and each center.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// Raw dot products `x_i · W_j`.
    pub cosines: Array2<f64>,
    /// `arccos` of the clamped cosines, in `[0, π]`.
    pub angles: Array2<f64>,
}

pub fn head_forward(emb: &EmbeddingBatch, weights: &ClassifierWeights) -> Result<HeadOutput> {
    if emb.dim() != weights.centers.ncols() {
        return Err(LatseError::Shape(format!(
            "embedding dim {} vs center dim {}",
            emb.dim(),
            weights.centers.ncols()
        )));
    }
    let cosines = emb.vectors.dot(&weights.centers.t());
    let lo = -1.0 + COS_CLAMP_EPS;
    let hi = 1.0 - COS_CLAMP_EPS;
    let angles = cosines.mapv(|c| c.clamp(lo, hi).acos());
    Ok(HeadOutput { cosines, angles })
}

/// Angle batch for the given labels.
pub fn cos_angles(
    emb: &EmbeddingBatch,
    weights: &ClassifierWeights,
    targets: &[usize],
) -> Result<AngleBatch> {
    AngleBatch::new(head_forward(emb, weights)?.angles, targets.to_vec())
}

/// Chain rule through `θ = arccos(clamp(x·W))`; returns (∂L/∂x, ∂L/∂W).
pub fn head_backward(
    emb: &EmbeddingBatch,
    weights: &ClassifierWeights,
    head: &HeadOutput,
    grad_theta: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let lo = -1.0 + COS_CLAMP_EPS;
    let hi = 1.0 - COS_CLAMP_EPS;
    let mut grad_cos = grad_theta.clone();
    Zip::from(&mut grad_cos).and(&head.cosines).for_each(|g, &c| {
        // clamp is flat outside its range
        *g = if c > lo && c < hi {
            -*g / (1.0 - c * c).sqrt()
        } else {
            0.0
        };
    });
    let grad_x = grad_cos.dot(&weights.centers);
    let grad_w = grad_cos.t().dot(&emb.vectors);
    (grad_x, grad_w)
}

/// Gradients of an encoder + head composition.
#[derive(Debug, Clone)]
pub struct EncoderHeadGrads {
    pub encoder: NetGrads,
    pub centers: Array2<f64>,
    /// ∂L/∂(unit embedding) from the head alone.
    pub embedding: Array2<f64>,
}

/// Full backward from angle gradients to encoder and classifier parameters.
pub fn backward(
    params: &NetParams,
    weights: &ClassifierWeights,
    emb: &EmbeddingBatch,
    cache: &EncodeCache,
    head: &HeadOutput,
    grad_theta: &Array2<f64>,
) -> EncoderHeadGrads {
    let (grad_x, grad_w) = head_backward(emb, weights, head, grad_theta);
    let encoder = encoder_backward(params, emb, cache, &grad_x);
    EncoderHeadGrads {
        encoder,
        centers: grad_w,
        embedding: grad_x,
    }
}
