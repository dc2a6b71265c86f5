//! The accent embedding network and its two heads.
//!
//! The trunk maps a `T × F` feature sequence to a unit-norm embedding:
//! a stack of frame layers (context splice, dense, activation), mean and
//! standard-deviation pooling over time, dense segment layers, a final
//! linear projection to `D` dimensions and L2 normalization. The CE head is
//! one dense layer from the embedding to `C` accent logits. The speaker head
//! sits behind a gradient-reversal node and predicts one of `S` speakers.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::SimilarityParams;
use crate::numerics::{softmax_rows, Graph, NumericsError, Tensor, Var};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum NetworkError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// One spliced frame layer: `Context(offsets)` followed by a dense layer
/// of `width` units and the activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLayer {
    pub offsets: Vec<i64>,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature dimension `F`.
    pub input_dim: usize,
    pub frame_layers: Vec<FrameLayer>,
    /// Dense layers (with activation) between pooling and the embedding.
    pub segment_widths: Vec<usize>,
    /// `D`
    pub embedding_dim: usize,
    /// `C`
    pub num_accents: usize,
    /// `S`
    pub num_speakers: usize,
    /// Hidden widths of the speaker head before its `S`-way output.
    pub speaker_head_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Added to each pooled variance before the square root.
    pub var_epsilon: f64,
}

impl ModelConfig {
    /// Splices (-2..2), (-2,0,2), (-3,0,3) at width 128, one 128-unit
    /// segment layer, `D = 64`, a 64-unit speaker head.
    pub fn standard(input_dim: usize, num_accents: usize, num_speakers: usize) -> Self {
        Self {
            input_dim,
            frame_layers: vec![
                FrameLayer { offsets: vec![-2, -1, 0, 1, 2], width: 128 },
                FrameLayer { offsets: vec![-2, 0, 2], width: 128 },
                FrameLayer { offsets: vec![-3, 0, 3], width: 128 },
            ],
            segment_widths: vec![128],
            embedding_dim: 64,
            num_accents,
            num_speakers,
            speaker_head_widths: vec![64],
            activation: Activation::Relu,
            var_epsilon: 1e-10,
        }
    }

    /// Same topology as [`ModelConfig::standard`] at a quarter of the width.
    pub fn compact(input_dim: usize, num_accents: usize, num_speakers: usize) -> Self {
        let mut config = Self::standard(input_dim, num_accents, num_speakers);
        config.frame_layers.iter_mut().for_each(|l| l.width = 32);
        config.segment_widths = vec![32];
        config.embedding_dim = 16;
        config.speaker_head_widths = vec![32];
        config
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let fail = |m: String| Err(NetworkError::Config(m));
        if self.input_dim == 0 {
            return fail("input_dim must be positive".into());
        }
        if self.embedding_dim < 2 {
            return fail(format!("embedding_dim must be >= 2, got {}", self.embedding_dim));
        }
        if self.num_accents < 2 {
            return fail(format!("num_accents must be >= 2, got {}", self.num_accents));
        }
        if self.num_speakers == 0 {
            return fail("num_speakers must be positive".into());
        }
        for (i, layer) in self.frame_layers.iter().enumerate() {
            if layer.offsets.is_empty() || layer.width == 0 {
                return fail(format!("frame layer {i} needs offsets and a positive width"));
            }
            if layer.offsets.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("frame layer {i} offsets must be strictly increasing"));
            }
        }
        if self.segment_widths.iter().chain(&self.speaker_head_widths).any(|&w| w == 0) {
            return fail("layer widths must be positive".into());
        }
        if !(self.var_epsilon >= 0.0) {
            return fail("var_epsilon must be non-negative".into());
        }
        Ok(())
    }

    /// Frames the trunk reaches into the future, summed over frame layers.
    pub fn context_reach(&self) -> usize {
        self.frame_layers
            .iter()
            .map(|l| l.offsets.iter().copied().max().unwrap_or(0).max(0) as usize)
            .sum()
    }
}

/// Weight `[in, out]` and bias `[out]` of a dense layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Uniform weights in `±1/sqrt(fan_in)`, zero bias.
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("dense shape"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn zeros_like(&self) -> Self {
        Self { weight: Tensor::zeros(self.weight.shape()), bias: Tensor::zeros(self.bias.shape()) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderParams {
    pub frame: Vec<Dense>,
    pub segment: Vec<Dense>,
    pub embedding: Dense,
    pub ce_head: Dense,
    pub speaker_head: Vec<Dense>,
}

impl EmbedderParams {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut width = config.input_dim;
        let mut frame = Vec::new();
        for layer in &config.frame_layers {
            frame.push(Dense::init(&mut rng, width * layer.offsets.len(), layer.width));
            width = layer.width;
        }
        width *= 2;
        let mut segment = Vec::new();
        for &w in &config.segment_widths {
            segment.push(Dense::init(&mut rng, width, w));
            width = w;
        }
        let embedding = Dense::init(&mut rng, width, config.embedding_dim);
        let ce_head = Dense::init(&mut rng, config.embedding_dim, config.num_accents);
        let mut speaker_head = Vec::new();
        let mut width = config.embedding_dim;
        for &w in &config.speaker_head_widths {
            speaker_head.push(Dense::init(&mut rng, width, w));
            width = w;
        }
        speaker_head.push(Dense::init(&mut rng, width, config.num_speakers));
        Ok(Self { frame, segment, embedding, ce_head, speaker_head })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            frame: self.frame.iter().map(Dense::zeros_like).collect(),
            segment: self.segment.iter().map(Dense::zeros_like).collect(),
            embedding: self.embedding.zeros_like(),
            ce_head: self.ce_head.zeros_like(),
            speaker_head: self.speaker_head.iter().map(Dense::zeros_like).collect(),
        }
    }

    fn layers(&self) -> Vec<(String, &Dense)> {
        let mut out = Vec::new();
        out.extend(self.frame.iter().enumerate().map(|(i, d)| (format!("frame.{i}"), d)));
        out.extend(self.segment.iter().enumerate().map(|(i, d)| (format!("segment.{i}"), d)));
        out.push(("embedding".to_string(), &self.embedding));
        out.push(("ce_head".to_string(), &self.ce_head));
        out.extend(self.speaker_head.iter().enumerate().map(|(i, d)| (format!("speaker_head.{i}"), d)));
        out
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, d)| [(format!("{name}.weight"), &d.weight), (format!("{name}.bias"), &d.bias)])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    /// Same order as [`EmbedderParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let dense = self
            .frame
            .iter_mut()
            .chain(self.segment.iter_mut())
            .chain(std::iter::once(&mut self.embedding))
            .chain(std::iter::once(&mut self.ce_head))
            .chain(self.speaker_head.iter_mut());
        for d in dense {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn trunk_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for d in self.frame.iter_mut().chain(self.segment.iter_mut()).chain(std::iter::once(&mut self.embedding)) {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// Graph handles of one dense layer.
#[derive(Clone, Copy, Debug)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

impl BoundDense {
    pub fn bind(g: &mut Graph, dense: &Dense) -> Self {
        Self { weight: g.leaf(dense.weight.clone()), bias: g.leaf(dense.bias.clone()) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, NumericsError> {
        let h = g.matmul(x, self.weight)?;
        g.add_row_bias(h, self.bias)
    }

    fn add_grads(&self, g: &Graph, into: &mut Dense) {
        into.weight.add_assign(g.grad(self.weight));
        into.bias.add_assign(g.grad(self.bias));
    }
}

#[derive(Clone, Debug)]
pub struct BoundTrunk {
    pub frame: Vec<BoundDense>,
    pub segment: Vec<BoundDense>,
    pub embedding: BoundDense,
}

impl BoundTrunk {
    pub fn bind(g: &mut Graph, params: &EmbedderParams) -> Self {
        Self {
            frame: params.frame.iter().map(|d| BoundDense::bind(g, d)).collect(),
            segment: params.segment.iter().map(|d| BoundDense::bind(g, d)).collect(),
            embedding: BoundDense::bind(g, &params.embedding),
        }
    }

    /// Adds this graph's trunk gradients into `into`.
    pub fn add_grads(&self, g: &Graph, into: &mut EmbedderParams) {
        for (b, d) in self.frame.iter().zip(&mut into.frame) {
            b.add_grads(g, d);
        }
        for (b, d) in self.segment.iter().zip(&mut into.segment) {
            b.add_grads(g, d);
        }
        self.embedding.add_grads(g, &mut into.embedding);
    }
}

#[derive(Clone, Debug)]
pub struct BoundSpeakerHead {
    pub layers: Vec<BoundDense>,
}

impl BoundSpeakerHead {
    pub fn bind(g: &mut Graph, params: &EmbedderParams) -> Self {
        Self { layers: params.speaker_head.iter().map(|d| BoundDense::bind(g, d)).collect() }
    }

    pub fn add_grads(&self, g: &Graph, into: &mut EmbedderParams) {
        for (b, d) in self.layers.iter().zip(&mut into.speaker_head) {
            b.add_grads(g, d);
        }
    }
}

fn activate(g: &mut Graph, x: Var, activation: Activation) -> Var {
    match activation {
        Activation::Relu => g.relu(x),
        Activation::Tanh => g.tanh(x),
    }
}

/// Trunk forward pass: `[T, F]` features to a `[1, D]` unit-norm embedding.
pub fn embed_node(g: &mut Graph, x: Var, trunk: &BoundTrunk, config: &ModelConfig) -> Result<Var, NetworkError> {
    let mut h = x;
    for (layer, dense) in config.frame_layers.iter().zip(&trunk.frame) {
        h = g.splice(h, &layer.offsets)?;
        h = dense.forward(g, h)?;
        h = activate(g, h, config.activation);
    }
    h = g.mean_std(h, config.var_epsilon);
    for dense in &trunk.segment {
        h = dense.forward(g, h)?;
        h = activate(g, h, config.activation);
    }
    h = trunk.embedding.forward(g, h)?;
    Ok(g.normalize_rows(h)?)
}

/// Speaker logits for embedding rows, optionally behind gradient reversal.
pub fn speaker_logits_node(
    g: &mut Graph,
    embeddings: Var,
    head: &BoundSpeakerHead,
    activation: Activation,
    reverse: bool,
) -> Result<Var, NetworkError> {
    let mut h = if reverse { g.reverse_gradient(embeddings) } else { embeddings };
    let last = head.layers.len() - 1;
    for (i, dense) in head.layers.iter().enumerate() {
        h = dense.forward(g, h)?;
        if i < last {
            h = activate(g, h, activation);
        }
    }
    Ok(h)
}

/// Network parameters plus the similarity scale and bias they are trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: EmbedderParams,
    pub similarity: SimilarityParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NetworkError> {
        let params = EmbedderParams::init(&config, seed)?;
        Ok(Self { config, params, similarity: SimilarityParams::default() })
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NetworkError> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(NetworkError::Config(format!(
                "expected [T, {}] features, got {:?}",
                self.config.input_dim,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Unit-norm embedding `[D]` of a `[T, F]` feature matrix.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let trunk = BoundTrunk::bind(&mut g, &self.params);
        let xv = g.leaf(x.clone());
        let a = embed_node(&mut g, xv, &trunk, &self.config)?;
        Ok(Tensor::vector(g.value(a).data().to_vec()))
    }

    /// Accent logits `[C]` from the CE head.
    pub fn ce_logits(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        let a = self.embed(x)?;
        let logits = a.reshape(vec![1, self.config.embedding_dim])?.matmul(&self.params.ce_head.weight)?;
        let data = logits.data().iter().zip(self.params.ce_head.bias.data()).map(|(l, b)| l + b).collect();
        Ok(Tensor::vector(data))
    }

    /// Accent probabilities `[C]`.
    pub fn ce_head(&self, x: &Tensor) -> Result<Tensor, NetworkError> {
        Ok(softmax_rows(&self.ce_logits(x)?))
    }

    /// Speaker probabilities `[S]` for an embedding `[D]`.
    pub fn speaker_head(&self, a: &Tensor) -> Result<Tensor, NetworkError> {
        if a.len() != self.config.embedding_dim {
            return Err(NetworkError::Config(format!(
                "expected embedding of {} values, got {}",
                self.config.embedding_dim,
                a.len()
            )));
        }
        let mut g = Graph::new();
        let head = BoundSpeakerHead::bind(&mut g, &self.params);
        let av = g.leaf(a.clone().reshape(vec![1, a.len()])?);
        let logits = speaker_logits_node(&mut g, av, &head, self.config.activation, true)?;
        Ok(Tensor::vector(softmax_rows(g.value(logits)).into_data()))
    }
}

/// `Context(offsets)` applied to a `[T, F]` matrix.
pub fn context_splice(x: &Tensor, offsets: &[i64]) -> Result<Tensor, NumericsError> {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = g.splice(v, offsets)?;
    Ok(g.value(out).clone())
}

/// `[means, stds]` of the columns of a `[T, F]` matrix, as a `[2F]` vector.
pub fn cat_mean_std(x: &Tensor, var_epsilon: f64) -> Tensor {
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = g.mean_std(v, var_epsilon);
    Tensor::vector(g.value(out).data().to_vec())
}

/// Forward value of the gradient-reversal layer (the identity).
pub fn grl(x: &Tensor) -> Tensor {
    x.clone()
}
