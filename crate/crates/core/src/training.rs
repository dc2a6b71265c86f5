//! Episodic sampling, Adam with global-norm clipping, and the CE, GE2E and
//! adversarial GE2E training loops.
//!
//! Per-utterance forward and backward passes run on independent graphs
//! (in parallel); their parameter gradients are reduced in utterance order,
//! so results do not depend on the number of worker threads.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::UtteranceRecord;
use crate::losses::{combined_loss_node, ge2e_loss_node, CentroidMode, Ge2eLayout, LossError};
use crate::network::{
    embed_node, speaker_logits_node, BoundDense, BoundSpeakerHead, BoundTrunk, EmbedderParams, Model,
    NetworkError,
};
use crate::numerics::{Graph, NumericsError, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("accent class {0} has no training utterances")]
    EmptyClass(usize),
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },
    #[error("step {step}: {source}")]
    Numeric { step: usize, source: NetworkError },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("observer: {0}")]
    Observer(String),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Network(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Minibatch size of CE training.
    pub batch_size_ce: usize,
    /// Utterances per accent class in a GE2E episode (`M`).
    pub utterances_per_class: usize,
    pub lambda_sc: f64,
    /// Global gradient-norm ceiling for CE training.
    pub clip_ce: f64,
    /// Global gradient-norm ceiling for GE2E training.
    pub clip_ge2e: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub centroid_mode: CentroidMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 100,
            batch_size_ce: 16,
            utterances_per_class: 10,
            lambda_sc: 1e-5,
            clip_ce: 1.0,
            clip_ge2e: 3.0,
            seed: 0,
            adam: AdamConfig::default(),
            centroid_mode: CentroidMode::LeaveOneOut,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate >= 0.0) {
            return fail("learning rate must be non-negative");
        }
        if self.batch_size_ce == 0 {
            return fail("CE batch size must be positive");
        }
        if self.utterances_per_class < 2 {
            return fail("need at least 2 utterances per class");
        }
        if !(self.lambda_sc >= 0.0) {
            return fail("lambda_sc must be non-negative");
        }
        if !(self.clip_ce > 0.0 && self.clip_ge2e > 0.0) {
            return fail("clipping thresholds must be positive");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return fail("Adam betas must be in [0, 1) and epsilon positive");
        }
        Ok(())
    }
}

/// Steps per nominal epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub steps_per_epoch: usize,
}

impl EpochPlan {
    /// `ceil(max_j n_j / M)`: each epoch shows about as many utterances per
    /// class as the largest class holds.
    pub fn nominal(class_counts: &[usize], per_class: usize) -> Self {
        let max = class_counts.iter().copied().max().unwrap_or(0);
        Self { steps_per_epoch: max.div_ceil(per_class).max(1) }
    }

    pub fn minibatches(total: usize, batch_size: usize) -> Self {
        Self { steps_per_epoch: total.div_ceil(batch_size).max(1) }
    }
}

/// Record indices grouped by accent class.
#[derive(Clone, Debug)]
pub struct ClassIndex {
    by_class: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn new(records: &[UtteranceRecord], classes: usize) -> Result<Self, TrainError> {
        let mut by_class = vec![Vec::new(); classes];
        for (i, r) in records.iter().enumerate() {
            by_class
                .get_mut(r.accent)
                .ok_or_else(|| TrainError::Config(format!("accent {} >= C = {classes}", r.accent + 1)))?
                .push(i);
        }
        if let Some(j) = by_class.iter().position(Vec::is_empty) {
            return Err(TrainError::EmptyClass(j + 1));
        }
        Ok(Self { by_class })
    }

    pub fn classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.by_class.iter().map(Vec::len).collect()
    }
}

/// Draws `M` record indices per class, class-major. Classes with at least
/// `M` utterances are sampled without replacement; smaller classes
/// contribute all their utterances and are topped up with replacement.
pub fn episodic_sample(index: &ClassIndex, per_class: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(index.classes() * per_class);
    for members in &index.by_class {
        if members.len() >= per_class {
            out.extend(members.choose_multiple(rng, per_class).copied());
        } else {
            let mut all = members.clone();
            all.shuffle(rng);
            out.extend(&all);
            for _ in members.len()..per_class {
                out.push(members[rng.random_range(0..members.len())]);
            }
        }
    }
    out
}

/// First and second moment estimates for every parameter slice.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = sizes.into_iter().map(|n| vec![0.0; n]).collect();
        Self { v: m.clone(), m, step: 0 }
    }
}

/// One bias-corrected Adam update. Non-finite gradients leave parameters
/// and state untouched.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config("Adam: parameter/gradient/state count mismatch".into()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(TrainError::Config("Adam: slice length mismatch".into()));
        }
    }
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(TrainError::NonFiniteGradient { step: state.step as usize });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipReport {
    pub norm: f64,
    pub post_clip_norm: f64,
}

pub fn global_norm(grads: &[&[f64]]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales all gradients by `max_norm / g` when their global L2 norm `g`
/// exceeds `max_norm`.
pub fn clip_gradients(grads: &mut [&mut [f64]], max_norm: f64) -> ClipReport {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
    }
    let post = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    ClipReport { norm, post_clip_norm: post }
}

/// Gradients for every trainable quantity of a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub params: EmbedderParams,
    pub w: f64,
    pub b: f64,
}

impl ModelGrads {
    pub fn zeros(model: &Model) -> Self {
        Self { params: model.params.zeros_like(), w: 0.0, b: 0.0 }
    }

    /// Same order as [`model_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.params.tensors().into_iter().map(|t| t.data()).collect();
        out.push(std::slice::from_ref(&self.w));
        out.push(std::slice::from_ref(&self.b));
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.params.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
        out.push(std::slice::from_mut(&mut self.w));
        out.push(std::slice::from_mut(&mut self.b));
        out
    }

    pub fn norm(&self) -> f64 {
        global_norm(&self.slices())
    }
}

/// Network tensors followed by the similarity `w` and `b`.
pub fn model_slices_mut(model: &mut Model) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = model.params.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
    out.push(std::slice::from_mut(&mut model.similarity.w));
    out.push(std::slice::from_mut(&mut model.similarity.b));
    out
}

fn model_sizes(model: &Model) -> Vec<usize> {
    let mut sizes: Vec<usize> = model.params.tensors().iter().map(|t| t.len()).collect();
    sizes.extend([1, 1]);
    sizes
}

/// Speaker-classification branch of an episode criterion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpeakerBranch {
    pub lambda: f64,
    /// Route the embeddings through gradient reversal.
    pub reverse: bool,
}

/// What an episode minimizes: optionally the GE2E loss, plus optionally a
/// weighted speaker-classification loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Criterion {
    pub ge2e: bool,
    pub speaker: Option<SpeakerBranch>,
    pub centroid_mode: CentroidMode,
}

impl Criterion {
    pub fn ge2e(centroid_mode: CentroidMode) -> Self {
        Self { ge2e: true, speaker: None, centroid_mode }
    }

    pub fn adversarial(lambda: f64, centroid_mode: CentroidMode) -> Self {
        Self { ge2e: true, speaker: Some(SpeakerBranch { lambda, reverse: true }), centroid_mode }
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    pub loss: f64,
    pub ge2e_loss: Option<f64>,
    pub sc_loss: Option<f64>,
    /// `[C·M, D]` embeddings of the episode.
    pub embeddings: Tensor,
    pub grads: ModelGrads,
}

struct UtteranceGraph {
    graph: Graph,
    trunk: BoundTrunk,
    output: crate::numerics::Var,
}

fn forward_utterances(model: &Model, batch: &[&UtteranceRecord]) -> Result<Vec<UtteranceGraph>, NetworkError> {
    batch
        .par_iter()
        .map(|r| {
            let mut graph = Graph::new();
            let trunk = BoundTrunk::bind(&mut graph, &model.params);
            let x = graph.leaf(r.features.to_tensor());
            let output = embed_node(&mut graph, x, &trunk, &model.config)?;
            Ok(UtteranceGraph { graph, trunk, output })
        })
        .collect()
}

/// Backpropagates one upstream row per utterance and sums the trunk
/// gradients in utterance order.
fn backward_utterances(
    utterances: Vec<UtteranceGraph>,
    upstream: &Tensor,
    into: &mut EmbedderParams,
) -> Result<(), NumericsError> {
    let partials: Vec<EmbedderParams> = utterances
        .into_par_iter()
        .enumerate()
        .map(|(i, mut u)| {
            let seed = Tensor::vector(upstream.row(i).to_vec());
            u.graph.backward_with(u.output, seed)?;
            let mut acc = into.zeros_like();
            u.trunk.add_grads(&u.graph, &mut acc);
            Ok(acc)
        })
        .collect::<Result<_, NumericsError>>()?;
    for p in &partials {
        for (dst, src) in into.tensors_mut().into_iter().zip(p.tensors()) {
            dst.add_assign(src);
        }
    }
    Ok(())
}

fn check_speakers(model: &Model, batch: &[&UtteranceRecord]) -> Result<Vec<usize>, TrainError> {
    batch
        .iter()
        .map(|r| {
            if r.speaker < model.config.num_speakers {
                Ok(r.speaker)
            } else {
                Err(TrainError::Config(format!(
                    "speaker {} >= S = {}",
                    r.speaker + 1,
                    model.config.num_speakers
                )))
            }
        })
        .collect()
}

/// Loss and gradients of one class-major episode of `C·M` utterances.
pub fn episode_gradients(
    model: &Model,
    batch: &[&UtteranceRecord],
    layout: Ge2eLayout,
    criterion: Criterion,
) -> Result<EpisodeOutput, TrainError> {
    if batch.len() != layout.rows() {
        return Err(TrainError::Config(format!("episode of {} for layout {}", batch.len(), layout.rows())));
    }
    let utterances = forward_utterances(model, batch)?;
    let rows: Vec<&[f64]> = utterances.iter().map(|u| u.graph.value(u.output).data()).collect();
    let embeddings = Tensor::from_rows(&rows)?;

    let mut g = Graph::new();
    let emb = g.leaf(embeddings.clone());
    let w = g.leaf(Tensor::scalar(model.similarity.w));
    let b = g.leaf(Tensor::scalar(model.similarity.b));
    let mut grads = ModelGrads::zeros(model);

    let ge2e = if criterion.ge2e {
        Some(ge2e_loss_node(&mut g, emb, w, b, layout, criterion.centroid_mode)?)
    } else {
        None
    };
    let mut sc = None;
    let mut head = None;
    if let Some(branch) = criterion.speaker {
        let targets = check_speakers(model, batch)?;
        let bound = BoundSpeakerHead::bind(&mut g, &model.params);
        let logits = speaker_logits_node(&mut g, emb, &bound, model.config.activation, branch.reverse)?;
        sc = Some(g.softmax_cross_entropy(logits, &targets)?);
        head = Some(bound);
    }
    let total = match (ge2e, sc, criterion.speaker) {
        (Some(l), Some(s), Some(branch)) => combined_loss_node(&mut g, l, s, branch.lambda)?,
        (Some(l), None, _) => l,
        (None, Some(s), Some(branch)) => g.scale(s, branch.lambda),
        _ => return Err(TrainError::Config("criterion has no terms".into())),
    };
    g.backward(total)?;

    grads.w = g.grad(w).data()[0];
    grads.b = g.grad(b).data()[0];
    if let Some(head) = &head {
        head.add_grads(&g, &mut grads.params);
    }
    backward_utterances(utterances, g.grad(emb), &mut grads.params)?;
    Ok(EpisodeOutput {
        loss: g.scalar(total),
        ge2e_loss: ge2e.map(|v| g.scalar(v)),
        sc_loss: sc.map(|v| g.scalar(v)),
        embeddings,
        grads,
    })
}

/// Mean CE loss of a minibatch and its gradients w.r.t. the trunk and CE head.
pub fn ce_gradients(model: &Model, batch: &[&UtteranceRecord]) -> Result<(f64, ModelGrads), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty minibatch".into()));
    }
    let classes = model.config.num_accents;
    if let Some(r) = batch.iter().find(|r| r.accent >= classes) {
        return Err(TrainError::Config(format!("accent {} >= C = {classes}", r.accent + 1)));
    }
    let scale = 1.0 / batch.len() as f64;
    let partials: Vec<(f64, EmbedderParams)> = batch
        .par_iter()
        .map(|r| {
            let mut g = Graph::new();
            let trunk = BoundTrunk::bind(&mut g, &model.params);
            let head = BoundDense::bind(&mut g, &model.params.ce_head);
            let x = g.leaf(r.features.to_tensor());
            let a = embed_node(&mut g, x, &trunk, &model.config)?;
            let logits = head.forward(&mut g, a)?;
            let loss = g.softmax_cross_entropy(logits, &[r.accent])?;
            let loss = g.scale(loss, scale);
            g.backward(loss)?;
            let mut acc = model.params.zeros_like();
            trunk.add_grads(&g, &mut acc);
            acc.ce_head.weight.add_assign(g.grad(head.weight));
            acc.ce_head.bias.add_assign(g.grad(head.bias));
            Ok((g.scalar(loss), acc))
        })
        .collect::<Result<_, NetworkError>>()?;
    let mut grads = ModelGrads::zeros(model);
    let mut loss = 0.0;
    for (l, p) in &partials {
        loss += l;
        for (dst, src) in grads.params.tensors_mut().into_iter().zip(p.tensors()) {
            dst.add_assign(src);
        }
    }
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub post_clip_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps_per_epoch: usize,
    pub steps: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Hooks into a training loop. Called after each applied step and at the
/// end of every epoch (epochs are 1-based).
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_epoch_end(&mut self, _epoch: usize, _model: &Model) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl TrainObserver for NoObserver {}

struct Optimizer<'a> {
    state: AdamState,
    config: &'a TrainConfig,
    clip: f64,
}

impl<'a> Optimizer<'a> {
    fn new(model: &Model, config: &'a TrainConfig, clip: f64) -> Self {
        Self { state: AdamState::new(model_sizes(model)), config, clip }
    }

    /// Clips, applies Adam and clamps `w`. Returns (pre, post) clip norms.
    fn apply(&mut self, model: &mut Model, mut grads: ModelGrads, step: usize) -> Result<ClipReport, TrainError> {
        if grads.slices().iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFiniteGradient { step });
        }
        let report = clip_gradients(&mut grads.slices_mut(), self.clip);
        adam_step(
            &mut model_slices_mut(model),
            &grads.slices(),
            &mut self.state,
            self.config.learning_rate,
            &self.config.adam,
        )
        .map_err(|e| match e {
            TrainError::NonFiniteGradient { .. } => TrainError::NonFiniteGradient { step },
            other => other,
        })?;
        model.similarity.clamp();
        Ok(report)
    }
}

fn numeric(step: usize) -> impl Fn(TrainError) -> TrainError {
    move |e| match e {
        TrainError::Network(source) => TrainError::Numeric { step, source },
        TrainError::Loss(LossError::Numerics(n)) => TrainError::Numeric { step, source: n.into() },
        other => other,
    }
}

pub fn train_ce(train: &[UtteranceRecord], model: &mut Model, config: &TrainConfig) -> Result<TrainHistory, TrainError> {
    train_ce_with_observer(train, model, config, &mut NoObserver)
}

/// Shuffled minibatches of `batch_size_ce`; CE loss through the CE head.
/// On error the model keeps its last successfully updated parameters.
pub fn train_ce_with_observer(
    train: &[UtteranceRecord],
    model: &mut Model,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let plan = EpochPlan::minibatches(train.len(), config.batch_size_ce);
    let mut opt = Optimizer::new(model, config, config.clip_ce);
    let mut history = TrainHistory { steps_per_epoch: plan.steps_per_epoch, steps: Vec::new() };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size_ce) {
            let step = history.steps.len();
            let batch: Vec<&UtteranceRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = ce_gradients(model, &batch).map_err(numeric(step))?;
            let clip = opt.apply(model, grads, step)?;
            let record = StepRecord { step, epoch, loss, grad_norm: clip.norm, post_clip_norm: clip.post_clip_norm };
            observer.on_step(&record);
            history.steps.push(record);
        }
        observer.on_epoch_end(epoch, model)?;
    }
    Ok(history)
}

pub fn train_ge2e(
    train: &[UtteranceRecord],
    model: &mut Model,
    config: &TrainConfig,
    adversarial: bool,
) -> Result<TrainHistory, TrainError> {
    train_ge2e_with_observer(train, model, config, adversarial, &mut NoObserver)
}

/// Episodic GE2E training; with `adversarial`, adds `lambda_sc` times the
/// speaker loss behind gradient reversal.
pub fn train_ge2e_with_observer(
    train: &[UtteranceRecord],
    model: &mut Model,
    config: &TrainConfig,
    adversarial: bool,
    observer: &mut dyn TrainObserver,
) -> Result<TrainHistory, TrainError> {
    config.validate()?;
    let index = ClassIndex::new(train, model.config.num_accents)?;
    let layout = Ge2eLayout::new(index.classes(), config.utterances_per_class)?;
    let criterion = if adversarial {
        for r in train {
            if r.speaker >= model.config.num_speakers {
                return Err(TrainError::Config(format!(
                    "speaker {} >= S = {}",
                    r.speaker + 1,
                    model.config.num_speakers
                )));
            }
        }
        Criterion::adversarial(config.lambda_sc, config.centroid_mode)
    } else {
        Criterion::ge2e(config.centroid_mode)
    };
    let plan = EpochPlan::nominal(&index.counts(), config.utterances_per_class);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Optimizer::new(model, config, config.clip_ge2e);
    let mut history = TrainHistory { steps_per_epoch: plan.steps_per_epoch, steps: Vec::new() };
    for epoch in 1..=config.epochs {
        for _ in 0..plan.steps_per_epoch {
            let step = history.steps.len();
            let picks = episodic_sample(&index, config.utterances_per_class, &mut rng);
            let batch: Vec<&UtteranceRecord> = picks.iter().map(|&i| &train[i]).collect();
            let out = episode_gradients(model, &batch, layout, criterion).map_err(numeric(step))?;
            let clip = opt.apply(model, out.grads, step)?;
            let record =
                StepRecord { step, epoch, loss: out.loss, grad_norm: clip.norm, post_clip_norm: clip.post_clip_norm };
            observer.on_step(&record);
            history.steps.push(record);
        }
        observer.on_epoch_end(epoch, model)?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMatrix;

    fn rec(accent: usize, speaker: usize, n: usize) -> UtteranceRecord {
        UtteranceRecord {
            id: format!("{accent}-{speaker}-{n}"),
            features: FeatureMatrix::new(1, 1, vec![n as f32]).unwrap(),
            accent,
            speaker,
        }
    }

    #[test]
    fn episode_has_m_per_class() {
        let records: Vec<_> = (0..3).flat_map(|c| (0..12).map(move |n| rec(c, c, n))).collect();
        let index = ClassIndex::new(&records, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picks = episodic_sample(&index, 10, &mut rng);
        assert_eq!(picks.len(), 30);
        for c in 0..3 {
            let block = &picks[c * 10..(c + 1) * 10];
            assert!(block.iter().all(|&i| records[i].accent == c));
            let mut unique = block.to_vec();
            unique.sort();
            unique.dedup();
            assert_eq!(unique.len(), 10);
        }
    }

    #[test]
    fn small_class_sampled_with_replacement() {
        let records = vec![rec(0, 0, 0), rec(0, 0, 1), rec(1, 1, 0)];
        let index = ClassIndex::new(&records, 2).unwrap();
        let picks = episodic_sample(&index, 2, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(&picks[2..], &[2, 2]);
    }

    #[test]
    fn empty_class_rejected() {
        let records = vec![rec(0, 0, 0), rec(2, 1, 0)];
        assert!(matches!(ClassIndex::new(&records, 3), Err(TrainError::EmptyClass(2))));
    }

    #[test]
    fn sampling_is_deterministic() {
        let records: Vec<_> = (0..2).flat_map(|c| (0..7).map(move |n| rec(c, c, n))).collect();
        let index = ClassIndex::new(&records, 2).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| episodic_sample(&index, 3, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.5, -2.0];
        let g = vec![0.0, 0.0];
        let mut state = AdamState::new([2]);
        state.m[0] = vec![0.1, 0.2];
        state.v[0] = vec![0.01, 0.04];
        // Non-zero moments move the parameters; check the decay separately.
        let mut q = vec![1.5, -2.0];
        let mut fresh = AdamState::new([2]);
        adam_step(&mut [&mut q], &[&g], &mut fresh, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(q, vec![1.5, -2.0]);
        adam_step(&mut [&mut p], &[&g], &mut state, 0.0, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
        assert!((state.m[0][0] - 0.09).abs() < 1e-15);
        assert!((state.v[0][1] - 0.04 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut state = AdamState::new([1]);
        adam_step(&mut [&mut p], &[&[1.0]], &mut state, 1e-3, &AdamConfig::default()).unwrap();
        assert!((p[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![1.0];
        let mut state = AdamState::new([1]);
        let err = adam_step(&mut [&mut p], &[&[f64::NAN]], &mut state, 0.1, &AdamConfig::default());
        assert!(matches!(err, Err(TrainError::NonFiniteGradient { .. })));
        assert_eq!(p, vec![1.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![0.3, 0.4];
        let r = clip_gradients(&mut [&mut g], 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
        assert!((r.norm - 0.5).abs() < 1e-15);

        let mut g = vec![3.0, 4.0];
        let r = clip_gradients(&mut [&mut g], 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert_eq!(r.norm, 5.0);
        assert!((r.post_clip_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nominal_epoch_uses_largest_class() {
        assert_eq!(EpochPlan::nominal(&[33, 22, 19], 10).steps_per_epoch, 4);
        assert_eq!(EpochPlan::nominal(&[3, 2], 10).steps_per_epoch, 1);
        assert_eq!(EpochPlan::minibatches(33, 16).steps_per_epoch, 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { utterances_per_class: 1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { clip_ge2e: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
