//! Training criteria: cross-entropy on class probabilities, the GE2E
//! centroid-similarity loss, the speaker-classification loss and the
//! combined adversarial criterion.
//!
//! A GE2E batch holds `M` unit-norm embeddings for each of `C` classes,
//! stored class-major as a `[C·M, D]` matrix: row `l = j·M + i` is the
//! `i`-th embedding of class `j` (0-based). Two centroids are used per
//! class, the plain mean `c_j` and the exclusion mean `c_j^(-i)` that leaves
//! out the embedding being scored. Row `l` of the `[C·M, C]` similarity
//! matrix is
//!
//! ```text
//! S[l][k] = w · <a_ji, normalize(c_k^(-i))> + b   if k == j
//! S[l][k] = w · <a_ji, normalize(c_k)>      + b   otherwise
//! ```
//!
//! and the loss is the mean softmax cross-entropy of each row against its
//! own class.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{softmax_cross_entropy, Graph, NumericsError, Tensor, Var};

/// Lower bound enforced on the similarity scale after every update.
pub const W_MIN: f64 = 1e-6;
/// Tolerance on `||a_ji|| = 1` when constructing an [`EmbeddingBatch`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;
/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotAProbability { row: usize, sum: f64 },
}

/// Learnable scale `w` and bias `b` of the similarity matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub w: f64,
    pub b: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self { w: 10.0, b: -5.0 }
    }
}

impl SimilarityParams {
    pub fn new(w: f64, b: f64) -> Self {
        Self { w, b }
    }

    pub fn clamp(&mut self) {
        if self.w < W_MIN || self.w.is_nan() {
            self.w = W_MIN;
        }
    }
}

/// Which exclusion centroid the matching-class branch uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CentroidMode {
    /// Mean of the other `M - 1` embeddings of the class.
    #[default]
    LeaveOneOut,
    /// The formula exactly as printed, whose summand does not depend on the
    /// summation index: the "centroid" collapses to `a_ji` itself. Kept for
    /// comparison only.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ge2eLayout {
    pub classes: usize,
    pub per_class: usize,
}

impl Ge2eLayout {
    pub fn new(classes: usize, per_class: usize) -> Result<Self, LossError> {
        if classes == 0 {
            return Err(LossError::InvalidBatch("need at least one class".into()));
        }
        if per_class < 2 {
            return Err(LossError::InvalidBatch(format!(
                "need at least 2 utterances per class, got {per_class}"
            )));
        }
        Ok(Self { classes, per_class })
    }

    pub fn rows(&self) -> usize {
        self.classes * self.per_class
    }

    /// Class of every similarity row.
    pub fn row_classes(&self) -> Vec<usize> {
        (0..self.rows()).map(|l| l / self.per_class).collect()
    }

    /// `[C, C·M]` matrix averaging each class block.
    fn mean_matrix(&self) -> Tensor {
        let (c, m) = (self.classes, self.per_class);
        let mut t = Tensor::zeros(&[c, c * m]);
        for j in 0..c {
            for i in 0..m {
                t.data_mut()[j * c * m + j * m + i] = 1.0 / m as f64;
            }
        }
        t
    }

    /// `[C·M, C·M]` matrix producing the exclusion centroid of every row.
    fn exclusion_matrix(&self, mode: CentroidMode) -> Tensor {
        let n = self.rows();
        if mode == CentroidMode::Literal {
            return Tensor::identity(n);
        }
        let m = self.per_class;
        let weight = 1.0 / (m - 1) as f64;
        let mut t = Tensor::zeros(&[n, n]);
        for l in 0..n {
            let block = l / m * m;
            for other in block..block + m {
                if other != l {
                    t.data_mut()[l * n + other] = weight;
                }
            }
        }
        t
    }
}

/// `C × M` unit-norm embeddings, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    layout: Ge2eLayout,
    embeddings: Tensor,
}

impl EmbeddingBatch {
    /// `embeddings` is `[C·M, D]`; every row must have unit norm.
    pub fn new(classes: usize, per_class: usize, embeddings: Tensor) -> Result<Self, LossError> {
        let layout = Ge2eLayout::new(classes, per_class)?;
        if embeddings.shape().len() != 2 || embeddings.rows() != layout.rows() {
            return Err(LossError::InvalidBatch(format!(
                "expected {} rows, got shape {:?}",
                layout.rows(),
                embeddings.shape()
            )));
        }
        for r in 0..embeddings.rows() {
            let n = embeddings.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(LossError::InvalidBatch(format!("row {r} has norm {n}")));
            }
        }
        Ok(Self { layout, embeddings })
    }

    /// From `a[j][i]` vectors.
    pub fn from_nested(a: &[Vec<Vec<f64>>]) -> Result<Self, LossError> {
        let per_class = a.first().map(Vec::len).unwrap_or(0);
        if a.iter().any(|class| class.len() != per_class) {
            return Err(LossError::InvalidBatch("classes have different M".into()));
        }
        let rows: Vec<&Vec<f64>> = a.iter().flatten().collect();
        let t = Tensor::from_rows(&rows).map_err(LossError::from)?;
        Self::new(a.len(), per_class, t)
    }

    pub fn layout(&self) -> Ge2eLayout {
        self.layout
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn classes(&self) -> usize {
        self.layout.classes
    }

    pub fn per_class(&self) -> usize {
        self.layout.per_class
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn get(&self, class: usize, utt: usize) -> &[f64] {
        self.embeddings.row(class * self.layout.per_class + utt)
    }
}

/// Unnormalized centroids: `[C, D]` class means and `[C·M, D]` exclusion
/// means (row `j·M + i` leaves out `a_ji`).
pub fn ge2e_centroids(batch: &EmbeddingBatch) -> (Tensor, Tensor) {
    ge2e_centroids_with_mode(batch, CentroidMode::LeaveOneOut)
}

pub fn ge2e_centroids_with_mode(batch: &EmbeddingBatch, mode: CentroidMode) -> (Tensor, Tensor) {
    let layout = batch.layout();
    let e = batch.embeddings();
    let means = layout.mean_matrix().matmul(e).expect("layout matches batch");
    let excl = layout.exclusion_matrix(mode).matmul(e).expect("layout matches batch");
    (means, excl)
}

/// Adds the `[C·M, C]` similarity matrix to `g` for embedding rows `emb`
/// and scalar nodes `w`, `b`.
pub fn similarity_node(
    g: &mut Graph,
    emb: Var,
    w: Var,
    b: Var,
    layout: Ge2eLayout,
    mode: CentroidMode,
) -> Result<Var, LossError> {
    if g.value(emb).rows() != layout.rows() {
        return Err(LossError::InvalidBatch(format!(
            "{} embedding rows for layout {}x{}",
            g.value(emb).rows(),
            layout.classes,
            layout.per_class
        )));
    }
    let mean_op = g.leaf(layout.mean_matrix());
    let centroids = g.matmul(mean_op, emb)?;
    let centroids = g.normalize_rows(centroids)?;
    let excl_op = g.leaf(layout.exclusion_matrix(mode));
    let excl = g.matmul(excl_op, emb)?;
    let excl = g.normalize_rows(excl)?;

    let centroids_t = g.transpose(centroids);
    let cross = g.matmul(emb, centroids_t)?;
    let own = g.row_dot(emb, excl)?;
    let cos = g.replace_at(cross, own, &layout.row_classes())?;
    let scaled = g.scale_by(cos, w)?;
    Ok(g.shift_by(scaled, b)?)
}

/// Adds the GE2E loss to `g`.
pub fn ge2e_loss_node(
    g: &mut Graph,
    emb: Var,
    w: Var,
    b: Var,
    layout: Ge2eLayout,
    mode: CentroidMode,
) -> Result<Var, LossError> {
    let s = similarity_node(g, emb, w, b, layout, mode)?;
    Ok(g.softmax_cross_entropy(s, &layout.row_classes())?)
}

pub fn ge2e_similarity(batch: &EmbeddingBatch, params: SimilarityParams) -> Result<Tensor, LossError> {
    ge2e_similarity_with_mode(batch, params, CentroidMode::LeaveOneOut)
}

pub fn ge2e_similarity_with_mode(
    batch: &EmbeddingBatch,
    params: SimilarityParams,
    mode: CentroidMode,
) -> Result<Tensor, LossError> {
    let mut g = Graph::new();
    let (emb, w, b) = bind(&mut g, batch.embeddings(), params);
    let s = similarity_node(&mut g, emb, w, b, batch.layout(), mode)?;
    Ok(g.value(s).clone())
}

pub fn ge2e_loss(batch: &EmbeddingBatch, params: SimilarityParams) -> Result<f64, LossError> {
    ge2e_loss_with_mode(batch, params, CentroidMode::LeaveOneOut)
}

pub fn ge2e_loss_with_mode(
    batch: &EmbeddingBatch,
    params: SimilarityParams,
    mode: CentroidMode,
) -> Result<f64, LossError> {
    ge2e_loss_for_rows(batch.embeddings(), batch.layout(), params, mode)
}

/// GE2E loss of arbitrary (not necessarily unit-norm) embedding rows.
pub fn ge2e_loss_for_rows(
    rows: &Tensor,
    layout: Ge2eLayout,
    params: SimilarityParams,
    mode: CentroidMode,
) -> Result<f64, LossError> {
    let mut g = Graph::new();
    let (emb, w, b) = bind(&mut g, rows, params);
    let loss = ge2e_loss_node(&mut g, emb, w, b, layout, mode)?;
    Ok(g.scalar(loss))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ge2eGradients {
    pub loss: f64,
    /// `[C·M, D]`
    pub embeddings: Tensor,
    pub w: f64,
    pub b: f64,
}

pub fn ge2e_loss_and_grads(
    rows: &Tensor,
    layout: Ge2eLayout,
    params: SimilarityParams,
    mode: CentroidMode,
) -> Result<Ge2eGradients, LossError> {
    let mut g = Graph::new();
    let (emb, w, b) = bind(&mut g, rows, params);
    let loss = ge2e_loss_node(&mut g, emb, w, b, layout, mode)?;
    g.backward(loss)?;
    Ok(Ge2eGradients {
        loss: g.scalar(loss),
        embeddings: g.grad(emb).clone(),
        w: g.grad(w).data()[0],
        b: g.grad(b).data()[0],
    })
}

fn bind(g: &mut Graph, rows: &Tensor, params: SimilarityParams) -> (Var, Var, Var) {
    let emb = g.leaf(rows.clone());
    let w = g.leaf(Tensor::scalar(params.w));
    let b = g.leaf(Tensor::scalar(params.b));
    (emb, w, b)
}

/// Value of a cross-entropy loss on probabilities, with the number of
/// target probabilities that had to be clamped to [`PROB_FLOOR`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    pub clamped: usize,
}

/// `-(1/B) Σ_l log p[l][target_l]` for `[B, C]` probability rows.
///
/// The probabilities are turned into logits (`ln max(p, PROB_FLOOR)`) and
/// scored with the stable softmax cross-entropy.
pub fn ce_loss(predictions: &Tensor, targets: &[usize]) -> Result<CrossEntropy, LossError> {
    let cols = predictions.cols();
    let mut clamped = 0;
    for (r, &t) in targets.iter().enumerate().take(predictions.rows()) {
        let row = predictions.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || row.iter().any(|p| !(*p >= 0.0)) {
            return Err(LossError::NotAProbability { row: r, sum });
        }
        if t < cols && row[t] < PROB_FLOOR {
            clamped += 1;
        }
    }
    let logits = predictions.map(|p| p.max(PROB_FLOOR).ln());
    let value = softmax_cross_entropy(&logits, targets)?;
    if clamped > 0 {
        log::warn!("cross-entropy: clamped {clamped} zero target probabilities");
    }
    Ok(CrossEntropy { value, clamped })
}

/// Speaker-classification loss; same contract as [`ce_loss`] over speakers.
pub fn sc_loss(predictions: &Tensor, targets: &[usize]) -> Result<CrossEntropy, LossError> {
    ce_loss(predictions, targets)
}

/// `ge2e + lambda_sc · sc`.
pub fn combined_loss(ge2e: f64, sc: f64, lambda_sc: f64) -> f64 {
    ge2e + lambda_sc * sc
}

pub fn combined_loss_node(g: &mut Graph, ge2e: Var, sc: Var, lambda_sc: f64) -> Result<Var, LossError> {
    let weighted = g.scale(sc, lambda_sc);
    Ok(g.add(ge2e, weighted)?)
}
