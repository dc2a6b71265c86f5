//! Nearest-centroid inference, confusion matrices, accuracy reports and a
//! linear speaker probe on frozen embeddings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::UtteranceRecord;
use crate::network::{Dense, Model, NetworkError};
use crate::numerics::{Graph, Tensor, NORM_EPSILON};
use crate::training::{adam_step, AdamConfig, AdamState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("centroid of class {class} has zero norm")]
    ZeroNormCentroid { class: usize },
    #[error("query embedding has zero norm")]
    ZeroNormQuery,
    #[error("accent class {0} has no utterances to build a centroid from")]
    EmptyClass(usize),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

/// The three training regimes that can be compared in a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "CE-AC")]
    CeAc,
    #[serde(rename = "GE2E-AC")]
    Ge2eAc,
    #[serde(rename = "GE2E-AC-A")]
    Ge2eAcA,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::CeAc, Method::Ge2eAc, Method::Ge2eAcA];

    pub fn label(self) -> &'static str {
        match self {
            Method::CeAc => "CE-AC",
            Method::Ge2eAc => "GE2E-AC",
            Method::Ge2eAcA => "GE2E-AC-A",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.label() == label)
    }

    /// CE models are scored by the argmax of their CE head, GE2E models by
    /// nearest centroid.
    pub fn uses_centroids(self) -> bool {
        !matches!(self, Method::CeAc)
    }
}

/// Embeddings `[N, D]` of `records`, in order.
pub fn embed_records(model: &Model, records: &[UtteranceRecord]) -> Result<Tensor, EvalError> {
    let rows: Vec<Tensor> = records
        .par_iter()
        .map(|r| model.embed(&r.features.to_tensor()))
        .collect::<Result<_, _>>()?;
    let slices: Vec<&[f64]> = rows.iter().map(Tensor::data).collect();
    if slices.is_empty() {
        return Ok(Tensor::zeros(&[0, model.config.embedding_dim]));
    }
    Tensor::from_rows(&slices).map_err(|e| EvalError::Network(e.into()))
}

/// Unnormalized per-class mean embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidSet {
    pub centroids: Tensor,
    pub class_names: Vec<String>,
}

impl CentroidSet {
    /// Means of the rows of `embeddings` grouped by `labels`.
    pub fn from_embeddings(
        embeddings: &Tensor,
        labels: &[usize],
        class_names: Vec<String>,
    ) -> Result<Self, EvalError> {
        let classes = class_names.len();
        if embeddings.rows() != labels.len() {
            return Err(EvalError::Invalid(format!(
                "{} embeddings for {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        let dim = embeddings.cols();
        let mut sums = vec![0.0; classes * dim];
        let mut counts = vec![0usize; classes];
        for (i, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(EvalError::Invalid(format!("label {} >= C = {classes}", label + 1)));
            }
            counts[label] += 1;
            for (s, v) in sums[label * dim..(label + 1) * dim].iter_mut().zip(embeddings.row(i)) {
                *s += v;
            }
        }
        for (j, &n) in counts.iter().enumerate() {
            if n == 0 {
                return Err(EvalError::EmptyClass(j + 1));
            }
            sums[j * dim..(j + 1) * dim].iter_mut().for_each(|s| *s /= n as f64);
        }
        let centroids = Tensor::new(vec![classes, dim], sums).map_err(|e| EvalError::Network(e.into()))?;
        Ok(Self { centroids, class_names })
    }

    pub fn classes(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }
}

/// Centroids over the full training set.
pub fn build_centroids(
    model: &Model,
    train: &[UtteranceRecord],
    class_names: Vec<String>,
) -> Result<CentroidSet, EvalError> {
    let embeddings = embed_records(model, train)?;
    let labels: Vec<usize> = train.iter().map(|r| r.accent).collect();
    CentroidSet::from_embeddings(&embeddings, &labels, class_names)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub class: usize,
    /// Another class reached the same maximal score.
    pub tie: bool,
}

/// Class of maximal cosine similarity; ties go to the lowest index.
pub fn predict(a: &[f64], centroids: &CentroidSet) -> Result<Prediction, EvalError> {
    if a.len() != centroids.dim() {
        return Err(EvalError::Invalid(format!(
            "embedding of {} values for centroids of dimension {}",
            a.len(),
            centroids.dim()
        )));
    }
    let a_norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if a_norm <= NORM_EPSILON {
        return Err(EvalError::ZeroNormQuery);
    }
    let mut best: Option<(usize, f64)> = None;
    let mut tie = false;
    for j in 0..centroids.classes() {
        let c = centroids.centroids.row(j);
        let c_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if c_norm <= NORM_EPSILON {
            return Err(EvalError::ZeroNormCentroid { class: j + 1 });
        }
        let cos = a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / (a_norm * c_norm);
        match best {
            None => best = Some((j, cos)),
            Some((_, s)) if cos > s => {
                best = Some((j, cos));
                tie = false;
            }
            Some((_, s)) if cos == s => tie = true,
            _ => {}
        }
    }
    let (class, _) = best.ok_or_else(|| EvalError::Invalid("no centroids".into()))?;
    if tie {
        log::debug!("prediction tie resolved to class {}", class + 1);
    }
    Ok(Prediction { class, tie })
}

/// Counts indexed by (target, predicted).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, target: usize, predicted: usize) {
        assert!(target < self.classes && predicted < self.classes, "label out of range");
        self.counts[target * self.classes + predicted] += 1;
    }

    pub fn get(&self, target: usize, predicted: usize) -> u64 {
        self.counts[target * self.classes + predicted]
    }

    pub fn row(&self, target: usize) -> &[u64] {
        &self.counts[target * self.classes..(target + 1) * self.classes]
    }

    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.classes).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// `trace / total`, or 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    /// Number of predictions decided by the tie rule.
    pub ties: usize,
}

impl Evaluation {
    pub fn n_samples(&self) -> u64 {
        self.confusion.total()
    }
}

/// Tallies `predictor` over `records` in parallel.
pub fn evaluate_with<P>(records: &[UtteranceRecord], classes: usize, predictor: P) -> Result<Evaluation, EvalError>
where
    P: Fn(&UtteranceRecord) -> Result<Prediction, EvalError> + Sync,
{
    let predictions: Vec<Prediction> = records.par_iter().map(&predictor).collect::<Result<_, _>>()?;
    let mut confusion = ConfusionMatrix::new(classes);
    let mut ties = 0;
    for (r, p) in records.iter().zip(&predictions) {
        if r.accent >= classes || p.class >= classes {
            return Err(EvalError::Invalid(format!("label outside C = {classes}")));
        }
        confusion.record(r.accent, p.class);
        ties += p.tie as usize;
    }
    Ok(Evaluation { accuracy: confusion.accuracy(), confusion, ties })
}

/// Nearest-centroid evaluation.
pub fn evaluate_centroids(
    model: &Model,
    records: &[UtteranceRecord],
    centroids: &CentroidSet,
) -> Result<Evaluation, EvalError> {
    evaluate_with(records, centroids.classes(), |r| {
        let a = model.embed(&r.features.to_tensor())?;
        predict(a.data(), centroids)
    })
}

/// Evaluation by the argmax of the CE head.
pub fn evaluate_argmax(model: &Model, records: &[UtteranceRecord]) -> Result<Evaluation, EvalError> {
    evaluate_with(records, model.config.num_accents, |r| {
        let p = model.ce_head(&r.features.to_tensor())?;
        Ok(argmax(p.data()))
    })
}

fn argmax(values: &[f64]) -> Prediction {
    let mut best = 0;
    let mut tie = false;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
            tie = false;
        } else if v == values[best] {
            tie = true;
        }
    }
    Prediction { class: best, tie }
}

/// Train- and test-split results of one method on one feature type.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub method: String,
    pub feature: String,
    pub class_names: Vec<String>,
    pub train: Evaluation,
    pub test: Evaluation,
}

/// Evaluates `model` on both splits with the scoring rule of `method`.
/// Centroids always come from the training split.
pub fn evaluate_experiment(
    method: Method,
    feature: &str,
    model: &Model,
    train: &[UtteranceRecord],
    test: &[UtteranceRecord],
    class_names: Vec<String>,
) -> Result<ExperimentResult, EvalError> {
    let (train_eval, test_eval) = if method.uses_centroids() {
        let centroids = build_centroids(model, train, class_names.clone())?;
        (evaluate_centroids(model, train, &centroids)?, evaluate_centroids(model, test, &centroids)?)
    } else {
        (evaluate_argmax(model, train)?, evaluate_argmax(model, test)?)
    };
    Ok(ExperimentResult {
        method: method.label().to_string(),
        feature: feature.to_string(),
        class_names,
        train: train_eval,
        test: test_eval,
    })
}

/// One line of `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub feature: String,
    pub split: String,
    pub accuracy: f64,
    pub n_samples: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub table: PathBuf,
    pub confusion_csv: Vec<PathBuf>,
    pub heatmaps: Vec<PathBuf>,
}

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TABLE: &str = "report.txt";

/// Results ordered by feature (first appearance), then by method in the
/// order CE-AC, GE2E-AC, GE2E-AC-A, then any other methods by appearance.
pub fn ordered_results(results: &[ExperimentResult]) -> Vec<&ExperimentResult> {
    let mut features: Vec<&str> = Vec::new();
    for r in results {
        if !features.contains(&r.feature.as_str()) {
            features.push(&r.feature);
        }
    }
    let method_rank = |m: &str| {
        Method::ALL
            .iter()
            .position(|k| k.label() == m)
            .unwrap_or(Method::ALL.len())
    };
    let mut indexed: Vec<(usize, &ExperimentResult)> = results.iter().enumerate().collect();
    indexed.sort_by_key(|(i, r)| {
        let f = features.iter().position(|f| *f == r.feature).unwrap_or(0);
        (f, method_rank(&r.method), *i)
    });
    indexed.into_iter().map(|(_, r)| r).collect()
}

pub fn report_rows(results: &[ExperimentResult]) -> Vec<ReportRow> {
    ordered_results(results)
        .into_iter()
        .flat_map(|r| {
            [("train", &r.train), ("test", &r.test)].map(|(split, e)| ReportRow {
                method: r.method.clone(),
                feature: r.feature.clone(),
                split: split.to_string(),
                accuracy: e.accuracy,
                n_samples: e.n_samples(),
            })
        })
        .collect()
}

/// Fixed-width table with columns method, feature, train_acc, test_acc
/// (accuracies in percent).
pub fn format_table(results: &[ExperimentResult]) -> String {
    let rows: Vec<[String; 4]> = ordered_results(results)
        .into_iter()
        .map(|r| {
            [
                r.method.clone(),
                r.feature.clone(),
                format!("{:.1}", 100.0 * r.train.accuracy),
                format!("{:.1}", 100.0 * r.test.accuracy),
            ]
        })
        .collect();
    let header = ["method", "feature", "train_acc", "test_acc"].map(String::from);
    let mut widths = header.clone().map(|h| h.len());
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (cell, w))| if i < 2 { format!("{cell:<w$}") } else { format!("{cell:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

pub fn write_confusion_csv(matrix: &ConfusionMatrix, class_names: &[String], path: &Path) -> Result<(), EvalError> {
    let csv_err = |source| EvalError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(class_names).map_err(csv_err)?;
    for i in 0..matrix.classes() {
        w.write_record(matrix.row(i).iter().map(u64::to_string)).map_err(csv_err)?;
    }
    w.flush().map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
}

pub fn read_confusion_csv(path: &Path) -> Result<(Vec<String>, ConfusionMatrix), EvalError> {
    let csv_err = |source| EvalError::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let names: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut m = ConfusionMatrix::new(names.len());
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if i >= names.len() || rec.len() != names.len() {
            return Err(EvalError::Invalid(format!("{}: not a {0}×{0} matrix", names.len())));
        }
        for (j, v) in rec.iter().enumerate() {
            let v: u64 = v.parse().map_err(|_| EvalError::Invalid(format!("bad count {v:?}")))?;
            m.counts[i * names.len() + j] = v;
        }
        rows += 1;
    }
    if rows != names.len() {
        return Err(EvalError::Invalid(format!("expected {} rows, found {rows}", names.len())));
    }
    Ok((names, m))
}

/// Row-normalized heat map: one square per cell, white for 0 up to dark
/// blue for a full row.
pub fn write_heatmap(matrix: &ConfusionMatrix, path: &Path) -> Result<(), EvalError> {
    const CELL: u32 = 32;
    const GRID: u32 = 1;
    let c = matrix.classes() as u32;
    let side = c * CELL + (c + 1) * GRID;
    let mut img = image::RgbImage::from_pixel(side.max(1), side.max(1), image::Rgb([96, 96, 96]));
    let sums = matrix.row_sums();
    for i in 0..c {
        for j in 0..c {
            let frac = match sums[i as usize] {
                0 => 0.0,
                n => matrix.get(i as usize, j as usize) as f64 / n as f64,
            };
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * frac).round() as u8;
            let color = image::Rgb([shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0)]);
            let x0 = GRID + j * (CELL + GRID);
            let y0 = GRID + i * (CELL + GRID);
            for y in y0..y0 + CELL {
                for x in x0..x0 + CELL {
                    img.put_pixel(x, y, color);
                }
            }
        }
    }
    img.save(path).map_err(|source| EvalError::Image { path: path.to_path_buf(), source })
}

/// Writes `report.csv`, `report.txt` and, for every result and split, a
/// confusion CSV and PNG under `confusion/`.
pub fn emit_report(results: &[ExperimentResult], dir: &Path) -> Result<ReportFiles, EvalError> {
    if results.is_empty() {
        return Err(EvalError::Invalid("no results to report".into()));
    }
    let confusion_dir = dir.join("confusion");
    fs::create_dir_all(&confusion_dir).map_err(|source| EvalError::Io { path: confusion_dir.clone(), source })?;

    let csv_path = dir.join(REPORT_CSV);
    let csv_err = |source| EvalError::Csv { path: csv_path.clone(), source };
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    for row in report_rows(results) {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| EvalError::Io { path: csv_path.clone(), source })?;

    let table_path = dir.join(REPORT_TABLE);
    fs::write(&table_path, format_table(results))
        .map_err(|source| EvalError::Io { path: table_path.clone(), source })?;

    let mut files = ReportFiles { csv: csv_path, table: table_path, confusion_csv: Vec::new(), heatmaps: Vec::new() };
    for r in ordered_results(results) {
        for (split, e) in [("train", &r.train), ("test", &r.test)] {
            let stem = format!("{}_{}_{split}", slug(&r.method), slug(&r.feature));
            let csv = confusion_dir.join(format!("{stem}.csv"));
            write_confusion_csv(&e.confusion, &r.class_names, &csv)?;
            let png = confusion_dir.join(format!("{stem}.png"));
            write_heatmap(&e.confusion, &png)?;
            files.confusion_csv.push(csv);
            files.heatmaps.push(png);
        }
    }
    Ok(files)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>, EvalError> {
    let csv_err = |source| EvalError::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Settings of the linear softmax speaker probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iterations: 300, learning_rate: 0.05, seed: 0 }
    }
}

/// Splits each speaker's utterances alternately into probe-fit and
/// probe-score halves (in record order).
pub fn probe_split(records: &[UtteranceRecord]) -> (Vec<usize>, Vec<usize>) {
    let mut seen = std::collections::HashMap::new();
    let (mut fit, mut score) = (Vec::new(), Vec::new());
    for (i, r) in records.iter().enumerate() {
        let n = seen.entry(r.speaker).or_insert(0usize);
        if *n % 2 == 0 { fit.push(i) } else { score.push(i) }
        *n += 1;
    }
    (fit, score)
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| t.row(i)).collect();
    Tensor::from_rows(&rows).expect("rows share a width")
}

/// Fits a full-batch softmax regression from embeddings to speaker labels
/// with Adam and returns its accuracy on the scoring rows.
pub fn linear_probe_accuracy(
    embeddings: &Tensor,
    labels: &[usize],
    classes: usize,
    fit: &[usize],
    score: &[usize],
    config: &ProbeConfig,
) -> Result<f64, EvalError> {
    if fit.is_empty() || score.is_empty() {
        return Err(EvalError::Invalid("probe needs fit and score rows".into()));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(EvalError::Invalid("probe label out of range".into()));
    }
    let x_fit = select_rows(embeddings, fit);
    let y_fit: Vec<usize> = fit.iter().map(|&i| labels[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dense = Dense::init(&mut rng, embeddings.cols(), classes);
    let mut state = AdamState::new([dense.weight.len(), dense.bias.len()]);
    let adam = AdamConfig::default();
    let to_err = |e: crate::numerics::NumericsError| EvalError::Network(e.into());
    for _ in 0..config.iterations {
        let mut g = Graph::new();
        let x = g.leaf(x_fit.clone());
        let w = g.leaf(dense.weight.clone());
        let b = g.leaf(dense.bias.clone());
        let h = g.matmul(x, w).map_err(to_err)?;
        let logits = g.add_row_bias(h, b).map_err(to_err)?;
        let loss = g.softmax_cross_entropy(logits, &y_fit).map_err(to_err)?;
        g.backward(loss).map_err(to_err)?;
        let (gw, gb) = (g.grad(w).data().to_vec(), g.grad(b).data().to_vec());
        adam_step(
            &mut [dense.weight.data_mut(), dense.bias.data_mut()],
            &[&gw, &gb],
            &mut state,
            config.learning_rate,
            &adam,
        )
        .map_err(|e| EvalError::Invalid(e.to_string()))?;
    }
    let x_score = select_rows(embeddings, score);
    let logits = x_score.matmul(&dense.weight).map_err(to_err)?;
    let correct = score
        .iter()
        .enumerate()
        .filter(|&(row, &i)| {
            let scores: Vec<f64> = logits.row(row).iter().zip(dense.bias.data()).map(|(l, b)| l + b).collect();
            argmax(&scores).class == labels[i]
        })
        .count();
    Ok(correct as f64 / score.len() as f64)
}

/// Speaker-probe accuracy on frozen embeddings of `records`, fitting on half
/// of every speaker's utterances and scoring on the other half.
pub fn speaker_probe(model: &Model, records: &[UtteranceRecord], config: &ProbeConfig) -> Result<f64, EvalError> {
    let embeddings = embed_records(model, records)?;
    let labels: Vec<usize> = records.iter().map(|r| r.speaker).collect();
    let (fit, score) = probe_split(records);
    linear_probe_accuracy(&embeddings, &labels, model.config.num_speakers, &fit, &score, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> CentroidSet {
        CentroidSet {
            centroids: Tensor::from_rows(rows).unwrap(),
            class_names: (0..rows.len()).map(|i| format!("c{i}")).collect(),
        }
    }

    #[test]
    fn predict_examples() {
        let c = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(predict(&[1.0, 0.0], &c).unwrap(), Prediction { class: 0, tie: false });
        assert_eq!(predict(&[0.2, 0.9], &c).unwrap().class, 1);
        assert_eq!(predict(&[1.0, 1.0], &c).unwrap(), Prediction { class: 0, tie: true });
        let z = set(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(matches!(predict(&[1.0, 0.0], &z), Err(EvalError::ZeroNormCentroid { class: 2 })));
    }

    #[test]
    fn centroid_means() {
        let e = Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        let c = CentroidSet::from_embeddings(&e, &[0, 0, 1], vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(c.centroids.row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(c.centroids.row(1), &[0.0, 0.0, 1.0]);
        let err = CentroidSet::from_embeddings(&e, &[0, 0, 0], vec!["a".into(), "b".into()]);
        assert!(matches!(err, Err(EvalError::EmptyClass(2))));
    }

    #[test]
    fn confusion_accounting() {
        let mut m = ConfusionMatrix::new(3);
        for t in 0..3 {
            for _ in 0..4 {
                m.record(t, 0);
            }
        }
        assert_eq!(m.row_sums(), vec![4, 4, 4]);
        assert!((m.accuracy() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ordering_follows_tables() {
        let e = Evaluation { confusion: ConfusionMatrix::new(1), accuracy: 0.0, ties: 0 };
        let mk = |m: Method, f: &str| ExperimentResult {
            method: m.label().into(),
            feature: f.into(),
            class_names: vec!["x".into()],
            train: e.clone(),
            test: e.clone(),
        };
        let results = vec![
            mk(Method::Ge2eAcA, "BNF"),
            mk(Method::CeAc, "HuBERT"),
            mk(Method::Ge2eAc, "BNF"),
            mk(Method::CeAc, "BNF"),
            mk(Method::Ge2eAcA, "HuBERT"),
            mk(Method::Ge2eAc, "HuBERT"),
        ];
        let order: Vec<(String, String)> =
            ordered_results(&results).iter().map(|r| (r.method.clone(), r.feature.clone())).collect();
        let expected: Vec<(String, String)> = ["BNF", "HuBERT"]
            .iter()
            .flat_map(|f| Method::ALL.map(|m| (m.label().to_string(), f.to_string())))
            .collect();
        assert_eq!(order, expected);
        let table = format_table(&results);
        assert_eq!(table.lines().count(), 7);
        assert!(table.lines().next().unwrap().starts_with("method"));
    }
}
