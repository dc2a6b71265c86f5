//! Labeled utterance features, the portable on-disk dataset format, speaker
//! splits and a synthetic generator.
//!
//! On disk a dataset is a directory with
//!
//! * `manifest.jsonl`: one object per utterance,
//!   `{"id", "file", "T", "F", "accent", "speaker"}` with 1-based labels;
//! * one payload file per utterance: `T·F` row-major little-endian `f32`;
//! * `summary.json`: `{"C", "S", "class_names", "speaker_names"}`.
//!
//! In memory, accent and speaker labels are 0-based.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
    #[error("{file}: expected {expected} bytes for the declared shape, found {actual}")]
    ShapeMismatch { file: PathBuf, expected: u64, actual: u64 },
    #[error("{what} label {label} out of range 1..={bound}")]
    LabelOutOfRange { what: &'static str, label: usize, bound: usize },
    #[error("class {class} has {available} speakers, cannot hold out {requested}")]
    InsufficientSpeakers { class: usize, available: usize, requested: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io { path: path.to_path_buf(), source }
}

/// `T × F` single-precision feature sequence, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dims: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dims: usize, data: Vec<f32>) -> Result<Self, FeatureError> {
        if frames == 0 || dims == 0 || data.len() != frames * dims {
            return Err(FeatureError::Format(format!(
                "feature matrix {frames}x{dims} with {} values",
                data.len()
            )));
        }
        Ok(Self { frames, dims, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Tensor::new(vec![self.frames, self.dims], data).expect("valid feature shape")
    }

    /// Column means over frames.
    pub fn frame_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dims];
        for row in self.data.chunks(self.dims) {
            mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
        }
        mean.iter_mut().for_each(|m| *m /= self.frames as f64);
        mean
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub features: FeatureMatrix,
    /// 0-based accent class.
    pub accent: usize,
    /// 0-based speaker index.
    pub speaker: usize,
}

/// Class and speaker display names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNames {
    pub class_names: Vec<String>,
    pub speaker_names: Vec<String>,
}

impl LabelNames {
    pub fn numbered(classes: usize, speakers: usize) -> Self {
        Self {
            class_names: (1..=classes).map(|j| format!("accent{j}")).collect(),
            speaker_names: (1..=speakers).map(|s| format!("speaker{s}")).collect(),
        }
    }

    /// Names covering the largest labels in `records`.
    pub fn for_records(records: &[UtteranceRecord]) -> Self {
        let classes = records.iter().map(|r| r.accent + 1).max().unwrap_or(0);
        let speakers = records.iter().map(|r| r.speaker + 1).max().unwrap_or(0);
        Self::numbered(classes, speakers)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSummary {
    pub num_accents: usize,
    pub num_speakers: usize,
    /// Utterances per accent class, `n_j`.
    pub class_counts: Vec<usize>,
    /// Accent of every speaker; `None` for speakers with no utterances.
    pub speaker_to_accent: Vec<Option<usize>>,
    pub names: LabelNames,
}

impl DatasetSummary {
    pub fn from_records(records: &[UtteranceRecord], names: LabelNames) -> Result<Self, FeatureError> {
        let num_accents = names.class_names.len();
        let num_speakers = names.speaker_names.len();
        let mut class_counts = vec![0; num_accents];
        let mut speaker_to_accent = vec![None; num_speakers];
        for r in records {
            if r.accent >= num_accents {
                return Err(FeatureError::LabelOutOfRange {
                    what: "accent",
                    label: r.accent + 1,
                    bound: num_accents,
                });
            }
            if r.speaker >= num_speakers {
                return Err(FeatureError::LabelOutOfRange {
                    what: "speaker",
                    label: r.speaker + 1,
                    bound: num_speakers,
                });
            }
            class_counts[r.accent] += 1;
            match speaker_to_accent[r.speaker] {
                None => speaker_to_accent[r.speaker] = Some(r.accent),
                Some(a) if a != r.accent => {
                    return Err(FeatureError::Format(format!(
                        "speaker {} appears with accents {} and {}",
                        r.speaker + 1,
                        a + 1,
                        r.accent + 1
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { num_accents, num_speakers, class_counts, speaker_to_accent, names })
    }

    pub fn total(&self) -> usize {
        self.class_counts.iter().sum()
    }

    pub fn max_class_count(&self) -> usize {
        self.class_counts.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "F")]
    pub dims: usize,
    /// 1-based.
    pub accent: usize,
    /// 1-based.
    pub speaker: usize,
}

#[derive(Serialize, Deserialize)]
struct SummaryFile {
    #[serde(rename = "C")]
    classes: usize,
    #[serde(rename = "S")]
    speakers: usize,
    class_names: Vec<String>,
    speaker_names: Vec<String>,
}

/// Writes `records` with generated class/speaker names.
pub fn write_dataset(records: &[UtteranceRecord], dir: &Path) -> Result<Vec<ManifestEntry>, FeatureError> {
    write_dataset_with_names(records, &LabelNames::for_records(records), dir)
}

pub fn write_dataset_with_names(
    records: &[UtteranceRecord],
    names: &LabelNames,
    dir: &Path,
) -> Result<Vec<ManifestEntry>, FeatureError> {
    let first = records
        .first()
        .ok_or_else(|| FeatureError::InvalidArgument("no records to write".into()))?;
    let dims = first.features.dims();
    if let Some(bad) = records.iter().find(|r| r.features.dims() != dims) {
        return Err(FeatureError::Format(format!(
            "utterance {} has F={} but the dataset has F={dims}",
            bad.id,
            bad.features.dims()
        )));
    }
    // Validates labels and the one-accent-per-speaker rule.
    DatasetSummary::from_records(records, names.clone())?;

    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = Vec::with_capacity(records.len());
    let mut lines = String::new();
    for (idx, r) in records.iter().enumerate() {
        let file = format!("{idx:06}.f32");
        let path = dir.join(&file);
        fs::write(&path, r.features.to_le_bytes()).map_err(io_err(&path))?;
        let entry = ManifestEntry {
            id: r.id.clone(),
            file,
            frames: r.features.frames(),
            dims,
            accent: r.accent + 1,
            speaker: r.speaker + 1,
        };
        lines.push_str(&serde_json::to_string(&entry).expect("manifest entry serializes"));
        lines.push('\n');
        manifest.push(entry);
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, lines).map_err(io_err(&manifest_path))?;

    let summary = SummaryFile {
        classes: names.class_names.len(),
        speakers: names.speaker_names.len(),
        class_names: names.class_names.clone(),
        speaker_names: names.speaker_names.clone(),
    };
    let summary_path = dir.join(SUMMARY_FILE);
    let mut f = fs::File::create(&summary_path).map_err(io_err(&summary_path))?;
    serde_json::to_writer_pretty(&mut f, &summary)
        .map_err(|e| FeatureError::Format(e.to_string()))?;
    f.write_all(b"\n").map_err(io_err(&summary_path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>, FeatureError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(FeatureError::Format(format!("{} is missing", path.display())));
    }
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let mut entries = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| FeatureError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(FeatureError::Format(format!("{} has no entries", path.display())));
    }
    Ok(entries)
}

fn read_summary(dir: &Path) -> Result<LabelNames, FeatureError> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let summary: SummaryFile = serde_json::from_str(&text)
        .map_err(|e| FeatureError::Format(format!("{}: {e}", path.display())))?;
    if summary.class_names.len() != summary.classes || summary.speaker_names.len() != summary.speakers {
        return Err(FeatureError::Format(format!(
            "{}: C/S disagree with the name lists",
            path.display()
        )));
    }
    Ok(LabelNames { class_names: summary.class_names, speaker_names: summary.speaker_names })
}

/// Reads a dataset directory, validating payload sizes and labels.
pub fn read_dataset(dir: &Path) -> Result<(Vec<UtteranceRecord>, DatasetSummary), FeatureError> {
    let entries = read_manifest(dir)?;
    let names = read_summary(dir)?;
    let (classes, speakers) = (names.class_names.len(), names.speaker_names.len());
    let dims = entries[0].dims;
    let mut records = Vec::with_capacity(entries.len());
    for e in &entries {
        if e.dims != dims {
            return Err(FeatureError::Format(format!(
                "utterance {} has F={} but the dataset has F={dims}",
                e.id, e.dims
            )));
        }
        if e.accent == 0 || e.accent > classes {
            return Err(FeatureError::LabelOutOfRange { what: "accent", label: e.accent, bound: classes });
        }
        if e.speaker == 0 || e.speaker > speakers {
            return Err(FeatureError::LabelOutOfRange {
                what: "speaker",
                label: e.speaker,
                bound: speakers,
            });
        }
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let expected = (e.frames * e.dims * 4) as u64;
        if bytes.len() as u64 != expected {
            return Err(FeatureError::ShapeMismatch { file: path, expected, actual: bytes.len() as u64 });
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push(UtteranceRecord {
            id: e.id.clone(),
            features: FeatureMatrix::new(e.frames, e.dims, data)?,
            accent: e.accent - 1,
            speaker: e.speaker - 1,
        });
    }
    let summary = DatasetSummary::from_records(&records, names)?;
    if let Some(j) = summary.class_counts.iter().position(|&n| n == 0) {
        return Err(FeatureError::Format(format!("accent class {} has no utterances", j + 1)));
    }
    Ok((records, summary))
}

/// SHA-256 over the manifest, summary and every payload in manifest order.
pub fn dataset_digest(dir: &Path) -> Result<String, FeatureError> {
    let entries = read_manifest(dir)?;
    let mut hasher = Sha256::new();
    for name in [MANIFEST_FILE, SUMMARY_FILE] {
        let path = dir.join(name);
        hasher.update(fs::read(&path).map_err(io_err(&path))?);
    }
    for e in entries {
        let path = dir.join(&e.file);
        hasher.update(fs::read(&path).map_err(io_err(&path))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_speakers_per_class: usize,
    pub seed: u64,
}

/// Holds out `test_speakers_per_class` randomly chosen speakers of every
/// accent class. Both halves keep the input order.
pub fn split_by_speaker(
    records: &[UtteranceRecord],
    spec: SplitSpec,
) -> Result<(Vec<UtteranceRecord>, Vec<UtteranceRecord>), FeatureError> {
    let mut by_class: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.accent).or_default().insert(r.speaker);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut test_speakers = BTreeSet::new();
    for (&class, speakers) in &by_class {
        if spec.test_speakers_per_class == 0 {
            continue;
        }
        if speakers.len() <= spec.test_speakers_per_class {
            return Err(FeatureError::InsufficientSpeakers {
                class: class + 1,
                available: speakers.len(),
                requested: spec.test_speakers_per_class,
            });
        }
        let mut pool: Vec<usize> = speakers.iter().copied().collect();
        pool.shuffle(&mut rng);
        test_speakers.extend(pool.into_iter().take(spec.test_speakers_per_class));
    }
    let (test, train): (Vec<_>, Vec<_>) =
        records.iter().cloned().partition(|r| test_speakers.contains(&r.speaker));
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub speakers_per_class: usize,
    pub utts_per_speaker: usize,
    pub frames: usize,
    pub dims: usize,
    /// Norm of each accent mean vector.
    pub accent_sep: f64,
    /// Norm of each speaker offset vector.
    pub speaker_sep: f64,
    /// Per-entry Gaussian noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            speakers_per_class: 6,
            utts_per_speaker: 20,
            frames: 50,
            dims: 16,
            accent_sep: 2.0,
            speaker_sep: 1.0,
            noise: 0.5,
            seed: 0,
        }
    }
}

fn random_direction(rng: &mut ChaCha8Rng, dims: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Frames are `accent mean + speaker offset + noise`. Accent means and
/// speaker offsets are random directions scaled by `accent_sep` and
/// `speaker_sep`. Speakers are numbered class-major.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<UtteranceRecord>, FeatureError> {
    let c = config;
    if c.classes == 0 || c.speakers_per_class == 0 || c.utts_per_speaker == 0 || c.frames == 0 || c.dims == 0 {
        return Err(FeatureError::InvalidArgument("all counts must be at least 1".into()));
    }
    if !(c.accent_sep >= 0.0 && c.speaker_sep >= 0.0 && c.noise >= 0.0) {
        return Err(FeatureError::InvalidArgument("separations and noise must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let accent_means: Vec<Vec<f64>> = (0..c.classes)
        .map(|_| random_direction(&mut rng, c.dims).into_iter().map(|v| v * c.accent_sep).collect())
        .collect();
    let mut records = Vec::with_capacity(c.classes * c.speakers_per_class * c.utts_per_speaker);
    for (accent, mean) in accent_means.iter().enumerate() {
        for s in 0..c.speakers_per_class {
            let speaker = accent * c.speakers_per_class + s;
            let offset: Vec<f64> =
                random_direction(&mut rng, c.dims).into_iter().map(|v| v * c.speaker_sep).collect();
            for u in 0..c.utts_per_speaker {
                let mut data = Vec::with_capacity(c.frames * c.dims);
                for _ in 0..c.frames {
                    for d in 0..c.dims {
                        let eps: f64 = rng.sample(StandardNormal);
                        data.push((mean[d] + offset[d] + c.noise * eps) as f32);
                    }
                }
                records.push(UtteranceRecord {
                    id: format!("a{}_s{}_u{}", accent + 1, speaker + 1, u + 1),
                    features: FeatureMatrix::new(c.frames, c.dims, data)?,
                    accent,
                    speaker,
                });
            }
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, accent: usize, speaker: usize) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            features: FeatureMatrix::new(2, 3, vec![0.5, -1.0, 2.0, 3.25, 0.0, -0.125]).unwrap(),
            accent,
            speaker,
        }
    }

    #[test]
    fn single_record_payload_is_24_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&[record("u1", 0, 0)], dir.path()).unwrap();
        assert_eq!(manifest.len(), 1);
        let len = fs::metadata(dir.path().join(&manifest[0].file)).unwrap().len();
        assert_eq!(len, 24);
        let (records, summary) = read_dataset(dir.path()).unwrap();
        assert_eq!(records, vec![record("u1", 0, 0)]);
        assert_eq!(summary.class_counts, vec![1]);
    }

    #[test]
    fn empty_directory_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(FeatureError::Format(_))));
    }

    #[test]
    fn truncated_payload_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(&[record("u1", 0, 0), record("u2", 1, 1)], dir.path()).unwrap();
        let path = dir.path().join(&manifest[1].file);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(FeatureError::ShapeMismatch { expected: 24, actual: 20, .. })
        ));
    }

    #[test]
    fn mixed_feature_dims_rejected() {
        let mut other = record("u2", 0, 0);
        other.features = FeatureMatrix::new(3, 2, vec![0.0; 6]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_dataset(&[record("u1", 0, 0), other], dir.path()),
            Err(FeatureError::Format(_))
        ));
    }

    #[test]
    fn speaker_with_two_accents_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_dataset(&[record("u1", 0, 0), record("u2", 1, 0)], dir.path()).is_err());
    }

    fn speakers_per_class(counts: &[usize]) -> Vec<UtteranceRecord> {
        let mut out = Vec::new();
        let mut speaker = 0;
        for (accent, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                for u in 0..3 {
                    out.push(record(&format!("s{speaker}u{u}"), accent, speaker));
                }
                speaker += 1;
            }
        }
        out
    }

    #[test]
    fn split_holds_out_five_of_eight() {
        let records = speakers_per_class(&[9, 8]);
        let (train, test) =
            split_by_speaker(&records, SplitSpec { test_speakers_per_class: 5, seed: 3 }).unwrap();
        let count = |set: &[UtteranceRecord], class| {
            set.iter().filter(|r| r.accent == class).map(|r| r.speaker).collect::<BTreeSet<_>>().len()
        };
        assert_eq!(count(&train, 1), 3);
        assert_eq!(count(&test, 1), 5);
        assert_eq!(count(&train, 0), 4);
        assert_eq!(train.len() + test.len(), records.len());
    }

    #[test]
    fn split_zero_test_speakers_keeps_everything() {
        let records = speakers_per_class(&[2, 1]);
        let (train, test) =
            split_by_speaker(&records, SplitSpec { test_speakers_per_class: 0, seed: 1 }).unwrap();
        assert_eq!(train, records);
        assert!(test.is_empty());
    }

    #[test]
    fn split_requires_more_speakers_than_held_out() {
        let records = speakers_per_class(&[6, 5]);
        let err = split_by_speaker(&records, SplitSpec { test_speakers_per_class: 5, seed: 1 });
        assert!(matches!(err, Err(FeatureError::InsufficientSpeakers { class: 2, .. })));
    }

    #[test]
    fn noiseless_synthetic_class_frames_identical() {
        let cfg = SyntheticConfig { noise: 0.0, speaker_sep: 0.0, utts_per_speaker: 2, frames: 4, ..Default::default() };
        let records = generate_synthetic(&cfg).unwrap();
        assert_eq!(records.len(), 4 * 6 * 2);
        for class in 0..cfg.classes {
            let rows: Vec<&[f32]> = records
                .iter()
                .filter(|r| r.accent == class)
                .flat_map(|r| r.features.data().chunks(cfg.dims))
                .collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn synthetic_rejects_zero_counts() {
        let cfg = SyntheticConfig { frames: 0, ..Default::default() };
        assert!(matches!(generate_synthetic(&cfg), Err(FeatureError::InvalidArgument(_))));
    }
}
