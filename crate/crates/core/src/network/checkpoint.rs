//! Binary model checkpoints.
//!
//! All integers are little-endian `u32`:
//!
//! ```text
//! magic      8 bytes  "GE2EACKP"
//! version    u32      1
//! config     u32 length + UTF-8 JSON of ModelConfig
//! count      u32      number of tensors
//! tensor     u32 name length + UTF-8 name
//!            u32 rank + rank × u32 dims
//!            prod(dims) × f32 little-endian values, row-major
//! ```
//!
//! Tensors appear in [`EmbedderParams::named_tensors`] order followed by
//! `similarity.w` and `similarity.b` (both shape `[1]`).

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{EmbedderParams, Model, ModelConfig, NetworkError};
use crate::losses::SimilarityParams;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GE2EACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_str(out, name);
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &serde_json::to_string(&model.config).expect("config serializes"));
    let tensors = model.params.named_tensors();
    put_u32(&mut out, tensors.len() as u32 + 2);
    for (name, t) in tensors {
        put_tensor(&mut out, &name, t);
    }
    put_tensor(&mut out, "similarity.w", &Tensor::scalar(model.similarity.w));
    put_tensor(&mut out, "similarity.b", &Tensor::scalar(model.similarity.b));
    out
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|source| CheckpointError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, encode_checkpoint(model))
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = vec![0; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|_| CheckpointError::Malformed("unexpected end of file".into()))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = self.bytes(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let config: ModelConfig = serde_json::from_str(&r.string()?)
        .map_err(|e| CheckpointError::Malformed(format!("config: {e}")))?;
    let mut params = EmbedderParams::init(&config, 0)?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() + 2 {
        return Err(CheckpointError::Malformed(format!(
            "expected {} tensors, found {count}",
            expected.len() + 2
        )));
    }
    for ((name, shape), slot) in expected.iter().zip(params.tensors_mut()) {
        let (found, t) = r.tensor()?;
        if &found != name || t.shape() != shape.as_slice() {
            return Err(CheckpointError::Malformed(format!(
                "expected {name} {shape:?}, found {found} {:?}",
                t.shape()
            )));
        }
        *slot = t;
    }
    let mut scalar = |name: &str| -> Result<f64, CheckpointError> {
        let (found, t) = r.tensor()?;
        if found != name || t.len() != 1 {
            return Err(CheckpointError::Malformed(format!("expected scalar {name}, found {found}")));
        }
        Ok(t.data()[0])
    };
    let w = scalar("similarity.w")?;
    let b = scalar("similarity.b")?;
    if (r.0.position() as usize) != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(Model { config, params, similarity: SimilarityParams { w, b } })
}

pub fn load_checkpoint(path: &Path) -> Result<Model, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode_checkpoint(&bytes)
}
