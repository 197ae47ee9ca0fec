//! Binary checkpoint container.
//!
//! ```text
//! magic    8 bytes  "LTNCKPT\0"
//! version  u32 LE
//! hlen     u32 LE   length of the JSON header in bytes
//! header   hlen bytes of UTF-8 JSON (see `Header`)
//! tensors  for each header tensor entry, in order: product(shape) f32 LE
//! ```
//!
//! Values are stored as f32; loading widens them back to f64.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crf::CrfParams;
use crate::embeddings::{EmbeddingTable, Pooling};
use crate::encoder::{EncoderParams, LayerParams};
use crate::lattice::Lexicon;
use crate::model::{Model, ModelConfig, ModelError, ModelParams};
use crate::params::ParamTensors;
use crate::relpos::FusionParams;
use crate::rules::compile_rules;
use crate::tags::LabelSet;

pub const MAGIC: &[u8; 8] = b"LTNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint has {0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: {reason}")]
    Tensor { name: String, reason: String },
    #[error("checkpoint label set does not match this build's label inventory")]
    Labels,
    #[error("checkpoint I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub scale_attention: bool,
    pub pooling: String,
    pub dropout: f64,
    pub use_lexicon: bool,
    pub use_rules: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: HeaderConfig,
    /// Embedding vocabulary; row `i + 1` of the table belongs to `vocab[i]`.
    pub vocab: Vec<char>,
    pub labels: Vec<String>,
    pub lexicon: Vec<String>,
    pub rules: String,
    pub tensors: Vec<TensorEntry>,
}

fn header_config(c: &ModelConfig) -> HeaderConfig {
    HeaderConfig {
        d_model: c.d_model,
        heads: c.heads,
        layers: c.layers,
        d_ff: c.d_ff,
        scale_attention: c.scale_attention,
        pooling: c.pooling.to_string(),
        dropout: c.dropout,
        use_lexicon: c.use_lexicon,
        use_rules: c.use_rules,
    }
}

fn model_config(h: &HeaderConfig) -> Result<ModelConfig, CheckpointError> {
    let pooling: Pooling = h
        .pooling
        .parse()
        .map_err(|_| CheckpointError::Header(format!("unknown pooling {:?}", h.pooling)))?;
    Ok(ModelConfig {
        d_model: h.d_model,
        heads: h.heads,
        layers: h.layers,
        d_ff: h.d_ff,
        scale_attention: h.scale_attention,
        pooling,
        dropout: h.dropout,
        use_lexicon: h.use_lexicon,
        use_rules: h.use_rules,
    })
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let named = model.params.named();
    let header = Header {
        config: header_config(&model.config),
        vocab: model.params.embeddings.chars().to_vec(),
        labels: model
            .labels()
            .tags()
            .iter()
            .map(|t| t.to_string())
            .collect(),
        lexicon: model.lexicon().words(),
        rules: model.rules().to_source(),
        tensors: named
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &named {
        for v in t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Reads only the header.
pub fn read_header(bytes: &[u8]) -> Result<Header, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    read_header_at(&mut c)
}

fn read_header_at(c: &mut Cursor<'_>) -> Result<Header, CheckpointError> {
    if c.bytes.len() < MAGIC.len() || &c.bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    c.take(MAGIC.len())?;
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = c.u32()? as usize;
    let json = c.take(len)?;
    serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    let header = read_header_at(&mut c)?;
    let config = model_config(&header.config)?;
    let problems = config.problems();
    if !problems.is_empty() {
        return Err(CheckpointError::Header(problems.join("; ")));
    }
    let standard = LabelSet::standard();
    let expected: Vec<String> = standard.tags().iter().map(|t| t.to_string()).collect();
    if header.labels != expected {
        return Err(CheckpointError::Labels);
    }
    let lexicon: Lexicon = header.lexicon.iter().collect();
    let rules =
        compile_rules(&header.rules).map_err(|e| CheckpointError::Header(format!("rules: {e}")))?;

    let mut params = skeleton(&config, header.vocab.clone(), standard.len());
    {
        let mut slots = params.named_mut();
        if slots.len() != header.tensors.len() {
            return Err(CheckpointError::Header(format!(
                "expected {} tensors, header lists {}",
                slots.len(),
                header.tensors.len()
            )));
        }
        for (slot, entry) in slots.iter_mut().zip(&header.tensors) {
            if slot.name != entry.name {
                return Err(CheckpointError::Tensor {
                    name: entry.name.clone(),
                    reason: format!("expected tensor {}", slot.name),
                });
            }
            if slot.shape != entry.shape {
                return Err(CheckpointError::Tensor {
                    name: entry.name.clone(),
                    reason: format!("shape {:?}, expected {:?}", entry.shape, slot.shape),
                });
            }
            let raw = c.take(slot.data.len() * 4)?;
            for (dst, chunk) in slot.data.iter_mut().zip(raw.chunks_exact(4)) {
                let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                if !v.is_finite() {
                    return Err(CheckpointError::Tensor {
                        name: entry.name.clone(),
                        reason: "non-finite value".into(),
                    });
                }
                *dst = f64::from(v);
            }
        }
    }
    if c.pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - c.pos));
    }
    Ok(Model::from_parts(config, params, lexicon, rules)?)
}

/// Zero-valued parameters with the shapes implied by `config`.
fn skeleton(config: &ModelConfig, vocab: Vec<char>, labels: usize) -> ModelParams {
    let d = config.d_model;
    let rows = vocab.len() + 1;
    ModelParams {
        embeddings: EmbeddingTable::from_parts(vocab, Array2::zeros((rows, d))),
        fusion: FusionParams::zeros(d),
        encoder: EncoderParams {
            layers: (0..config.layers)
                .map(|_| LayerParams::zeros(d, config.heads, config.d_ff))
                .collect(),
            scale_attention: config.scale_attention,
        },
        crf: CrfParams::zeros(d, labels),
    }
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&to_bytes(model)).map_err(io)
}

pub fn load(path: impl AsRef<Path>) -> Result<Model, CheckpointError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
    from_bytes(&bytes)
}
