//! Checkpoint files: a magic line, a byte length line, a JSON header
//! (config, bucket plan, vocabulary hashes, tensor table) and a payload of
//! little-endian `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bucketing::BucketPlan;
use crate::error::{Error, Result};
use crate::ops::Real;

use super::{build_model, Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &str = "MOWE-CHECKPOINT 1";

/// Content hashes of the vocabularies a model was trained with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabHashes {
    pub default_vocab: String,
    pub routing_vocab: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    plan: String,
    vocab: VocabHashes,
    experts_frozen: bool,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: VocabHashes,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn checkpoint_bytes<T: Real>(model: &Model<T>, vocab: &VocabHashes) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(model.num_params() * 4);
    for (name, shape, data) in model.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            offset: payload.len(),
        });
        for &x in data {
            payload.extend_from_slice(&x.to_f32_lossy().to_le_bytes());
        }
    }
    let header = Header {
        config: model.cfg.clone(),
        plan: model.plan.to_toml(),
        vocab: vocab.clone(),
        experts_frozen: model.pools.iter().any(|p| p.frozen),
        tensors,
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    let mut out = format!("{CHECKPOINT_MAGIC}\n{}\n", json.len()).into_bytes();
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint<T: Real>(path: &Path, model: &Model<T>, vocab: &VocabHashes) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, vocab)).map_err(|e| Error::io(path, e))
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("truncated preamble"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| bad("preamble is not UTF-8"))
}

pub fn checkpoint_from_bytes(bytes: &[u8], expected: Option<&VocabHashes>) -> Result<Checkpoint> {
    let mut pos = 0;
    if next_line(bytes, &mut pos)? != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len: usize = next_line(bytes, &mut pos)?
        .parse()
        .map_err(|_| bad("bad header length"))?;
    let json = bytes
        .get(pos..pos + len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[pos + len..];
    if let Some(exp) = expected {
        for (which, e, f) in [
            ("default", &exp.default_vocab, &header.vocab.default_vocab),
            ("routing", &exp.routing_vocab, &header.vocab.routing_vocab),
        ] {
            if e != f {
                return Err(Error::VocabHashMismatch {
                    which,
                    expected: e.clone(),
                    found: f.clone(),
                });
            }
        }
    }
    let plan = BucketPlan::from_toml(&header.plan)?;
    let mut model: Model<f32> = build_model(&header.config, &plan, 0)?;
    let skeleton: Vec<(String, Vec<usize>, usize)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, s, d)| (n, s, d.len()))
        .collect();
    if skeleton.len() != header.tensors.len() {
        return Err(bad(format!(
            "expected {} tensors, found {}",
            skeleton.len(),
            header.tensors.len()
        )));
    }
    let mut values = Vec::with_capacity(model.num_params());
    for ((name, shape, n), t) in skeleton.iter().zip(&header.tensors) {
        if &t.name != name || &t.shape != shape || t.dtype != "f32" {
            return Err(bad(format!(
                "tensor {} {:?} does not match {name} {shape:?}",
                t.name, t.shape
            )));
        }
        let raw = payload
            .get(t.offset..t.offset + 4 * n)
            .ok_or_else(|| bad(format!("payload truncated in {name}")))?;
        values.extend(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
        );
    }
    if values.len() * 4 != payload.len() {
        return Err(bad("payload has trailing bytes"));
    }
    let dense_len = model.dense.len();
    model.dense.data_mut().copy_from_slice(&values[..dense_len]);
    let mut off = dense_len;
    for p in &mut model.pools {
        let n = p.params.len();
        p.params.data_mut().copy_from_slice(&values[off..off + n]);
        off += n;
        p.frozen = header.experts_frozen;
    }
    Ok(Checkpoint {
        model,
        vocab: header.vocab,
    })
}

/// Loads a checkpoint, checking vocabulary hashes when `expected` is given.
pub fn load_checkpoint(path: &Path, expected: Option<&VocabHashes>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes, expected)
}
