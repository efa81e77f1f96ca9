//! Self-contained checkpoint files.
//!
//! Layout: the format tag and a newline, a little-endian `u64` header
//! length, a JSON header (config, vocabulary, knowledge base, tensor table,
//! payload digest), then every tensor as little-endian `f32` in table order.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::knowledge::KnowledgeBase;
use crate::tokenizer::Vocab;

pub const FORMAT_TAG: &str = "s4m-ckpt-v1";
const TOPICS_TENSOR: &str = "knowledge.topics";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    config: ModelConfig,
    vocab: String,
    knowledge: String,
    tensors: Vec<TensorEntry>,
    data_len: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// A trained model with the vocabulary it was trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocab,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_bytes(model: &Model<f32>, vocab: &Vocab) -> Vec<u8> {
    let mut data = Vec::with_capacity(4 * (model.params.numel() + model.topics.len()));
    let mut tensors = Vec::new();
    let all = model.params.iter().chain(std::iter::once((TOPICS_TENSOR, &model.topics)));
    for (name, value) in all {
        tensors.push(TensorEntry { name: name.to_string(), rows: value.nrows(), cols: value.ncols() });
        for &v in value.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format: FORMAT_TAG.to_string(),
        config: model.config.clone(),
        vocab: vocab.to_json(),
        knowledge: model.knowledge.to_json(),
        tensors,
        data_len: data.len() as u64,
        sha256: hex(&Sha256::digest(&data)),
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(FORMAT_TAG.len() + 9 + header.len() + data.len());
    out.extend_from_slice(FORMAT_TAG.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
    let nl = bytes.iter().take(64).position(|&b| b == b'\n').ok_or_else(|| corrupt("missing format tag"))?;
    let tag = String::from_utf8_lossy(&bytes[..nl]).into_owned();
    if tag != FORMAT_TAG {
        if tag.starts_with("s4m-ckpt-") {
            return Err(Error::CheckpointVersion { expected: FORMAT_TAG.to_string(), found: tag });
        }
        return Err(corrupt("missing format tag"));
    }
    let rest = &bytes[nl + 1..];
    if rest.len() < 8 {
        return Err(corrupt("truncated before header"));
    }
    let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < hlen {
        return Err(corrupt("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::CorruptCheckpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::CheckpointVersion { expected: FORMAT_TAG.to_string(), found: header.format });
    }
    let data = &rest[hlen..];
    if data.len() as u64 != header.data_len {
        return Err(Error::CorruptCheckpoint(format!(
            "payload is {} bytes, header declares {}",
            data.len(),
            header.data_len
        )));
    }
    if hex(&Sha256::digest(data)) != header.sha256 {
        return Err(corrupt("payload digest mismatch"));
    }
    let mut params = ParamStore::default();
    let mut topics = None;
    let mut offset = 0usize;
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let end = offset + 4 * n;
        if end > data.len() {
            return Err(corrupt("tensor table overruns payload"));
        }
        let values: Vec<f32> = data[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset = end;
        let arr = Array2::from_shape_vec((t.rows, t.cols), values).expect("length matches shape");
        if t.name == TOPICS_TENSOR {
            topics = Some(arr);
        } else {
            if params.contains(&t.name) {
                return Err(Error::CorruptCheckpoint(format!("duplicate tensor {}", t.name)));
            }
            params.insert(&t.name, arr);
        }
    }
    if offset != data.len() {
        return Err(corrupt("trailing bytes after tensors"));
    }
    let topics = topics.ok_or_else(|| corrupt("no topic table"))?;
    let vocab = Vocab::from_json(&header.vocab)?;
    let knowledge = KnowledgeBase::parse(&header.knowledge)?;
    if vocab.len() != header.config.vocab_size {
        return Err(Error::CorruptCheckpoint(format!(
            "vocabulary has {} tokens, config says {}",
            vocab.len(),
            header.config.vocab_size
        )));
    }
    let model = Model::from_parts(header.config, params, knowledge, topics)?;
    Ok(Checkpoint { model, vocab })
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(model: &Model<f32>, vocab: &Vocab, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, vocab);
    let tmp = path.with_extension("partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}
