//! Model checkpoints.
//!
//! Layout: magic `CCK1`, format version (u32 LE), header length (u64 LE), a
//! UTF-8 JSON header, then every parameter as row-major f64 LE in header
//! order, then the SHA-256 of all preceding bytes. Files are written to a
//! temporary sibling and renamed into place, so a reader only ever sees a
//! complete checkpoint.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coherence::CoherenceConfig;
use crate::error::{Error, Result};
use crate::model::{ConCaps, ModelSpec};
use crate::tensor::Mat;
use crate::vocab::Vocab;

pub const MAGIC: &[u8; 4] = b"CCK1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub spec: ModelSpec,
    pub vocab: Vocab,
    pub trained_with: Option<CoherenceConfig>,
    pub window_tokens: usize,
    pub step: usize,
    pub params: Vec<ParamEntry>,
}

pub fn encode(model: &ConCaps, step: usize) -> Vec<u8> {
    let header = Header {
        spec: model.spec.clone(),
        vocab: model.vocab.clone(),
        trained_with: model.trained_with.clone(),
        window_tokens: model.window_tokens,
        step,
        params: model
            .params
            .iter()
            .map(|(_, name, m)| ParamEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + model.params.scalar_count() * 8 + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, m) in model.params.iter() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Rebuilds the model and fills every parameter by name.
pub fn decode(bytes: &[u8]) -> Result<(ConCaps, usize)> {
    if bytes.len() < 16 + 32 {
        return Err(format_err("checkpoint truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(format_err("checkpoint checksum mismatch"));
    }
    if &body[..4] != MAGIC {
        return Err(format_err("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format_err(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| format_err("header truncated"))?;
    let mut header: Header = serde_json::from_slice(json).map_err(|e| format_err(format!("bad header: {e}")))?;
    header.vocab.reindex()?;
    let mut model = ConCaps::new(header.spec.clone(), header.vocab, 0)?;
    if model.spec != header.spec {
        return Err(format_err("model spec does not match the stored vocabulary"));
    }
    model.trained_with = header.trained_with;
    model.window_tokens = header.window_tokens;
    let mut payload = &body[16 + hlen..];
    let mut seen = 0;
    for entry in &header.params {
        let id = model
            .params
            .find(&entry.name)
            .ok_or_else(|| format_err(format!("unknown parameter {}", entry.name)))?;
        if model.params.get(id).shape() != (entry.rows, entry.cols) {
            return Err(format_err(format!("shape mismatch for {}", entry.name)));
        }
        let n = entry.rows * entry.cols;
        if payload.len() < n * 8 {
            return Err(format_err("parameter payload truncated"));
        }
        let data = payload[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        payload = &payload[n * 8..];
        model.params.set(id, Mat::from_vec(entry.rows, entry.cols, data));
        seen += 1;
    }
    if seen != model.params.len() || !payload.is_empty() {
        return Err(format_err("checkpoint does not cover exactly the model's parameters"));
    }
    Ok((model, header.step))
}

/// Writes via a temporary sibling file and an atomic rename.
pub fn save(model: &ConCaps, step: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, encode(model, step)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ConCaps, usize)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_spec, tiny_vocab};

    fn model() -> ConCaps {
        let mut m = ConCaps::new(tiny_spec(), tiny_vocab(), 5).unwrap();
        m.trained_with = Some(CoherenceConfig::default().with_lambdas(0.0, 0.0, 1.0, 0.0));
        m.window_tokens = 24;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let (back, step) = decode(&encode(&m, 42)).unwrap();
        assert_eq!(step, 42);
        assert_eq!(back.spec, m.spec);
        assert_eq!(back.vocab, m.vocab);
        assert_eq!(back.trained_with, m.trained_with);
        assert_eq!(back.window_tokens, 24);
        for ((_, n1, a), (_, n2, b)) in m.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_or_corrupted_files_do_not_load() {
        let bytes = encode(&model(), 1);
        for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Format(_))));
    }

    #[test]
    fn save_replaces_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&model(), 1, &path).unwrap();
        save(&model(), 2, &path).unwrap();
        assert_eq!(load(&path).unwrap().1, 2);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}
