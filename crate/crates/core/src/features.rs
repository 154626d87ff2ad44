//! Per-image feature bundles and the on-disk feature cache.
//!
//! Cache layout: one file per feature key, starting with the magic `CCF1`,
//! followed by four arrays (text, image, faces, objects). Each array is a
//! dtype byte (`1` = little-endian `f32`), a rank byte, one little-endian
//! `u32` per dimension, then the row-major payload. A `manifest.json` maps
//! every key to its file and the file's SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"CCF1";
pub const DTYPE_F32_LE: u8 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// The four encoder streams for one image–text pair.
///
/// In cached mode these are final encoder outputs. In toy mode `x_t` is
/// empty (text goes through the trainable text encoder) and `x_i` holds the
/// raw patch grid fed to the trainable image projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub x_t: Mat,
    pub x_i: Mat,
    pub x_f: Mat,
    pub x_o: Mat,
}

impl FeatureBundle {
    pub fn arrays(&self) -> [&Mat; 4] {
        [&self.x_t, &self.x_i, &self.x_f, &self.x_o]
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|m| m.is_finite())
    }
}

/// Expected stream widths and row limits, checked on load.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub d_t: usize,
    /// Exact patch count, when fixed.
    pub patches: Option<usize>,
    pub d_i: usize,
    pub max_faces: usize,
    pub d_f: usize,
    pub d_o: usize,
}

impl FeatureDims {
    /// Dimensions of the reference pretrained encoders.
    pub fn reference() -> Self {
        Self {
            d_t: 2048,
            patches: Some(49),
            d_i: 2048,
            max_faces: 4,
            d_f: 512,
            d_o: 2048,
        }
    }

    pub fn validate(&self, b: &FeatureBundle) -> Result<()> {
        let check_width = |name: &str, m: &Mat, d: usize| {
            if m.cols() != d {
                Err(Error::Format(format!("{name} has width {}, expected {d}", m.cols())))
            } else {
                Ok(())
            }
        };
        check_width("X_T", &b.x_t, self.d_t)?;
        check_width("X_I", &b.x_i, self.d_i)?;
        check_width("X_F", &b.x_f, self.d_f)?;
        check_width("X_O", &b.x_o, self.d_o)?;
        if let Some(p) = self.patches {
            if b.x_i.rows() != p {
                return Err(Error::Format(format!("X_I has {} patches, expected {p}", b.x_i.rows())));
            }
        }
        if b.x_f.rows() > self.max_faces {
            return Err(Error::Format(format!(
                "X_F has {} faces, at most {} allowed",
                b.x_f.rows(),
                self.max_faces
            )));
        }
        if !b.is_finite() {
            return Err(Error::Format("feature bundle contains non-finite values".into()));
        }
        Ok(())
    }
}

pub fn encode_bundle(b: &FeatureBundle) -> Vec<u8> {
    let mut out = Vec::with_capacity(
        4 + b.arrays().iter().map(|m| 2 + 8 + 4 * m.len()).sum::<usize>(),
    );
    out.extend_from_slice(MAGIC);
    for m in b.arrays() {
        out.push(DTYPE_F32_LE);
        out.push(2);
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_bundle(bytes: &[u8]) -> Result<FeatureBundle> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("missing CCF1 magic".into()));
    }
    let mut arrays = Vec::with_capacity(4);
    for _ in 0..4 {
        let dtype = cur.take(1)?[0];
        if dtype != DTYPE_F32_LE {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
        }
        let (rows, cols) = match shape.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            _ => return Err(Error::Format(format!("unsupported rank {rank}"))),
        };
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("array shape overflows".into()))?;
        let payload = cur.take(n.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        arrays.push(Mat::from_vec(rows, cols, data));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after feature arrays".into()));
    }
    let mut it = arrays.into_iter();
    Ok(FeatureBundle {
        x_t: it.next().unwrap(),
        x_i: it.next().unwrap(),
        x_f: it.next().unwrap(),
        x_o: it.next().unwrap(),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated feature file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dims: Option<FeatureDims>,
    pub entries: BTreeMap<String, ManifestEntry>,
}

/// Read side of a feature cache directory. Safe to share across threads.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    root: PathBuf,
    manifest: Manifest,
    expected: Option<FeatureDims>,
}

impl FeatureStore {
    /// Opens a store, validating bundles against the dims recorded in its manifest.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
        let expected = manifest.dims.clone();
        Ok(Self {
            root,
            manifest,
            expected,
        })
    }

    /// Overrides the dims that loaded bundles are validated against.
    pub fn expect_dims(mut self, dims: FeatureDims) -> Self {
        self.expected = Some(dims);
        self
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.manifest.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.manifest.entries.contains_key(key)
    }

    pub fn read_bytes(&self, key: &str) -> Result<Vec<u8>> {
        let entry = self
            .manifest
            .entries
            .get(key)
            .ok_or_else(|| Error::NotFound(format!("feature key {key:?}")))?;
        let path = self.root.join(&entry.file);
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn load(&self, key: &str) -> Result<FeatureBundle> {
        let bundle = decode_bundle(&self.read_bytes(key)?)?;
        if let Some(dims) = &self.expected {
            dims.validate(&bundle)?;
        }
        Ok(bundle)
    }

    /// Loads a bundle and checks the file against the manifest checksum.
    pub fn load_verified(&self, key: &str) -> Result<FeatureBundle> {
        let bytes = self.read_bytes(key)?;
        let want = &self.manifest.entries[key].sha256;
        if &sha256_hex(&bytes) != want {
            return Err(Error::Format(format!("checksum mismatch for {key:?}")));
        }
        let bundle = decode_bundle(&bytes)?;
        if let Some(dims) = &self.expected {
            dims.validate(&bundle)?;
        }
        Ok(bundle)
    }
}

/// Write side of a feature cache directory.
pub struct FeatureStoreWriter {
    root: PathBuf,
    manifest: Manifest,
}

impl FeatureStoreWriter {
    pub fn create(root: impl AsRef<Path>, dims: Option<FeatureDims>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self {
            root,
            manifest: Manifest {
                version: 1,
                dims,
                entries: BTreeMap::new(),
            },
        })
    }

    pub fn write(&mut self, key: &str, bundle: &FeatureBundle) -> Result<()> {
        if let Some(dims) = &self.manifest.dims {
            dims.validate(bundle)?;
        }
        let file = format!("{}.ccf", sanitize(key));
        let bytes = encode_bundle(bundle);
        let path = self.root.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.entries.insert(
            key.to_string(),
            ManifestEntry {
                file,
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    }

    pub fn finish(self) -> Result<Manifest> {
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(self.manifest)
    }
}

fn sanitize(key: &str) -> String {
    key.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
