//! Self-describing binary checkpoint container.
//!
//! ```text
//! bytes 0..8    magic "MTGROW01"
//! bytes 8..16   header length, u64 little-endian
//! header        UTF-8 JSON
//! blobs         raw little-endian f64 tensors, contiguous, in index order
//! ```
//!
//! The header holds `format_version`, `config`, `vocab` (token list in id
//! order), `step`, a `tensors` index (`name → {dtype, shape, offset, length}`,
//! offsets relative to the first blob byte) and a `moments` index of Adam
//! buffers per parameter. Parameter blobs come first in name order, then each
//! parameter's first and second moments in name order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NamedParams};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const MAGIC: [u8; 8] = *b"MTGROW01";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

/// Adam state for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    /// Updates applied since these buffers were created; drives bias correction.
    pub steps: u64,
}

impl Moments {
    pub fn zeros(shape: &[usize]) -> Self {
        Moments {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: NamedParams,
    /// Missing entries mean fresh optimizer state.
    pub moments: BTreeMap<String, Moments>,
    /// Global step counter; persists across training phases so the schedule continues.
    pub step: u64,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, vocab: Vocab, params: NamedParams) -> Self {
        Checkpoint {
            config,
            vocab,
            params,
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.vocab.len() != self.config.vocab_size {
            return Err(Error::IndexMismatch {
                name: "embedding.table".into(),
                detail: format!(
                    "vocabulary has {} tokens, config says {}",
                    self.vocab.len(),
                    self.config.vocab_size
                ),
            });
        }
        self.params
            .check_against(&self.config)
            .map_err(|e| Error::IndexMismatch {
                name: "params".into(),
                detail: e.to_string(),
            })?;
        for (name, mo) in &self.moments {
            let p = self.params.get(name).ok_or_else(|| Error::IndexMismatch {
                name: name.clone(),
                detail: "moments for unknown parameter".into(),
            })?;
            if mo.m.shape() != p.shape() || mo.v.shape() != p.shape() {
                return Err(Error::IndexMismatch {
                    name: name.clone(),
                    detail: format!(
                        "moment shapes {:?}/{:?} vs parameter {:?}",
                        mo.m.shape(),
                        mo.v.shape(),
                        p.shape()
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut index = BTreeMap::new();
        let mut blobs: Vec<&Tensor> = Vec::new();
        let mut offset = 0u64;
        let mut entry = |t: &Tensor| {
            let e = IndexEntry {
                dtype: DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offset,
                length: t.numel() as u64 * 8,
            };
            offset += e.length;
            e
        };
        for (name, t) in self.params.iter() {
            index.insert(name.clone(), entry(t));
            blobs.push(t);
        }
        let mut moments = BTreeMap::new();
        for (name, mo) in &self.moments {
            let m = entry(&mo.m);
            let v = entry(&mo.v);
            moments.insert(
                name.clone(),
                MomentEntry {
                    steps: mo.steps,
                    m,
                    v,
                },
            );
            blobs.push(&mo.m);
            blobs.push(&mo.v);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            step: self.step,
            tensors: index,
            moments,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in blobs {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let found = bytes.len() as u64;
        if bytes.len() < 8 {
            return Err(Error::Truncated { needed: 8, found });
        }
        let magic: [u8; 8] = bytes[..8].try_into().expect("8 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated { needed: 16, found });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let blob_start = 16u64.saturating_add(header_len);
        if blob_start > found {
            return Err(Error::Truncated {
                needed: blob_start,
                found,
            });
        }
        let raw = &bytes[16..blob_start as usize];
        let version: VersionOnly = serde_json::from_slice(raw)?;
        if version.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let header: Header = serde_json::from_slice(raw)?;
        let blobs = &bytes[blob_start as usize..];

        let mut expected_offset = 0u64;
        let mut read = |name: &str, e: &IndexEntry| -> Result<Tensor> {
            if e.dtype != DTYPE {
                return Err(mismatch(name, format!("dtype {:?}", e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.length != numel as u64 * 8 {
                return Err(mismatch(
                    name,
                    format!("shape {:?} needs {} bytes, index says {}", e.shape, numel * 8, e.length),
                ));
            }
            if e.offset != expected_offset {
                return Err(mismatch(
                    name,
                    format!("offset {} but blobs are contiguous at {}", e.offset, expected_offset),
                ));
            }
            let end = e.offset + e.length;
            if end > blobs.len() as u64 {
                return Err(Error::Truncated {
                    needed: blob_start + end,
                    found,
                });
            }
            expected_offset = end;
            let data = blobs[e.offset as usize..end as usize]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Tensor::new(e.shape.clone(), data).map_err(|err| mismatch(name, err.to_string()))
        };

        let mut params = NamedParams::new();
        for (name, e) in &header.tensors {
            params.insert(name.clone(), read(name, e)?);
        }
        let mut moments = BTreeMap::new();
        for (name, e) in &header.moments {
            let m = read(name, &e.m)?;
            let v = read(name, &e.v)?;
            moments.insert(
                name.clone(),
                Moments {
                    m,
                    v,
                    steps: e.steps,
                },
            );
        }
        if expected_offset != blobs.len() as u64 {
            return Err(mismatch(
                "<file>",
                format!(
                    "{} trailing bytes after the last indexed tensor",
                    blobs.len() as u64 - expected_offset
                ),
            ));
        }
        let vocab = Vocab::from_tokens(header.vocab).map_err(|e| mismatch("vocab", e.to_string()))?;
        let ckpt = Checkpoint {
            config: header.config,
            vocab,
            params,
            moments,
            step: header.step,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Writes via a sibling temporary file and rename, so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.config == other.config
            && self.vocab == other.vocab
            && self.step == other.step
            && self.params.bitwise_eq(&other.params)
            && self.moments.len() == other.moments.len()
            && self.moments.iter().zip(&other.moments).all(|((na, a), (nb, b))| {
                na == nb && a.steps == b.steps && a.m.bitwise_eq(&b.m) && a.v.bitwise_eq(&b.v)
            })
    }
}

fn mismatch(name: &str, detail: String) -> Error {
    Error::IndexMismatch {
        name: name.to_string(),
        detail,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MomentEntry {
    steps: u64,
    m: IndexEntry,
    v: IndexEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    vocab: Vec<String>,
    step: u64,
    tensors: BTreeMap<String, IndexEntry>,
    #[serde(default)]
    moments: BTreeMap<String, MomentEntry>,
}

#[derive(Deserialize)]
struct VersionOnly {
    format_version: u32,
}
