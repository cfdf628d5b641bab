//! Self-describing parameter container shared by the synthesis and
//! segmentation models.
//!
//! Layout: `b"HTCCKPT\0"`, format version (u32 LE), header length (u64 LE),
//! JSON header, then every parameter as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use htc_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HTCCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the data block.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// `"synthesis"` or `"segmenter"`.
    pub kind: String,
    pub arch: serde_json::Value,
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, arch: serde_json::Value, meta: serde_json::Value, store: &ParamStore<f32>) -> Self {
        let mut params = Vec::with_capacity(store.len());
        let mut tensors = Vec::with_capacity(store.len());
        let mut offset = 0;
        for (name, t) in store.iter() {
            params.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
            tensors.push(t.clone());
        }
        Self {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                kind: kind.to_string(),
                arch,
                meta,
                params,
            },
            tensors,
        }
    }

    /// Copies every stored tensor into the same-named parameter of `store`;
    /// names and shapes must match one-to-one.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.header.params.len() != store.len() {
            return Err(Error::CorruptFile(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.header.params.len(),
                store.len()
            )));
        }
        for (entry, t) in self.header.params.iter().zip(&self.tensors) {
            let idx = store
                .index_of(&entry.name)
                .ok_or_else(|| Error::CorruptFile(format!("unknown parameter {}", entry.name)))?;
            if store.get(idx).shape() != t.shape() {
                return Err(Error::CorruptFile(format!(
                    "{}: shape {:?} vs model {:?}",
                    entry.name,
                    t.shape(),
                    store.get(idx).shape()
                )));
            }
            *store.get_mut(idx) = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let total: usize = self.tensors.iter().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        let mut word = [0u8; 8];
        LittleEndian::write_u32(&mut word[..4], self.header.version);
        out.extend_from_slice(&word[..4]);
        LittleEndian::write_u64(&mut word, header.len() as u64);
        out.extend_from_slice(&word);
        out.extend_from_slice(&header);
        let start = out.len();
        out.resize(start + 4 * total, 0);
        let mut pos = start;
        for t in &self.tensors {
            LittleEndian::write_f32_into(t.data(), &mut out[pos..pos + 4 * t.len()]);
            pos += 4 * t.len();
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::UnsupportedFormat("not an htc checkpoint".into()));
        }
        let version = LittleEndian::read_u32(&bytes[8..12]);
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedFormat(format!("checkpoint format version {version}")));
        }
        let hlen = LittleEndian::read_u64(&bytes[12..20]) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| Error::CorruptFile("truncated checkpoint header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let data = &bytes[20 + hlen..];
        let mut tensors = Vec::with_capacity(header.params.len());
        for p in &header.params {
            let n: usize = p.shape.iter().product();
            let chunk = data
                .get(4 * p.offset..4 * (p.offset + n))
                .ok_or_else(|| Error::CorruptFile(format!("truncated data for {}", p.name)))?;
            let mut v = vec![0f32; n];
            LittleEndian::read_f32_into(chunk, &mut v);
            tensors.push(Tensor::new(&p.shape, v)?);
        }
        Ok(Self { header, tensors })
    }

    /// Writes to a temporary sibling and renames it into place, so an
    /// interrupted write never clobbers an existing checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
    f.write_all(bytes).map_err(Error::io(&tmp))?;
    f.sync_all().map_err(Error::io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(Error::io(path))
}
