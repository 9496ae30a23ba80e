//! Checkpoint files: one compact JSON header line, a `\n`, then every tensor
//! as little-endian raw floats concatenated in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::AdamConfig;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: EntryKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub dtype: DType,
    pub entries: Vec<Entry>,
    #[serde(default)]
    pub optimizer: Vec<NamedOptimizer>,
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedOptimizer {
    pub name: String,
    pub adam: AdamConfig,
}

impl Header {
    /// Byte length of the blobs holding trainable parameters.
    pub fn param_bytes(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == EntryKind::Param)
            .map(|e| e.shape.iter().product::<usize>() * self.dtype.size_of())
            .sum()
    }
}

pub fn to_bytes<T: Scalar>(store: &ParamStore<T>, optimizer: &[NamedOptimizer], master_seed: u64) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let tagged = store
        .params()
        .map(|(n, t)| (n, t, EntryKind::Param))
        .chain(store.buffers().map(|(n, t)| (n, t, EntryKind::Buffer)));
    for (name, t, kind) in tagged {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            kind,
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        entries,
        optimizer: optimizer.to_vec(),
        master_seed,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend(blob);
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, Header)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("checkpoint header not terminated".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!("checkpoint dtype {:?}, expected {:?}", header.dtype, T::DTYPE)));
    }
    let size = header.dtype.size_of();
    let mut blob = &bytes[nl + 1..];
    let mut store = ParamStore::new();
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        if blob.len() < n * size {
            return Err(Error::Format(format!("checkpoint truncated at {}", e.name)));
        }
        let data = blob[..n * size].chunks(size).map(T::read_le).collect();
        blob = &blob[n * size..];
        let t = Tensor::new(e.shape.clone(), data)?;
        match e.kind {
            EntryKind::Param => store.insert_param(e.name.clone(), t),
            EntryKind::Buffer => store.insert_buffer(e.name.clone(), t),
        }
    }
    if !blob.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", blob.len())));
    }
    Ok((store, header))
}

pub fn save<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    optimizer: &[NamedOptimizer],
    master_seed: u64,
) -> Result<()> {
    fs::write(path, to_bytes(store, optimizer, master_seed)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, Header)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    from_bytes(&fs::read(path)?)
}
