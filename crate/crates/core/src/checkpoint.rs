//! Binary checkpoint format.
//!
//! Layout: `PLAB`, format version (u32 LE), header length (u64 LE), JSON
//! header, then every tensor as little-endian f32 in header order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Component, ModelConfig, Parameters};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"PLAB";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub component: Component,
    pub shape: [usize; 2],
}

/// How a checkpoint came to be.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// `None` for a freshly initialized model.
    pub train: Option<TrainConfig>,
    pub iterations: usize,
    pub corpus_digest: Option<String>,
    pub config_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters<f32>,
    pub provenance: Provenance,
}

impl Checkpoint {
    /// Errors unless the stored model configuration equals `expected`.
    pub fn expect_config(&self, expected: &ModelConfig) -> Result<()> {
        if self.params.config() != expected {
            return Err(Error::domain("checkpoint model configuration differs from the expected one"));
        }
        Ok(())
    }
}

pub fn encode(params: &Parameters<f32>, provenance: &Provenance) -> Result<Vec<u8>> {
    let header = Header {
        model: params.config().clone(),
        tensors: params
            .metas()
            .iter()
            .map(|m| TensorEntry {
                name: m.name.clone(),
                component: m.component(),
                shape: m.shape,
            })
            .collect(),
        provenance: provenance.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 4 * params.scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.values() {
        for x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX_LEN || &bytes[..4] != MAGIC {
        return Err(integrity("not a checkpoint: bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(integrity(format!(
            "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[PREFIX_LEN..];
    let header_len = usize::try_from(header_len)
        .ok()
        .filter(|&n| n <= body.len())
        .ok_or_else(|| integrity("header length exceeds file size"))?;
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| integrity(format!("unreadable header: {e}")))?;
    let payload = &body[header_len..];
    let expected: usize = header.tensors.iter().map(|t| 4 * t.shape[0] * t.shape[1]).sum();
    if payload.len() != expected {
        return Err(integrity(format!("payload has {} bytes, header describes {expected}", payload.len())));
    }
    let mut values = Vec::with_capacity(header.tensors.len());
    let mut offset = 0;
    for t in &header.tensors {
        let n = t.shape[0] * t.shape[1];
        let data: Vec<f32> = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        values.push(Array2::from_shape_vec((t.shape[0], t.shape[1]), data).expect("length checked"));
    }
    let params = Parameters::from_values(&header.model, values)
        .map_err(|e| integrity(format!("tensors do not match the model configuration: {e}")))?;
    let names_match = params
        .metas()
        .iter()
        .zip(&header.tensors)
        .all(|(m, t)| m.name == t.name && m.component() == t.component);
    if !names_match {
        return Err(integrity("tensor schema does not match the model configuration"));
    }
    Ok(Checkpoint {
        params,
        provenance: header.provenance,
    })
}

pub fn save(path: &Path, params: &Parameters<f32>, provenance: &Provenance) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(params, provenance)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
