//! Binary checkpoint format: a JSON header describing the architecture and
//! tensor layout, followed by raw little-endian `f64` weights. Loading
//! restores bit-exact parameters and fails loudly on any layout mismatch.

use crate::error::{Error, Result};
use crate::model::{PUNet, PUNetConfig};
use crate::rng::{derive_rng, Stream};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"PUNETCK1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: PUNetConfig,
    iteration: u64,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(path: &Path, model: &PUNet, iteration: u64) -> Result<()> {
    let views = model.param_views();
    let tensors: Vec<TensorInfo> = views
        .iter()
        .map(|(name, view)| TensorInfo {
            name: name.clone(),
            shape: view.shape().to_vec(),
        })
        .collect();
    let header = Header {
        config: model.config().clone(),
        iteration,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::CheckpointMismatch(format!("header serialization: {e}")))?;

    let payload_len: usize = views.iter().map(|(_, v)| v.len() * 8).sum();
    let mut bytes = Vec::with_capacity(8 + 8 + header_bytes.len() + payload_len);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for (_, view) in &views {
        for &value in view.iter() {
            bytes.extend_from_slice(&value.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Restore a model and the iteration count it was saved at.
pub fn load_checkpoint(path: &Path) -> Result<(PUNet, u64)> {
    let bytes = fs::read(path)?;
    let bad = |detail: String| Error::CheckpointMismatch(format!("{}: {detail}", path.display()));

    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| bad(format!("header parse: {e}")))?;
    header.config.validate()?;

    // Seed value is irrelevant: every parameter is overwritten below, and a
    // name/shape audit proves full coverage.
    let mut model = PUNet::new(header.config.clone(), &mut derive_rng(0, Stream::WeightInit, 0, 0))?;

    let mut offset = payload_start;
    {
        let views = model.param_views_mut();
        if views.len() != header.tensors.len() {
            return Err(bad(format!(
                "tensor count {} does not match architecture ({} expected)",
                header.tensors.len(),
                views.len()
            )));
        }
        for ((name, mut view), info) in views.into_iter().zip(&header.tensors) {
            if name != info.name {
                return Err(bad(format!("tensor {:?} where {name:?} expected", info.name)));
            }
            if view.shape() != info.shape.as_slice() {
                return Err(bad(format!(
                    "tensor {name:?} has shape {:?} but architecture wants {:?}",
                    info.shape,
                    view.shape()
                )));
            }
            let n = view.len() * 8;
            if offset + n > bytes.len() {
                return Err(bad(format!("payload truncated inside tensor {name:?}")));
            }
            for (value, chunk) in view.iter_mut().zip(bytes[offset..offset + n].chunks_exact(8)) {
                *value = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            offset += n;
        }
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes after payload", bytes.len() - offset)));
    }
    Ok((model, header.iteration))
}

/// Load a checkpoint and insist it has the given architecture.
pub fn load_checkpoint_expecting(path: &Path, config: &PUNetConfig) -> Result<(PUNet, u64)> {
    let (model, iteration) = load_checkpoint(path)?;
    if model.config() != config {
        return Err(Error::CheckpointMismatch(format!(
            "{}: checkpoint architecture {:?} does not match configured {:?}",
            path.display(),
            model.config(),
            config
        )));
    }
    Ok((model, iteration))
}
