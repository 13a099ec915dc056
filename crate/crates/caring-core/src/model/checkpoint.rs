//! Checkpoint file: a JSON manifest (architecture, step, seed, hashes, blob
//! layout) followed by a raw little-endian f64 parameter blob in the
//! manifest-declared order. Optimizer moments ride along when present so
//! interrupted runs resume exactly.

use super::{CaringModel, FlowKind, ModelHyper};
use crate::error::{CoreError, Result};
use crate::optim::OptimizerState;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CKPT";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub hyper: ModelHyper,
    pub flow_kind: FlowKind,
    pub step: u64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Parameter tensors in blob order.
    pub entries: Vec<BlobEntry>,
    pub has_optimizer_state: bool,
}

pub fn save_checkpoint(
    path: &Path,
    model: &CaringModel,
    optimizer: Option<&OptimizerState>,
    step: u64,
    seed: u64,
    dataset_hash: Option<String>,
    config_hash: Option<String>,
) -> Result<()> {
    let names = model.param_names();
    let params = model.params();
    let entries: Vec<BlobEntry> = names
        .iter()
        .zip(&params)
        .map(|(n, p)| BlobEntry { name: n.clone(), shape: p.shape().to_vec() })
        .collect();
    let manifest = CheckpointManifest {
        hyper: model.hyper.clone(),
        flow_kind: model.flow_kind.clone(),
        step,
        seed,
        dataset_hash,
        config_hash,
        entries,
        has_optimizer_state: optimizer.is_some(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);
    let mut push_tensor = |t: &Tensor| {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };
    for p in &params {
        push_tensor(p);
    }
    if let Some(state) = optimizer {
        for m in &state.first {
            push_tensor(m);
        }
        for v in &state.second {
            push_tensor(v);
        }
        buf.extend_from_slice(&state.step.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(CaringModel, Option<OptimizerState>, CheckpointManifest)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(CoreError::Format { offset: 0, message: "bad checkpoint magic".into() });
    }
    let mlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + mlen {
        return Err(CoreError::Format {
            offset: bytes.len() as u64,
            message: format!("truncated manifest: need {} bytes", 8 + mlen),
        });
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[8..8 + mlen])?;
    let mut model = CaringModel::init_with_flow(manifest.hyper.clone(), manifest.flow_kind.clone(), manifest.seed);

    let names = model.param_names();
    if names.len() != manifest.entries.len()
        || names.iter().zip(&manifest.entries).any(|(n, e)| n != &e.name)
    {
        return Err(CoreError::Config("checkpoint parameter order mismatch".into()));
    }

    let mut offset = 8 + mlen;
    let mut read_into = |t: &mut Tensor, offset: &mut usize| -> Result<()> {
        let need = t.len() * 8;
        if bytes.len() < *offset + need {
            return Err(CoreError::Format {
                offset: bytes.len() as u64,
                message: format!("truncated blob: need {} bytes", *offset + need),
            });
        }
        for (dst, chunk) in t.data_mut().iter_mut().zip(bytes[*offset..*offset + need].chunks_exact(8))
        {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        *offset += need;
        Ok(())
    };
    for p in model.params_mut() {
        read_into(p, &mut offset)?;
    }
    let optimizer = if manifest.has_optimizer_state {
        let mut state = OptimizerState::for_params(model.params());
        for m in &mut state.first {
            read_into(m, &mut offset)?;
        }
        for v in &mut state.second {
            read_into(v, &mut offset)?;
        }
        if bytes.len() < offset + 8 {
            return Err(CoreError::Format {
                offset: bytes.len() as u64,
                message: "truncated optimizer step".into(),
            });
        }
        state.step = u64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
        offset += 8;
        Some(state)
    } else {
        None
    };
    if offset != bytes.len() {
        return Err(CoreError::Format {
            offset: offset as u64,
            message: format!("{} trailing bytes", bytes.len() - offset),
        });
    }
    Ok((model, optimizer, manifest))
}
