//! Checkpoint format: a JSON index next to a raw little-endian payload.
//!
//! The index lists every tensor with name, shape, byte offset, and dtype,
//! plus the architecture config; loading validates every shape against the
//! config. Trainable tensors are stored alongside the batch-norm running
//! statistics.

use crate::cube::BandStats;
use crate::error::{Error, Result};
use crate::graph::BnState;
use crate::model::{tensor_specs, ParamSet, SsftConfig, SsftParams};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    tensors: Vec<TensorEntry>,
    config: SsftConfig,
}

fn bin_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

fn dtype_width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::InvalidData(format!("unsupported dtype {:?}", other))),
    }
}

/// Write params, BN running stats, and the band-normalization stats the
/// model was trained with, so the file is a self-contained eval artifact.
/// `f64` payload so a restored model reproduces its training-time metrics
/// exactly.
pub fn save_checkpoint(
    params: &SsftParams,
    config: &SsftConfig,
    band_stats: Option<&BandStats>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let d = config.embed_dim;
    let mut extra = vec![
        (
            "spatial.bn.running_mean",
            Tensor::new(vec![d], params.bn.running_mean.clone())?,
        ),
        (
            "spatial.bn.running_var",
            Tensor::new(vec![d], params.bn.running_var.clone())?,
        ),
    ];
    if let Some(stats) = band_stats {
        let c = config.num_bands;
        extra.push(("norm.band_mean", Tensor::new(vec![c], stats.mean.clone())?));
        extra.push(("norm.band_std", Tensor::new(vec![c], stats.std.clone())?));
    }
    let all = params
        .params
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .chain(extra.iter().map(|(n, t)| (*n, t)));
    for (name, tensor) in all {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: payload.len(),
            dtype: "f64".into(),
        });
        for &v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let index = CheckpointIndex {
        tensors: entries,
        config: config.clone(),
    };
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::json(path, e))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let bp = bin_path(path);
    fs::write(&bp, payload).map_err(|e| Error::io(&bp, e))?;
    Ok(())
}

/// Load and validate a checkpoint; every expected tensor must be present
/// with the shape the config implies, and every payload slice in bounds.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(SsftParams, SsftConfig, Option<BandStats>)> {
    let path = path.as_ref();
    let json = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&json).map_err(|e| Error::json(path, e))?;
    let config = index.config;
    config.validate()?;
    let bp = bin_path(path);
    let payload = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;

    let read_tensor = |entry: &TensorEntry| -> Result<Tensor> {
        let width = dtype_width(&entry.dtype)?;
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * width;
        if end > payload.len() {
            return Err(Error::InvalidData(format!(
                "tensor {} at offset {} with {} values overruns payload of {} bytes",
                entry.name,
                entry.offset,
                n,
                payload.len()
            )));
        }
        let bytes = &payload[entry.offset..end];
        let data: Vec<f64> = match width {
            4 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            _ => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Tensor::new(entry.shape.clone(), data)
    };

    let mut by_name: std::collections::HashMap<&str, &TensorEntry> =
        index.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut set = ParamSet::new();
    for (name, shape, _) in tensor_specs(&config) {
        let entry = by_name.remove(name.as_str()).ok_or_else(|| {
            Error::InvalidData(format!("checkpoint is missing tensor {}", name))
        })?;
        if entry.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has shape {:?}, config implies {:?}",
                name, entry.shape, shape
            )));
        }
        set.insert(name, read_tensor(entry)?);
    }
    let d = config.embed_dim;
    let mut bn = BnState::new(d);
    for (field, target) in [
        ("spatial.bn.running_mean", &mut bn.running_mean),
        ("spatial.bn.running_var", &mut bn.running_var),
    ] {
        let entry = by_name
            .remove(field)
            .ok_or_else(|| Error::InvalidData(format!("checkpoint is missing tensor {}", field)))?;
        if entry.shape != [d] {
            return Err(Error::ShapeMismatch(format!(
                "tensor {} has shape {:?}, config implies [{}]",
                field, entry.shape, d
            )));
        }
        *target = read_tensor(entry)?.into_data();
    }
    let c = config.num_bands;
    let band_stats = match (
        by_name.remove("norm.band_mean"),
        by_name.remove("norm.band_std"),
    ) {
        (Some(me), Some(se)) => {
            for entry in [me, se] {
                if entry.shape != [c] {
                    return Err(Error::ShapeMismatch(format!(
                        "tensor {} has shape {:?}, config implies [{}]",
                        entry.name, entry.shape, c
                    )));
                }
            }
            Some(BandStats {
                mean: read_tensor(me)?.into_data(),
                std: read_tensor(se)?.into_data(),
            })
        }
        (None, None) => None,
        _ => {
            return Err(Error::InvalidData(
                "checkpoint holds only one of norm.band_mean / norm.band_std".into(),
            ))
        }
    };
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(Error::InvalidData(format!(
            "checkpoint holds unexpected tensor {}",
            name
        )));
    }
    Ok((SsftParams { params: set, bn }, config, band_stats))
}
