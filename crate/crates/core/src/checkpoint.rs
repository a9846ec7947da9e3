//! Versioned parameter snapshots.
//!
//! Layout: the magic line `M2CD-CKPT-v1\n`, a little-endian `u64` header
//! length, a JSON header, then every tensor as little-endian `f32` in header
//! order.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::network::{ChangeDetector, ModelConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8] = b"M2CD-CKPT-v1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub moe_enabled: bool,
    pub iteration: u64,
    pub best_val_miou: f64,
    pub structure_hash: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, model: &ChangeDetector, iteration: u64, best_val_miou: f64) -> Result<()> {
    let params = model.params();
    let tensors: Vec<TensorEntry> = params
        .iter()
        .map(|(name, var)| TensorEntry {
            name: name.to_string(),
            shape: var.dims().to_vec(),
        })
        .collect();
    let header = CheckpointHeader {
        model: model.config().clone(),
        moe_enabled: model.moe_enabled(),
        iteration,
        best_val_miou,
        structure_hash: params.structure_hash(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    {
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, var) in params.iter() {
            let values = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            for v in values {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut file = open(path)?;
    read_header_from(&mut file)
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    match std::fs::File::open(path) {
        Ok(f) => Ok(std::io::BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::CheckpointNotFound(path.to_path_buf()))
        }
        Err(e) => Err(e.into()),
    }
}

fn read_header_from(r: &mut impl Read) -> Result<CheckpointHeader> {
    let mut magic = vec![0u8; MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| Error::CheckpointCorrupt("file too short for magic".into()))?;
    if magic != MAGIC {
        return if magic.starts_with(b"M2CD-CKPT-") {
            Err(Error::CheckpointIncompatible(format!(
                "unsupported version {:?}",
                String::from_utf8_lossy(&magic).trim()
            )))
        } else {
            Err(Error::CheckpointCorrupt("bad magic".into()))
        };
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::CheckpointCorrupt("truncated header length".into()))?;
    let len = u64::from_le_bytes(len);
    if len > 64 << 20 {
        return Err(Error::CheckpointCorrupt(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::CheckpointCorrupt("truncated header".into()))?;
    serde_json::from_slice(&json).map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))
}

/// A loaded model plus the header it came from.
pub struct Loaded {
    pub model: ChangeDetector,
    pub header: CheckpointHeader,
}

/// Rebuilds the model recorded in the checkpoint and restores its weights.
pub fn load(path: &Path, dtype: DType) -> Result<Loaded> {
    let mut file = open(path)?;
    let header = read_header_from(&mut file)?;
    let mut model = ChangeDetector::new(header.model.clone(), 0, dtype)?;
    model.set_moe_enabled(header.moe_enabled);
    restore(&mut file, &header, &model)?;
    Ok(Loaded { model, header })
}

/// Loads weights into an existing model; fails if the parameter trees differ.
pub fn load_into(path: &Path, model: &ChangeDetector) -> Result<CheckpointHeader> {
    let mut file = open(path)?;
    let header = read_header_from(&mut file)?;
    if header.model != *model.config() {
        return Err(Error::CheckpointIncompatible(
            "model configuration differs from the checkpoint".into(),
        ));
    }
    restore(&mut file, &header, model)?;
    Ok(header)
}

fn restore(r: &mut impl Read, header: &CheckpointHeader, model: &ChangeDetector) -> Result<()> {
    let params = model.params();
    if params.structure_hash() != header.structure_hash || params.len() != header.tensors.len() {
        return Err(Error::CheckpointIncompatible(
            "parameter tree does not match the recorded configuration".into(),
        ));
    }
    for (entry, (name, var)) in header.tensors.iter().zip(params.iter()) {
        if entry.name != name || entry.shape != var.dims() {
            return Err(Error::CheckpointIncompatible(format!(
                "tensor {} {:?} vs model {} {:?}",
                entry.name,
                entry.shape,
                name,
                var.dims()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::CheckpointCorrupt(format!("truncated data for {}", entry.name)))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::from_vec(values, entry.shape.as_slice(), var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::CheckpointCorrupt("trailing bytes after tensor data".into()));
    }
    Ok(())
}
