//! Parameter checkpoints: a flat little-endian f32 binary next to a JSON
//! manifest listing (name, shape, offset) per tensor. Offsets count f32
//! elements, not bytes.

use super::{Params, Scalar};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    params: Vec<ManifestEntry>,
}

pub fn save<T: Scalar>(params: &Params<T>, manifest_path: &Path, bin_path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut bin: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (_, name, tensor) in params.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
        });
        for &v in tensor.values() {
            bin.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        offset += tensor.numel();
    }
    let manifest = Manifest {
        dtype: "f32".to_string(),
        params: entries,
    };
    let mut mf = fs::File::create(manifest_path)?;
    mf.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    mf.write_all(b"\n")?;
    fs::write(bin_path, bin)?;
    Ok(())
}

/// Load checkpoint values into an existing store built by the same model
/// code path. Every stored tensor must match a parameter by name and shape.
pub fn load_into<T: Scalar>(
    params: &mut Params<T>,
    manifest_path: &Path,
    bin_path: &Path,
) -> Result<()> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.dtype != "f32" {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {:?}",
            manifest.dtype
        )));
    }
    let bin = fs::read(bin_path)?;
    if bin.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!(
            "binary length {} is not a multiple of 4",
            bin.len()
        )));
    }
    let floats: Vec<f32> = bin
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    for entry in &manifest.params {
        let id = params.id_of(&entry.name).ok_or_else(|| {
            Error::Checkpoint(format!("parameter {:?} not found in model", entry.name))
        })?;
        let tensor = params.get_mut(id);
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter {:?}: checkpoint shape {:?} vs model shape {:?}",
                entry.name,
                entry.shape,
                tensor.shape()
            )));
        }
        let n = tensor.numel();
        if entry.offset + n > floats.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {:?}: offset {} + len {} exceeds binary size {}",
                entry.name,
                entry.offset,
                n,
                floats.len()
            )));
        }
        for (dst, &src) in tensor
            .values_mut()
            .iter_mut()
            .zip(&floats[entry.offset..entry.offset + n])
        {
            *dst = T::from_f64(src as f64);
        }
    }
    Ok(())
}
