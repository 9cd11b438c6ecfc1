//! Single-file checkpoint archive: named f64 arrays plus a JSON sidecar.
//!
//! Layout (all integers little-endian u64): magic, array count, then per
//! array `name_len, name bytes, ndim, dims..., values`. The sidecar lives at
//! the same path with a `.json` extension.

use std::io::Write;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::ModelError;

const MAGIC: u64 = 0x4143_4b50_5431_0001; // "ACKPT1"

/// Parameter arrays in archive order.
pub type NamedArrays = Vec<(String, ArrayD<f64>)>;

/// Sidecar metadata describing the archived model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub n_classes_seen: usize,
    /// Feature dim per branch (single-branch models store one entry).
    pub branch_dims: Vec<usize>,
    pub config_hash: u64,
}

pub fn save_checkpoint(
    path: &Path,
    arrays: &[(String, ArrayD<f64>)],
    meta: &CheckpointMeta,
) -> Result<(), ModelError> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, array) in arrays {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(array.ndim() as u64).to_le_bytes());
        for d in array.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in array.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    let sidecar = path.with_extension("json");
    std::fs::write(
        sidecar,
        serde_json::to_string_pretty(meta).expect("meta serializes"),
    )?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NamedArrays, CheckpointMeta), ModelError> {
    let bytes = std::fs::read(path)?;
    let mut cursor = 0usize;
    let take_u64 = |cursor: &mut usize| -> Result<u64, ModelError> {
        let end = *cursor + 8;
        if end > bytes.len() {
            return Err(ModelError::CheckpointFormat("truncated archive".into()));
        }
        let v = u64::from_le_bytes(bytes[*cursor..end].try_into().unwrap());
        *cursor = end;
        Ok(v)
    };

    if take_u64(&mut cursor)? != MAGIC {
        return Err(ModelError::CheckpointFormat("bad magic".into()));
    }
    let count = take_u64(&mut cursor)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = take_u64(&mut cursor)? as usize;
        if cursor + name_len > bytes.len() {
            return Err(ModelError::CheckpointFormat("truncated name".into()));
        }
        let name = String::from_utf8(bytes[cursor..cursor + name_len].to_vec())
            .map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
        cursor += name_len;
        let ndim = take_u64(&mut cursor)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(take_u64(&mut cursor)? as usize);
        }
        let len: usize = dims.iter().product();
        if cursor + len * 8 > bytes.len() {
            return Err(ModelError::CheckpointFormat("truncated values".into()));
        }
        let data: Vec<f64> = bytes[cursor..cursor + len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += len * 8;
        let array = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
        arrays.push((name, array));
    }

    let sidecar = path.with_extension("json");
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(sidecar)?)
        .map_err(|e| ModelError::CheckpointFormat(format!("sidecar: {e}")))?;
    Ok((arrays, meta))
}
