//! Model checkpoints: magic `SBCK`, version, then named parameter tensors
//! until end of file, each as (name length u32, utf8 name, rank u32, dims
//! u32 each, f32 little-endian data).
//!
//! Parameters are written in name order and values pass through f32 on the
//! way in and out. Because `ParamSet` keeps its values snapped to the f32
//! grid, save → load is lossless and save → load → save reproduces the file
//! byte for byte.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensorfile::Cursor;
use ndarray::{ArrayD, IxDyn};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Sanity cap; no architecture in this crate goes past rank 4.
const MAX_RANK: usize = 8;

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, value) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in value.as_standard_layout().iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(&bytes, path);
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let mut set = ParamSet::new();
    while cur.remaining() > 0 {
        let name_len = cur.u32("name length")? as usize;
        let name_bytes = cur.take(name_len, "parameter name")?;
        let name = std::str::from_utf8(name_bytes).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            context: "parameter name is not valid utf-8".to_string(),
        })?;
        let rank = cur.u32(&format!("rank of {name}"))? as usize;
        if rank > MAX_RANK {
            return Err(Error::Format {
                path: path.to_path_buf(),
                context: format!("parameter {name} has implausible rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for i in 0..rank {
            let d = cur.u32(&format!("dim {i} of {name}"))? as usize;
            dims.push(d);
            numel = numel.checked_mul(d).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                context: format!("dims {dims:?} of {name} overflow"),
            })?;
        }
        let data = cur.f32_vec(numel, &format!("data of {name}"))?;
        if set.contains(name) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                context: format!("duplicate parameter {name}"),
            });
        }
        let value: Vec<f64> = data.into_iter().map(|v| v as f64).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), value).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            context: format!("shape error in {name}: {e}"),
        })?;
        set.insert(name, arr);
    }
    Ok(set)
}
