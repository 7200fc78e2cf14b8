//! Binary tensor files: magic `TNSR`, version, rank (up to 4), dims, then
//! f32 little-endian data. Round trips are bit-exact.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::path::Path;

pub const TENSOR_MAGIC: [u8; 4] = *b"TNSR";
pub const TENSOR_VERSION: u32 = 1;
pub const MAX_RANK: usize = 4;

/// Byte-slice reader shared by the binary formats of this crate. Every read
/// names the file and what it was after, so truncation errors are precise.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Cursor { bytes, off: 0, path }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                context: format!(
                    "needed {n} bytes for {what} at offset {}, file has {}",
                    self.off,
                    self.bytes.len()
                ),
            });
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(4 * n, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.off != self.bytes.len() {
            return Err(Error::TrailingBytes {
                path: self.path.to_path_buf(),
            });
        }
        Ok(())
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.off
    }
}

pub fn write_tensor(path: &Path, t: &ArrayD<f32>) -> Result<()> {
    if t.ndim() > MAX_RANK {
        return Err(Error::config(format!(
            "tensor rank {} exceeds format maximum {MAX_RANK}",
            t.ndim()
        )));
    }
    let mut buf = Vec::with_capacity(16 + 4 * t.ndim() + 4 * t.len());
    buf.extend_from_slice(&TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.as_standard_layout().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<ArrayD<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(&bytes, path);
    let magic = cur.take(4, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: TENSOR_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur.u32("version")?;
    if version != TENSOR_VERSION {
        return Err(Error::BadVersion {
            path: path.to_path_buf(),
            found: version,
            supported: TENSOR_VERSION,
        });
    }
    let rank = cur.u32("rank")? as usize;
    if rank > MAX_RANK {
        return Err(Error::Format {
            path: path.to_path_buf(),
            context: format!("rank {rank} exceeds format maximum {MAX_RANK}"),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    let mut numel = 1usize;
    for i in 0..rank {
        let d = cur.u32(&format!("dim {i}"))? as usize;
        dims.push(d);
        numel = numel.checked_mul(d).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            context: format!("dims {dims:?} overflow"),
        })?;
    }
    let data = cur.f32_vec(numel, "tensor data")?;
    cur.finish()?;
    ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        context: format!("shape error: {e}"),
    })
}
