//! Model checkpoints.
//!
//! Layout, little-endian: magic `b"RMLC"`, version u32, architecture tag u8
//! (0 linear, 1 mlp), hidden width u64, input dim u64, classes u64, parameter
//! count u32, then per parameter rows u64, cols u64 and rows·cols f64.

use std::fs;
use std::path::Path;

use super::{Architecture, ModelState};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMLC";
const VERSION: u32 = 1;

pub fn checkpoint_bytes(model: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let (tag, hidden) = match model.architecture() {
        Architecture::Linear => (0u8, 0u64),
        Architecture::Mlp { hidden } => (1u8, hidden as u64),
    };
    out.push(tag);
    out.extend_from_slice(&hidden.to_le_bytes());
    out.extend_from_slice(&(model.dim() as u64).to_le_bytes());
    out.extend_from_slice(&(model.classes() as u64).to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&(p.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(p.cols() as u64).to_le_bytes());
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> std::result::Result<ModelState, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let truncated = || "truncated checkpoint".to_string();
    let version = r.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let tag = r.take(1).ok_or_else(truncated)?[0];
    let hidden = r.u64().ok_or_else(truncated)? as usize;
    let architecture = match tag {
        0 => Architecture::Linear,
        1 => Architecture::Mlp { hidden },
        t => return Err(format!("unknown architecture tag {t}")),
    };
    let dim = r.u64().ok_or_else(truncated)? as usize;
    let classes = r.u64().ok_or_else(truncated)? as usize;
    let count = r.u32().ok_or_else(truncated)?;
    let mut params = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let rows = r.u64().ok_or_else(truncated)? as usize;
        let cols = r.u64().ok_or_else(truncated)? as usize;
        let raw = r.take(rows * cols * 8).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.push(Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())?);
    }
    if r.pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    ModelState::from_params(architecture, dim, classes, params).map_err(|e| e.to_string())
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ModelState) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes).map_err(|message| Error::Format {
        path: path.to_path_buf(),
        message,
    })
}
