//! Binary checkpoint: `FSLR`, a `u32` version, then `(rows: u32, cols: u32,
//! rows * cols f64)` blocks for every backbone, then `B` and `A` per layer,
//! then the round counter as `u32`. Everything little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{FactorPair, Matrix};
use crate::server::ServerState;

pub const MAGIC: &[u8; 4] = b"FSLR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbones: Vec<Matrix>,
    pub factors: Vec<FactorPair>,
    pub round: u32,
}

impl Checkpoint {
    pub fn from_server(server: &ServerState) -> Self {
        Checkpoint {
            backbones: server.backbones.clone(),
            factors: server.factors.clone(),
            round: server.round as u32,
        }
    }
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) {
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for w in &ckpt.backbones {
        push_matrix(&mut out, w);
    }
    for f in &ckpt.factors {
        push_matrix(&mut out, &f.b);
        push_matrix(&mut out, &f.a);
    }
    out.extend_from_slice(&ckpt.round.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint("matrix size overflows".into()))?;
        let data = self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::new(rows, cols, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Parses a checkpoint; the layer count is inferred from the matrix count.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut matrices = Vec::new();
    while r.remaining() > 4 {
        matrices.push(r.matrix()?);
    }
    let round = r.u32()?;
    if matrices.is_empty() || matrices.len() % 3 != 0 {
        return Err(Error::Checkpoint(format!(
            "expected 3 matrices per layer, found {}",
            matrices.len()
        )));
    }
    let layers = matrices.len() / 3;
    let factor_mats = matrices.split_off(layers);
    let mut factors = Vec::with_capacity(layers);
    let mut it = factor_mats.into_iter();
    while let (Some(b), Some(a)) = (it.next(), it.next()) {
        factors.push(FactorPair::new(b, a).map_err(|e| Error::Checkpoint(e.to_string()))?);
    }
    for (w, f) in matrices.iter().zip(&factors) {
        if w.shape() != f.product_shape() {
            return Err(Error::Checkpoint(format!(
                "backbone {:?} does not match factors {:?}",
                w.shape(),
                f.product_shape()
            )));
        }
    }
    Ok(Checkpoint {
        backbones: matrices,
        factors,
        round,
    })
}

pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
