//! Binary network snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "EGSTCKPT"
//! version  u32      1
//! n_dims   u32
//! dims     n_dims × u32
//! act      u8       0 = relu, 1 = sigmoid
//! seed     u64
//! weights  per layer, row-major f64
//! ```

use std::path::Path;

use eigenstream_core::linalg::Matrix;
use eigenstream_core::network::{Activation, Mlp};

use crate::error::{CliError, Result};

const MAGIC: &[u8; 8] = b"EGSTCKPT";
const VERSION: u32 = 1;

pub fn encode(net: &Mlp) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.dims().len() as u32).to_le_bytes());
    for &d in net.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(match net.activation() {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
    });
    out.extend_from_slice(&net.seed().to_le_bytes());
    for w in net.all_weights() {
        for v in w.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CliError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Mlp> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CliError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    if !(2..=64).contains(&n) {
        return Err(CliError::Checkpoint(format!("implausible layer count {n}")));
    }
    let dims = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let activation = match r.take(1)?[0] {
        0 => Activation::Relu,
        1 => Activation::Sigmoid,
        other => return Err(CliError::Checkpoint(format!("unknown activation tag {other}"))),
    };
    let seed = r.u64()?;
    let mut weights = Vec::with_capacity(n - 1);
    for pair in dims.windows(2) {
        let (rows, cols) = (pair[1], pair[0]);
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        weights.push(Matrix::from_vec(rows, cols, data)?);
    }
    if r.pos != bytes.len() {
        return Err(CliError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Mlp::from_weights(&dims, activation, seed, weights)?)
}

pub fn save(path: &Path, net: &Mlp) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Mlp> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes)
}
