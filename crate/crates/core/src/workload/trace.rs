//! Binary per-head activation dumps.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "LRQK"            4 ASCII bytes
//! version           u16 (= 1)
//! repeated records:
//!   role            u8  (0 = Q, 1 = K, 2 = V)
//!   rows            u32
//!   cols            u32
//!   payload         rows·cols IEEE-754 f32, row-major
//! ```
//!
//! Heads are stored as consecutive Q, K, V triples; the head count and
//! sequence length are read off the records.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{LrqkError, Result};
use crate::matrix::Matrix;

pub const TRACE_MAGIC: [u8; 4] = *b"LRQK";
pub const TRACE_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TensorRole {
    Q = 0,
    K = 1,
    V = 2,
}

impl TryFrom<u8> for TensorRole {
    type Error = LrqkError;

    fn try_from(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(TensorRole::Q),
            1 => Ok(TensorRole::K),
            2 => Ok(TensorRole::V),
            other => Err(LrqkError::CorruptTrace(format!("unknown role tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceTensor {
    pub role: TensorRole,
    pub matrix: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceManifest {
    pub heads: usize,
    pub seq_len: usize,
}

pub fn write_trace<W: Write>(mut out: W, tensors: &[TraceTensor]) -> Result<()> {
    out.write_all(&TRACE_MAGIC)?;
    out.write_all(&TRACE_VERSION.to_le_bytes())?;
    for t in tensors {
        let (rows, cols) = t.matrix.shape();
        let rows =
            u32::try_from(rows).map_err(|_| LrqkError::InvalidConfig("tensor too tall".into()))?;
        let cols =
            u32::try_from(cols).map_err(|_| LrqkError::InvalidConfig("tensor too wide".into()))?;
        out.write_all(&[t.role as u8])?;
        out.write_all(&rows.to_le_bytes())?;
        out.write_all(&cols.to_le_bytes())?;
        let mut payload = Vec::with_capacity(t.matrix.as_slice().len() * 4);
        for &x in t.matrix.as_slice() {
            let f = x as f32;
            if !f.is_finite() {
                return Err(LrqkError::NonFinite("trace payload (f32 overflow)"));
            }
            payload.extend_from_slice(&f.to_le_bytes());
        }
        out.write_all(&payload)?;
    }
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                LrqkError::CorruptTrace(format!("truncated {what} at byte {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn read_trace<R: Read>(mut input: R) -> Result<Vec<TraceTensor>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(4, "magic")? != TRACE_MAGIC {
        return Err(LrqkError::CorruptTrace("bad magic".into()));
    }
    let v = cur.take(2, "version")?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != TRACE_VERSION {
        return Err(LrqkError::UnsupportedVersion(version));
    }
    let mut tensors = Vec::new();
    while !cur.done() {
        let role = TensorRole::try_from(cur.take(1, "role")?[0])?;
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        let bytes = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| LrqkError::CorruptTrace("payload size overflows".into()))?;
        let payload = cur.take(bytes, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let matrix = Matrix::new(rows, cols, data)
            .map_err(|_| LrqkError::CorruptTrace("non-finite payload value".into()))?;
        tensors.push(TraceTensor { role, matrix });
    }
    Ok(tensors)
}

pub fn save_trace(path: impl AsRef<Path>, tensors: &[TraceTensor]) -> Result<()> {
    let file = fs::File::create(path)?;
    write_trace(std::io::BufWriter::new(file), tensors)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<TraceTensor>> {
    read_trace(fs::File::open(path)?)
}

/// Groups records into Q, K, V triples sharing one shape.
pub fn group_heads(tensors: &[TraceTensor]) -> Result<(TraceManifest, Vec<HeadTensors>)> {
    if tensors.is_empty() || !tensors.len().is_multiple_of(3) {
        return Err(LrqkError::CorruptTrace(format!(
            "{} records do not form Q/K/V triples",
            tensors.len()
        )));
    }
    let shape = tensors[0].matrix.shape();
    let mut heads = Vec::with_capacity(tensors.len() / 3);
    for (h, triple) in tensors.chunks_exact(3).enumerate() {
        let roles = [triple[0].role, triple[1].role, triple[2].role];
        if roles != [TensorRole::Q, TensorRole::K, TensorRole::V] {
            return Err(LrqkError::CorruptTrace(format!(
                "head {h} has roles {roles:?}"
            )));
        }
        if triple.iter().any(|t| t.matrix.shape() != shape) {
            return Err(LrqkError::CorruptTrace(format!(
                "head {h} shape differs from {shape:?}"
            )));
        }
        heads.push(HeadTensors {
            q: triple[0].matrix.clone(),
            k: triple[1].matrix.clone(),
            v: triple[2].matrix.clone(),
        });
    }
    let manifest = TraceManifest {
        heads: heads.len(),
        seq_len: shape.0,
    };
    Ok((manifest, heads))
}

pub fn heads_to_tensors(heads: &[HeadTensors]) -> Vec<TraceTensor> {
    heads
        .iter()
        .flat_map(|h| {
            [
                TraceTensor {
                    role: TensorRole::Q,
                    matrix: h.q.clone(),
                },
                TraceTensor {
                    role: TensorRole::K,
                    matrix: h.k.clone(),
                },
                TraceTensor {
                    role: TensorRole::V,
                    matrix: h.v.clone(),
                },
            ]
        })
        .collect()
}
