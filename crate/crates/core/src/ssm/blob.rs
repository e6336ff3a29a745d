//! Flat binary encoding of [`SsmBlock`] parameters.
//!
//! Little-endian. A 16-byte header holds the magic `SSM1`, state size `N_s`
//! (u32), channel count `D_in` (u32) and config flags (u32: bit 0 selective,
//! bit 1 bidirectional, bit 2 gate, bit 3 norm). It is followed by `f64`
//! arrays, each row-major, in this order:
//!
//! | array          | length        |
//! |----------------|---------------|
//! | norm weight    | D             |
//! | A (diagonal)   | D·N_s         |
//! | skip D         | D             |
//! | Δ proj weight  | D·D           |
//! | Δ proj bias    | D             |
//! | B proj weight  | N_s·D         |
//! | C proj weight  | N_s·D         |
//! | fixed Δ        | D             |
//! | fixed B        | D·N_s         |
//! | fixed C        | D·N_s         |
//! | gate weight    | D·D           |
//! | gate bias      | D             |

use super::block::{BlockConfig, SsmBlock};
use crate::error::{Error, Result};
use crate::nn::Linear;

pub const SSM_MAGIC: &[u8; 4] = b"SSM1";
pub const BLOB_HEADER_LEN: usize = 16;

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub(crate) fn new() -> Self {
        Self { buf: Vec::new() }
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub(crate) fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated {
            expected: (self.pos + n) as u64,
            actual: self.buf.len() as u64,
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl SsmBlock {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.write_into(&mut w);
        w.finish()
    }

    pub(crate) fn write_into(&self, w: &mut ByteWriter) {
        w.bytes(SSM_MAGIC);
        w.u32(self.state as u32);
        w.u32(self.channels as u32);
        w.u32(self.config.flags());
        w.f64s(&self.norm_weight);
        w.f64s(&self.a);
        w.f64s(&self.skip);
        w.f64s(&self.delta_proj.weight);
        w.f64s(&self.delta_proj.bias);
        w.f64s(&self.b_proj.weight);
        w.f64s(&self.c_proj.weight);
        w.f64s(&self.fixed_delta);
        w.f64s(&self.fixed_b);
        w.f64s(&self.fixed_c);
        w.f64s(&self.gate_proj.weight);
        w.f64s(&self.gate_proj.bias);
    }

    /// Encoded size for the given shape.
    pub fn encoded_len(channels: usize, state: usize) -> usize {
        let d = channels;
        let n = state;
        BLOB_HEADER_LEN + 8 * (d + d * n + d + d * d + d + n * d + n * d + d + d * n + d * n + d * d + d)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let block = Self::read_from(&mut r)?;
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after SSM blob", r.remaining())));
        }
        Ok(block)
    }

    pub(crate) fn read_from(r: &mut ByteReader<'_>) -> Result<Self> {
        let start = r.position();
        let magic = r.take(4)?;
        if magic != SSM_MAGIC {
            return Err(Error::Format(format!("bad SSM magic {magic:?}")));
        }
        let state = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let config = BlockConfig::from_flags(r.u32()?)?;
        if state == 0 || channels == 0 {
            return Err(Error::Format("zero-sized SSM block".into()));
        }
        let need = Self::encoded_len(channels, state) - BLOB_HEADER_LEN;
        if r.remaining() < need {
            return Err(Error::Truncated {
                expected: (start + Self::encoded_len(channels, state)) as u64,
                actual: (r.position() + r.remaining()) as u64,
            });
        }
        let (d, n) = (channels, state);
        let norm_weight = r.f64s(d)?;
        let a = r.f64s(d * n)?;
        let skip = r.f64s(d)?;
        let delta_proj = Linear::from_parts(d, d, r.f64s(d * d)?, r.f64s(d)?)?;
        let b_proj = Linear::from_parts(d, n, r.f64s(n * d)?, vec![0.0; n])?;
        let c_proj = Linear::from_parts(d, n, r.f64s(n * d)?, vec![0.0; n])?;
        let fixed_delta = r.f64s(d)?;
        let fixed_b = r.f64s(d * n)?;
        let fixed_c = r.f64s(d * n)?;
        let gate_proj = Linear::from_parts(d, d, r.f64s(d * d)?, r.f64s(d)?)?;
        if fixed_delta.iter().any(|&x| x.is_nan() || x <= 0.0) {
            return Err(Error::Format("fixed timescales must be positive".into()));
        }
        Ok(Self {
            channels,
            state,
            config,
            norm_weight,
            a,
            skip,
            delta_proj,
            b_proj,
            c_proj,
            fixed_delta,
            fixed_b,
            fixed_c,
            gate_proj,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn header_layout() {
        let b = SsmBlock::seeded(3, 2, BlockConfig::default(), &mut seeded(0)).unwrap();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], b"SSM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0b1111);
        assert_eq!(bytes.len(), SsmBlock::encoded_len(3, 2));
        // First payload value is the norm weight (ones).
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1.0);
    }

    #[test]
    fn round_trip() {
        let b = SsmBlock::seeded(4, 5, BlockConfig::linear(), &mut seeded(9)).unwrap();
        assert_eq!(SsmBlock::from_bytes(&b.to_bytes()).unwrap(), b);
    }

    #[test]
    fn rejects_corruption() {
        let b = SsmBlock::seeded(2, 2, BlockConfig::default(), &mut seeded(1)).unwrap();
        let mut bytes = b.to_bytes();
        assert!(matches!(
            SsmBlock::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(SsmBlock::from_bytes(&bytes), Err(Error::Format(_))));
    }
}
