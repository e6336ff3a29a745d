//! Label volume files.
//!
//! A 16-byte header (magic `OVL1`, then `H`, `W`, `L` as little-endian u32)
//! followed by `H·W·L` label bytes with `k` varying fastest, then `j`, then `i`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

pub const VOLUME_MAGIC: &[u8; 4] = b"OVL1";
pub const VOLUME_HEADER_LEN: usize = 16;

pub fn encode_volume(vol: &LabelVolume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(VOLUME_HEADER_LEN + vol.data().len());
    out.extend_from_slice(VOLUME_MAGIC);
    for d in vol.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(vol.data());
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<LabelVolume> {
    if bytes.len() < VOLUME_HEADER_LEN {
        return Err(Error::Truncated {
            expected: VOLUME_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::Format(format!("bad volume magic {:?}", &bytes[..4])));
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as u64;
    let dims = [dim(4), dim(8), dim(12)];
    let expected = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_add(VOLUME_HEADER_LEN as u64))
        .ok_or_else(|| Error::Format(format!("volume dims {dims:?} overflow")))?;
    if (bytes.len() as u64) != expected {
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len() as u64,
            });
        }
        return Err(Error::Format(format!(
            "volume file has {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let dims = dims.map(|d| d as usize);
    LabelVolume::from_parts(dims, bytes[VOLUME_HEADER_LEN..].to_vec())
}

pub fn write_volume(path: &Path, vol: &LabelVolume) -> Result<()> {
    std::fs::write(path, encode_volume(vol)?)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<LabelVolume> {
    decode_volume(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_class_three_cube() {
        let bytes = encode_volume(&LabelVolume::filled([2, 2, 2], 3)).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(&bytes[..4], b"OVL1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert!(bytes[16..].iter().all(|&b| b == 3));
    }

    #[test]
    fn index_order() {
        let mut v = LabelVolume::filled([2, 3, 4], 0);
        v.set([1, 2, 3], 9);
        v.set([0, 0, 1], 7);
        let bytes = encode_volume(&v).unwrap();
        assert_eq!(bytes[16 + 1], 7);
        assert_eq!(bytes[16 + (1 * 3 + 2) * 4 + 3], 9);
        assert_eq!(decode_volume(&bytes).unwrap(), v);
    }

    #[test]
    fn errors() {
        let bytes = encode_volume(&LabelVolume::filled([2, 2, 2], 1)).unwrap();
        match decode_volume(&bytes[..20]) {
            Err(Error::Truncated { expected, actual }) => assert_eq!((expected, actual), (24, 20)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_volume(&bytes[..5]), Err(Error::Truncated { expected: 16, .. })));
        let mut bad = bytes.clone();
        bad[3] = b'2';
        assert!(matches!(decode_volume(&bad), Err(Error::Format(_))));
        let mut big = bytes.clone();
        big.push(0);
        assert!(matches!(decode_volume(&big), Err(Error::Format(_))));
        let mut huge = bytes[..16].to_vec();
        huge[4..16].copy_from_slice(&[0xff; 12]);
        assert!(matches!(decode_volume(&huge), Err(Error::Format(_))));
    }
}
