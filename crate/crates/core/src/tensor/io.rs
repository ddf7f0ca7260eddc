//! FTNS tensor files.
//!
//! Little-endian layout: magic `FTNS`, `u32` version (1), `u32` ndim,
//! `ndim` x `u32` dims ordered (channels, height, width), then the f32
//! payload in channel-major row-major order. Two-dimensional files
//! (height, width) are read as single-channel volumes.

use std::fs;
use std::path::Path;

use super::{FeatureVolume, TensorError};

const MAGIC: &[u8; 4] = b"FTNS";
const VERSION: u32 = 1;

pub fn encode_tensor(v: &FeatureVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * v.data().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    for d in [v.channels(), v.height(), v.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32, TensorError> {
        let end = self.pos + 4;
        let b = self.bytes.get(self.pos..end).ok_or(TensorError::Truncated {
            expected: end,
            actual: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<FeatureVolume, TensorError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(TensorError::BadMagic);
    }
    let mut cur = Cursor { bytes, pos: 4 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(TensorError::UnsupportedVersion(version));
    }
    let ndim = cur.u32()?;
    let (channels, height, width) = match ndim {
        2 => (1, cur.u32()? as usize, cur.u32()? as usize),
        3 => (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize),
        n => return Err(TensorError::BadShape(format!("ndim {n}, expected 2 or 3"))),
    };
    let count = channels
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .ok_or(TensorError::DimensionOverflow)?;
    let payload = count.checked_mul(4).ok_or(TensorError::DimensionOverflow)?;
    let expected = cur.pos.checked_add(payload).ok_or(TensorError::DimensionOverflow)?;
    if bytes.len() < expected {
        return Err(TensorError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(TensorError::TrailingBytes(bytes.len() - expected));
    }
    let data = bytes[cur.pos..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    FeatureVolume::new(width, height, channels, data)
}

pub fn write_tensor(v: &FeatureVolume, path: impl AsRef<Path>) -> Result<(), TensorError> {
    fs::write(path, encode_tensor(v))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureVolume, TensorError> {
    decode_tensor(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn header(dims: &[u32]) -> Vec<u8> {
        let mut b = MAGIC.to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        b
    }

    #[test]
    fn layout_is_bit_exact() {
        let v = FeatureVolume::new(2, 1, 2, vec![1.0, 2.0, 3.0, -0.5]).unwrap();
        let mut expect = header(&[2, 1, 2]);
        for x in [1.0f32, 2.0, 3.0, -0.5] {
            expect.extend_from_slice(&x.to_le_bytes());
        }
        assert_eq!(encode_tensor(&v), expect);
    }

    #[test]
    fn wrong_magic() {
        let mut b = encode_tensor(&FeatureVolume::zeros(1, 1, 1));
        b[0] = b'X';
        assert!(matches!(decode_tensor(&b), Err(TensorError::BadMagic)));
        assert!(matches!(decode_tensor(b"FT"), Err(TensorError::BadMagic)));
    }

    #[test]
    fn wrong_version() {
        let mut b = encode_tensor(&FeatureVolume::zeros(1, 1, 1));
        b[4] = 2;
        assert!(matches!(decode_tensor(&b), Err(TensorError::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_payload() {
        let mut b = header(&[1, 2, 2]);
        for _ in 0..3 {
            b.extend_from_slice(&1f32.to_le_bytes());
        }
        assert!(matches!(decode_tensor(&b), Err(TensorError::Truncated { .. })));
        // Truncated inside the header as well.
        assert!(matches!(
            decode_tensor(&header(&[1, 2, 2])[..14]),
            Err(TensorError::Truncated { .. })
        ));
    }

    #[test]
    fn overflowing_dims() {
        let b = header(&[u32::MAX, u32::MAX, u32::MAX]);
        let r = decode_tensor(&b);
        // On 64-bit hosts the product fits usize only up to the byte count.
        assert!(matches!(
            r,
            Err(TensorError::DimensionOverflow) | Err(TensorError::Truncated { .. })
        ));
        let b = header(&[u32::MAX, u32::MAX, u32::MAX, 1]);
        assert!(matches!(decode_tensor(&b), Err(TensorError::BadShape(_))));
    }

    #[test]
    fn two_dim_files_are_single_channel() {
        let mut b = header(&[1, 2]);
        b.extend_from_slice(&4f32.to_le_bytes());
        b.extend_from_slice(&5f32.to_le_bytes());
        let v = decode_tensor(&b).unwrap();
        assert_eq!((v.channels(), v.height(), v.width()), (1, 1, 2));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ftns");
        let v = FeatureVolume::from_fn(3, 2, 2, |c, x, y| (c * 100 + y * 10 + x) as f32 * 0.1);
        write_tensor(&v, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(encode_tensor(&back), bytes);
    }

    proptest! {
        #[test]
        fn round_trip_preserves_payload_bytes(
            w in 1usize..6, h in 1usize..6, c in 1usize..4,
            seed in any::<u64>(),
        ) {
            let mut s = seed;
            let v = FeatureVolume::from_fn(w, h, c, |_, _, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits(((s >> 41) as u32) | 0x3f00_0000) * if s & 1 == 0 { 1.0 } else { -1.0 }
            });
            let bytes = encode_tensor(&v);
            let back = decode_tensor(&bytes).unwrap();
            prop_assert_eq!(encode_tensor(&back), bytes);
        }
    }
}
