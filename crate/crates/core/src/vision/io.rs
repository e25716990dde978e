//! Feature file format: `"ACLF"`, little-endian `u32` version, `d_a`, `n_h`,
//! `n_w`, then `d_a·n_h·n_w` little-endian `f32` values in `(c, h, w)` order.

use std::fs;
use std::path::Path;

use super::FeatureMap;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"ACLF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

pub fn encode_features(map: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * map.values().len());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [
        FEATURE_VERSION,
        map.channels() as u32,
        map.height() as u32,
        map.width() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in map.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let chunk = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::format(offset as u64, "truncated header"))?;
    Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"ACLF\""));
    }
    let version = read_u32(bytes, 4)?;
    if version != FEATURE_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let c = read_u32(bytes, 8)? as usize;
    let h = read_u32(bytes, 12)? as usize;
    let w = read_u32(bytes, 16)? as usize;
    for (off, e) in [(8, c), (12, h), (16, w)] {
        if e == 0 {
            return Err(Error::format(off, "extent must be positive"));
        }
    }
    let count = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .filter(|n| n.checked_mul(4).is_some_and(|b| b.checked_add(HEADER_LEN).is_some()))
        .ok_or_else(|| Error::format(8, "extent product overflows"))?;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() < expected {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload, expected {expected} bytes"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::format(expected as u64, "trailing bytes after payload"));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    FeatureMap::new(c, h, w, values).map_err(|e| Error::format(HEADER_LEN as u64, e.to_string()))
}

pub fn save_features(map: &FeatureMap, path: &Path) -> Result<()> {
    fs::write(path, encode_features(map)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn golden_bytes() {
        let map = FeatureMap::new(1, 1, 2, vec![1.0, -0.5]).unwrap();
        let bytes = encode_features(&map);
        let mut expect = b"ACLF".to_vec();
        for v in [1u32, 1, 1, 2] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        expect.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xbf]);
        assert_eq!(bytes, expect);
    }

    fn offset_of(err: Error) -> u64 {
        match err {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn header_errors_carry_offsets() {
        let map = FeatureMap::new(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let good = encode_features(&map);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset_of(decode_features(&bad).unwrap_err()), 0);

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(offset_of(decode_features(&bad).unwrap_err()), 4);

        let mut bad = good.clone();
        bad[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(offset_of(decode_features(&bad).unwrap_err()), 12);

        let mut bad = good.clone();
        for off in [8, 12, 16] {
            bad[off..off + 4].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode_features(&bad), Err(Error::Format { .. })));

        let truncated = &good[..good.len() - 2];
        assert_eq!(offset_of(decode_features(truncated).unwrap_err()), truncated.len() as u64);
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_at_f32(
            (c, h, w, vals) in (1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(c, h, w)| {
                (Just(c), Just(h), Just(w), proptest::collection::vec(-1e6f32..1e6f32, c * h * w))
            })
        ) {
            let values: Vec<f64> = vals.iter().map(|v| *v as f64).collect();
            let map = FeatureMap::new(c, h, w, values).unwrap();
            let back = decode_features(&encode_features(&map)).unwrap();
            prop_assert_eq!(back, map);
        }
    }
}
