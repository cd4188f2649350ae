//! `FMAP` feature-map files: magic, `u32` version, `u32` C/H/W, then
//! `C*H*W` little-endian `f32` values, channel-major, no padding.

use std::path::Path;

use crate::error::{Error, FileFormat, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FMAP";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4;

fn err(field: &str) -> Error {
    Error::format(FileFormat::FeatureMap, field)
}

pub fn encode_feature_maps(tensor: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = tensor.dims3()?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * tensor.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_feature_maps(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(err("bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(err("truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != VERSION {
        return Err(err("unsupported version"));
    }
    let (c, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let count = c
        .checked_mul(h)
        .and_then(|n| n.checked_mul(w))
        .ok_or_else(|| err("extents overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < count * 4 {
        return Err(err("truncated payload"));
    }
    if payload.len() > count * 4 {
        return Err(err("trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![c, h, w], data)
}

pub fn write_feature_maps(path: &Path, tensor: &Tensor) -> Result<()> {
    let bytes = encode_feature_maps(tensor)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_maps(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_maps(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let t = Tensor::new(vec![1, 1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_feature_maps(&t).unwrap();
        assert_eq!(&bytes[..4], b"FMAP");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[20..24], &1f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &(-2.5f32).to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn bad_magic() {
        let t = Tensor::zeros(&[1, 1, 1]);
        let mut bytes = encode_feature_maps(&t).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert_eq!(decode_feature_maps(&bytes).unwrap_err().to_string(), "feature-map format error: bad magic");
    }

    #[test]
    fn bad_version() {
        let mut bytes = encode_feature_maps(&Tensor::zeros(&[1, 1, 1])).unwrap();
        bytes[4] = 2;
        assert!(decode_feature_maps(&bytes).unwrap_err().to_string().contains("unsupported version"));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_feature_maps(&Tensor::zeros(&[2, 2, 2])).unwrap();
        bytes.truncate(HEADER_LEN + 7 * 4);
        let e = decode_feature_maps(&bytes).unwrap_err();
        assert!(e.to_string().contains("truncated payload"));
        assert_eq!(e.category(), "feature-map-format");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.fmap");
        let t = Tensor::from_fn3(4, 2, 2, |c, i, j| (c as f64 - 1.3) * (i as f64 + 0.7) / (j as f64 + 3.1));
        write_feature_maps(&path, &t).unwrap();
        let back = read_feature_maps(&path).unwrap();
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_f32_exact(
            (c, h, w, vals) in (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(c, h, w)| {
                (Just(c), Just(h), Just(w), prop::collection::vec(-1e6f64..1e6, c * h * w))
            })
        ) {
            let t = Tensor::new(vec![c, h, w], vals).unwrap();
            let back = decode_feature_maps(&encode_feature_maps(&t).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in t.data().iter().zip(back.data()) {
                prop_assert_eq!(*a as f32 as f64, *b);
            }
        }
    }
}
