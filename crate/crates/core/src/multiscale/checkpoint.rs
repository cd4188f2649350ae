//! Binary checkpoints. Little-endian throughout:
//!
//! ```text
//! "ACAM" u32 version=1 u32 scales
//! per scale:
//!   u32 layers, per layer: u32 c_out u32 c_in f64[c_out*c_in*9] f64[c_out]
//!   u32 n u32 L u32 C, per classifier: f64[(L+1)*C] f64[L+1]
//!   f64[L*C] f64[L]            object classifier
//! ```
//!
//! Inference settings are not stored; the reader supplies them.

use std::path::Path;

use super::{InferenceSettings, MultiScaleModel, ScaleModel};
use crate::attention::{LocalClassifier, LocalClassifierBank};
use crate::backbone::{ConvBlock, ToyBackbone, KERNEL};
use crate::error::{Error, FileFormat, Result};
use crate::losses::ObjectClassifier;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ACAM";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &MultiScaleModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, model.scales.len());
    for s in &model.scales {
        put_u32(&mut out, s.backbone.layers.len());
        for layer in &s.backbone.layers {
            put_u32(&mut out, layer.c_out);
            put_u32(&mut out, layer.c_in);
            put_f64s(&mut out, &layer.weights);
            put_f64s(&mut out, &layer.bias);
        }
        put_u32(&mut out, s.bank.len());
        put_u32(&mut out, s.bank.categories());
        put_u32(&mut out, s.bank.channels());
        for clf in &s.bank.classifiers {
            put_f64s(&mut out, clf.weights.data());
            put_f64s(&mut out, clf.bias.data());
        }
        put_f64s(&mut out, s.object.weights.data());
        put_f64s(&mut out, s.object.bias.data());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

/// Refuses counts that could not possibly fit in the remaining payload.
const MAX_DIM: usize = 1 << 20;

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(FileFormat::Checkpoint, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn dim(&mut self, what: &str) -> Result<usize> {
        let v = self.u32(what)?;
        if v == 0 || v > MAX_DIM {
            return Err(Error::format(FileFormat::Checkpoint, format!("implausible {what} {v}")));
        }
        Ok(v)
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| Error::format(FileFormat::Checkpoint, format!("{what} size overflow")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }
}

fn structural(e: Error) -> Error {
    match e {
        Error::InvalidInput(msg) => Error::format(FileFormat::Checkpoint, msg),
        other => other,
    }
}

fn decode_scale(r: &mut Reader, index: usize) -> Result<ScaleModel> {
    let num_layers = r.dim("layer count")?;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let c_out = r.dim("layer output channels")?;
        let c_in = r.dim("layer input channels")?;
        let weights = r.f64s(c_out * c_in * KERNEL * KERNEL, "layer weights")?;
        let bias = r.f64s(c_out, "layer bias")?;
        layers.push(ConvBlock {
            c_in,
            c_out,
            weights,
            bias,
        });
    }
    let backbone = ToyBackbone::new(layers).map_err(structural)?;
    let n = r.dim("classifier count")?;
    let l = r.dim("category count")?;
    let c = r.dim("feature channels")?;
    let mut classifiers = Vec::with_capacity(n);
    for _ in 0..n {
        let w = r.f64s((l + 1) * c, "classifier weights")?;
        let b = r.f64s(l + 1, "classifier bias")?;
        classifiers.push(LocalClassifier {
            weights: Tensor::new(vec![l + 1, c], w)?,
            bias: Tensor::from_vec(b),
        });
    }
    let bank = LocalClassifierBank::new(l, c, classifiers).map_err(structural)?;
    let ow = r.f64s(l * c, "object weights")?;
    let ob = r.f64s(l, "object bias")?;
    let object = ObjectClassifier::new(Tensor::new(vec![l, c], ow)?, Tensor::from_vec(ob)).map_err(structural)?;
    let model = ScaleModel {
        backbone,
        bank,
        object,
        scale_index: index,
    };
    model.validate().map_err(structural)?;
    Ok(model)
}

pub fn decode_checkpoint(bytes: &[u8], settings: InferenceSettings) -> Result<MultiScaleModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| Error::format(FileFormat::Checkpoint, "bad magic"))? != MAGIC {
        return Err(Error::format(FileFormat::Checkpoint, "bad magic"));
    }
    let version = r.u32("header")?;
    if version != VERSION as usize {
        return Err(Error::format(FileFormat::Checkpoint, format!("unsupported version {version}")));
    }
    let num_scales = r.dim("scale count")?;
    let scales = (0..num_scales)
        .map(|s| decode_scale(&mut r, s))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::format(FileFormat::Checkpoint, "trailing bytes after payload"));
    }
    MultiScaleModel::new(scales, settings).map_err(structural)
}

pub fn write_checkpoint(path: &Path, model: &MultiScaleModel) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path, settings: InferenceSettings) -> Result<MultiScaleModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multiscale::ModelSpec;

    fn model() -> MultiScaleModel {
        let spec = ModelSpec {
            widths: vec![3, 4, 5],
            n_classifiers: 2,
            categories: 3,
        };
        let scales = (0..2).map(|s| ScaleModel::init(&spec, s, s as u64 + 1).unwrap()).collect();
        MultiScaleModel::new(scales, InferenceSettings::default()).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        let back = decode_checkpoint(&bytes, m.settings).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_checkpoint(&model());
        assert_eq!(&bytes[..4], b"ACAM");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &4u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
    }

    fn field(bytes: &[u8]) -> String {
        match decode_checkpoint(bytes, InferenceSettings::default()).unwrap_err() {
            Error::Format {
                format: FileFormat::Checkpoint,
                field,
            } => field,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs_are_named() {
        let good = encode_checkpoint(&model());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(field(&bad), "bad magic");
        assert_eq!(field(b"AC"), "bad magic");
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(field(&bad), "unsupported version 2");
        assert!(field(&good[..good.len() - 3]).starts_with("truncated"));
        let mut long = good.clone();
        long.push(0);
        assert_eq!(field(&long), "trailing bytes after payload");
        let mut zero = good.clone();
        zero[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(field(&zero), "implausible scale count 0");
    }

    #[test]
    fn mismatched_channels_rejected() {
        let mut bytes = encode_checkpoint(&model());
        // Second layer's c_in sits after the first layer's payload.
        let first = 4 * 3 * 9 * 8 + 4 * 8;
        let at = 16 + 8 + first + 4;
        bytes[at..at + 4].copy_from_slice(&7u32.to_le_bytes());
        assert_eq!(decode_checkpoint(&bytes, InferenceSettings::default()).unwrap_err().category(), "checkpoint-format");
    }
}
