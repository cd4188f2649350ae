//! Binary 8-bit Netpbm images: P5 (grayscale) and P6 (RGB).
//!
//! Pixels map to `[0, 1]` as `byte / 255` on read and back with
//! round-half-up on write, so 8-bit data round-trips exactly.

use std::path::Path;

use crate::error::{Error, FileFormat, Result};
use crate::tensor::Tensor;

fn err(field: &str) -> Error {
    Error::format(FileFormat::Image, field)
}

/// `[0, 1]` real to byte, round half up, saturating.
pub fn to_byte(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode_image(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.dims3()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::invalid(format!("images must have 1 or 3 channels, got {c}"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(c * h * w);
    let plane = h * w;
    for p in 0..plane {
        for k in 0..c {
            out.push(to_byte(image.data()[k * plane + p]));
        }
    }
    Ok(out)
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(err(if self.pos >= self.bytes.len() { "truncated header" } else { field }));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(field))
    }
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(err("bad magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        _ => return Err(err("unsupported magic")),
    };
    let mut header = Header { bytes, pos: 2 };
    let width = header.number("bad width")?;
    let height = header.number("bad height")?;
    let maxval = header.number("bad maxval")?;
    if maxval != 255 {
        return Err(err("unsupported maxval"));
    }
    if width == 0 || height == 0 {
        return Err(err("empty extent"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(header.pos) {
        Some(b) if b.is_ascii_whitespace() => header.pos += 1,
        Some(_) => return Err(err("bad maxval")),
        None => return Err(err("truncated pixel data")),
    }
    let raster = &bytes[header.pos..];
    let plane = width * height;
    if raster.len() < plane * channels {
        return Err(err("truncated pixel data"));
    }
    let mut data = vec![0.0; channels * plane];
    for p in 0..plane {
        for k in 0..channels {
            data[k * plane + p] = raster[p * channels + k] as f64 / 255.0;
        }
    }
    Tensor::new(vec![channels, height, width], data)
}

pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_image(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let img = Tensor::from_fn3(3, 1, 2, |c, _, j| (c * 2 + j) as f64 / 255.0);
        let bytes = encode_image(&img).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 2, 4, 1, 3, 5]);
    }

    #[test]
    fn rounds_half_up() {
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 0);
        assert_eq!(to_byte(1.7), 255);
        assert_eq!(to_byte(-0.2), 0);
    }

    #[test]
    fn bad_inputs_name_their_field() {
        let msg = |b: &[u8]| decode_image(b).unwrap_err().to_string();
        assert!(msg(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").contains("unsupported maxval"));
        assert!(msg(b"P3\n1 1\n255\n0 0 0\n").contains("unsupported magic"));
        assert!(msg(b"JFIF").contains("bad magic"));
        assert!(msg(b"P5\n2 2\n255\n\0\0\0").contains("truncated pixel data"));
        assert!(msg(b"P6\n2").contains("truncated header"));
        assert_eq!(decode_image(b"P3\n").unwrap_err().category(), "image-format");
    }

    #[test]
    fn comments_are_skipped() {
        let img = decode_image(b"P5\n# made by hand\n1 2\n255\n\x00\xff").unwrap();
        assert_eq!(img.shape(), &[1, 2, 1]);
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn eight_bit_round_trip(
            (c, h, w, raster) in (prop::sample::select(vec![1usize, 3]), 1usize..6, 1usize..6)
                .prop_flat_map(|(c, h, w)| (Just(c), Just(h), Just(w), prop::collection::vec(any::<u8>(), c * h * w)))
        ) {
            let magic = if c == 1 { "P5" } else { "P6" };
            let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&raster);
            let img = decode_image(&bytes).unwrap();
            prop_assert_eq!(encode_image(&img).unwrap(), bytes);
        }
    }
}
