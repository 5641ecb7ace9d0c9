//! Binary Netpbm (P5 greymap, P6 pixmap) reading and writing.
//!
//! Images are exchanged as channels-first `f32` tensors with values in
//! `[0, 1]`. Writers always emit `maxval = 255`; readers accept any maxval
//! up to 65535 (two bytes per sample, big-endian, above 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn header(magic: &str, width: usize, height: usize) -> Vec<u8> {
    format!("{magic}\n{width} {height}\n255\n").into_bytes()
}

/// P5 bytes for an `[h, w]` (or `[1, h, w]`) map.
pub fn encode_pgm(values: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match *values.shape() {
        [h, w] | [1, h, w] => (h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "pgm",
                shape: values.shape().to_vec(),
                reason: "expected [h, w]".into(),
            })
        }
    };
    let mut out = header("P5", w, h);
    out.extend(values.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// P6 bytes for a `[3, h, w]` image.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::InvalidShape {
            op: "ppm",
            shape: image.shape().to_vec(),
            reason: "expected [3, h, w]".into(),
        });
    };
    let plane = h * w;
    let d = image.data();
    let mut out = header("P6", w, h);
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Netpbm(format!("missing or invalid {what}")))
    }
}

/// Decodes P5 or P6 bytes into a `[channels, h, w]` tensor.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Netpbm("expected P5 or P6 magic".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Netpbm("zero image extent".into()));
    }
    if !(1..=65535).contains(&maxval) {
        return Err(Error::Netpbm(format!("maxval {maxval} out of range")));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Netpbm("missing whitespace after maxval".into()));
    }
    let raster = &bytes[cur.pos + 1..];
    let sample_bytes = if maxval > 255 { 2 } else { 1 };
    let plane = width * height;
    let needed = plane * channels * sample_bytes;
    if raster.len() < needed {
        return Err(Error::Netpbm(format!(
            "raster has {} bytes, expected {needed}",
            raster.len()
        )));
    }
    let maxval = maxval as f32;
    let mut data = vec![0.0f32; channels * plane];
    for i in 0..plane {
        for c in 0..channels {
            let k = (i * channels + c) * sample_bytes;
            let raw = if sample_bytes == 2 {
                u16::from_be_bytes([raster[k], raster[k + 1]]) as f32
            } else {
                raster[k] as f32
            };
            data[c * plane + i] = (raw / maxval).min(1.0);
        }
    }
    Tensor::new([channels, height, width], data)
}

pub fn write_pgm(path: impl AsRef<Path>, values: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(values)?).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Reads a P5 or P6 file as `[channels, h, w]`.
pub fn read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a P5 file as an `[h, w]` map.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let t = read(path)?;
    match *t.shape() {
        [1, h, w] => t.reshape([h, w]),
        _ => Err(Error::Netpbm("expected a greymap (P5)".into())),
    }
}

/// Reads a P6 file, or a P5 file replicated to three channels.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let t = read(path)?;
    match *t.shape() {
        [3, _, _] => Ok(t),
        [1, h, w] => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(t.data());
            }
            Tensor::new([3, h, w], data)
        }
        _ => unreachable!("decode yields 1 or 3 channels"),
    }
}
