//! Binary PPM (`P6`, maxval 255) images.

use std::fs;
use std::path::Path;

use atnf_core::Tensor;

use crate::error::{Error, Result};

/// 8-bit RGB image, rows top to bottom, pixels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Ppm(format!(
                "{width}x{height} image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// `[H, W, 3]` with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| b as f32 / 255.0).collect();
        Tensor::new([self.height, self.width, 3], data).expect("dimensions checked on construction")
    }

    /// Inverse of [`RgbImage::to_tensor`]; values are clamped to `[0, 1]`
    /// and rounded to the nearest level.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[h, w, 3] = t.shape() else {
            return Err(Error::Ppm(format!("expected [H, W, 3], got {:?}", t.shape())));
        };
        let data = t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::new(w, h, data)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        if bytes.get(..2) != Some(b"P6") {
            return Err(Error::Ppm("missing P6 magic".into()));
        }
        pos += 2;
        let mut fields = [0usize; 3];
        for f in &mut fields {
            *f = header_number(bytes, &mut pos)?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(Error::Ppm(format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(Error::Ppm("header not terminated".into())),
        }
        let need = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::Ppm("dimensions overflow".into()))?;
        let raster = bytes
            .get(pos..pos + need)
            .ok_or_else(|| Error::Ppm(format!("raster truncated: need {need} bytes, have {}", bytes.len() - pos)))?;
        Self::new(width, height, raster.to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| e.context(path))
    }
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Ppm("header truncated".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Ppm(format!("bad header field at byte {start}")))
}
