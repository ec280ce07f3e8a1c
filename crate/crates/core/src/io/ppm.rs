//! Binary PPM (`P6`, maxval 255) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

/// An 8-bit RGB image, row-major with the origin at the top left.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    /// `width * height * 3` bytes, `r g b` per pixel.
    pub pixels: Vec<u8>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<ImageRgb> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidShape(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "{width}x{height} image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(ImageRgb {
            width,
            height,
            pixels,
        })
    }

    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// `(1, 3, W, H)` with `tensor[0, c, x, y] = pixel / 255`.
    pub fn to_tensor(&self) -> Tensor4 {
        let shape = Shape::new(1, 3, self.width, self.height).expect("non-empty image");
        let mut t = Tensor4::zeros(shape);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.rgb(x, y);
                for (c, &v) in px.iter().enumerate() {
                    t.set(0, c, x, y, f64::from(v) / 255.0);
                }
            }
        }
        t
    }

    /// Inverse of [`ImageRgb::to_tensor`], `round(clamp(v, 0, 1) · 255)`.
    /// NaN maps to 0.
    pub fn from_tensor(t: &Tensor4) -> Result<ImageRgb> {
        let s = t.shape();
        if s.t != 1 || s.c != 3 {
            return Err(Error::InvalidShape(format!(
                "image tensors are (1, 3, W, H), got {s}"
            )));
        }
        let mut pixels = vec![0u8; s.w * s.h * 3];
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    let v = t.get(0, c, x, y);
                    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                    pixels[(y * s.w + x) * 3 + c] = (v * 255.0).round() as u8;
                }
            }
        }
        ImageRgb::new(s.w, s.h, pixels)
    }
}

pub fn encode_ppm(img: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::FormatError {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self
                    .bytes
                    .get(self.pos)
                    .is_some_and(|&b| b != b'\n' && b != b'\r')
                {
                    self.pos += 1;
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
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::FormatError {
                offset: start as u64,
                message: format!("{what} out of range"),
            })
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRgb> {
    let mut h = Header { bytes, pos: 0 };
    if !bytes.starts_with(b"P6") {
        return Err(h.fail("bad magic, expected `P6`"));
    }
    h.pos = 2;
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_space_and_comments();
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::FormatError {
            offset: maxval_at as u64,
            message: format!("maxval {maxval} unsupported, only 255"),
        });
    }
    if width == 0 || height == 0 {
        return Err(h.fail(format!("empty image {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the payload
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(h.fail("expected whitespace after maxval"));
    }
    h.pos += 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| h.fail("image dimensions overflow"))?;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(Error::FormatError {
            offset: bytes.len() as u64,
            message: format!("truncated payload: {} of {need} bytes", payload.len()),
        });
    }
    ImageRgb::new(width, height, payload[..need].to_vec())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageRgb> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::InputError {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_ppm(&bytes)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageRgb) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}
