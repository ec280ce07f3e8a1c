//! Flat little-endian weight files.
//!
//! ```text
//! "NRMK1\n"
//! u32 entry count
//! per entry: u16 name length, name (UTF-8), u32 T, u32 C, u32 W, u32 H,
//!            T·C·W·H f64 values in tensor order
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::tensor::{Shape, Tensor4};

pub const MAGIC: &[u8; 6] = b"NRMK1\n";

pub type NamedTensors = Vec<(String, Tensor4)>;

pub fn encode_weights(entries: &[(String, Tensor4)]) -> Result<Vec<u8>> {
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::InvalidArgument(format!("too many entries: {}", entries.len())))?;
    let mut seen = HashSet::new();
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate tensor name `{name}`"
            )));
        }
        let len = u16::try_from(name.len()).map_err(|_| {
            Error::InvalidArgument(format!("tensor name too long: {} bytes", name.len()))
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            let d = u32::try_from(d).map_err(|_| {
                Error::InvalidArgument(format!("dimension {d} of `{name}` exceeds u32"))
            })?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.reserve(t.len() * 8);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::FormatError {
                offset: self.bytes.len() as u64,
                message: format!("truncated while reading {what}"),
            }),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<NamedTensors> {
    if !bytes.starts_with(MAGIC) {
        return Err(Error::FormatError {
            offset: 0,
            message: "bad magic, expected `NRMK1`".into(),
        });
    }
    let mut cur = Cursor {
        bytes,
        pos: MAGIC.len(),
    };
    let count = cur.u32("entry count")?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let at = cur.pos as u64;
        let len = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::FormatError {
                offset: at,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::FormatError {
                offset: at,
                message: format!("duplicate tensor name `{name}`"),
            });
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = cur.u32("dimensions")? as usize;
        }
        let shape =
            Shape::new(dims[0], dims[1], dims[2], dims[3]).map_err(|e| Error::FormatError {
                offset: at,
                message: format!("`{name}`: {e}"),
            })?;
        let n = shape.numel();
        let raw = cur.take(n.saturating_mul(8), "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor4::from_vec(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::FormatError {
            offset: cur.pos as u64,
            message: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Ok(out)
}

pub fn save_weights(path: impl AsRef<Path>, entries: &[(String, Tensor4)]) -> Result<()> {
    fs::write(path, encode_weights(entries)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::InputError {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_weights(&bytes)
}

pub fn save_generator(path: impl AsRef<Path>, g: &Generator) -> Result<()> {
    save_weights(path, &g.to_named())
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<Generator> {
    Generator::from_named(&load_weights(path)?)
}
