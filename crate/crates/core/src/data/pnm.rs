//! Binary 8-bit PGM (P5) and PPM (P6) images.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit pixels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM (R, G, B).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Pnm {
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count does not match extents");
        Pnm {
            width,
            height,
            channels: 1,
            pixels,
        }
    }

    pub fn rgb(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), 3 * width * height, "pixel count does not match extents");
        Pnm {
            width,
            height,
            channels: 3,
            pixels,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let magic = bytes.get(..2).unwrap_or(bytes);
        let channels = match magic {
            b"P5" => 1,
            b"P6" => 3,
            _ => {
                return Err(Error::Format(format!(
                    "unsupported image magic {:?} (expected binary PGM P5 or PPM P6)",
                    String::from_utf8_lossy(magic)
                )))
            }
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for f in &mut fields {
            *f = header_field(bytes, &mut pos)?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit images are supported, maxval {maxval}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Format("image with zero extent".into()));
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let len = width * height * channels;
        let pixels = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::Format(format!("truncated raster: need {len} bytes")))?
            .to_vec();
        Ok(Pnm {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

fn header_field(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::Format("truncated image header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("malformed image header".into()))
}
