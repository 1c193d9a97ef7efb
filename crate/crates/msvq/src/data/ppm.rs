//! Binary P6 portable-pixmap frames, maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit RGB image with interleaved samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triplets, `3 * width * height` bytes.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Data("image dims must be positive".into()));
        }
        if data.len() != 3 * width * height {
            return Err(Error::Data(format!(
                "image data is {} bytes, expected {}",
                data.len(),
                3 * width * height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn sample(&self, channel: usize, row: usize, col: usize) -> u8 {
        self.data[3 * (row * self.width + col) + channel]
    }
}

/// Skips whitespace and `#` comments, then reads one ASCII decimal token.
fn token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::Data("malformed pixmap header: expected integer".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data("malformed pixmap header: bad integer".into()))
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Data("not a binary P6 pixmap".into()));
    }
    let mut pos = 2;
    let width = token(bytes, &mut pos)?;
    let height = token(bytes, &mut pos)?;
    let maxval = token(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Data(format!("unsupported maxval {maxval}, expected 255")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Data("malformed pixmap header: missing separator".into()));
    }
    pos += 1;
    let expected = 3usize
        .checked_mul(width)
        .and_then(|v| v.checked_mul(height))
        .ok_or_else(|| Error::Data("pixmap dims overflow".into()))?;
    let body = &bytes[pos..];
    if body.len() < expected {
        return Err(Error::Data(format!(
            "pixmap truncated: {} of {expected} sample bytes",
            body.len()
        )));
    }
    if body.len() > expected {
        return Err(Error::Data("trailing bytes after pixmap samples".into()));
    }
    Image::new(width, height, body.to_vec())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    parse_ppm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn ppm_bytes(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, ppm_bytes(image))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
