//! The `.msvq` latent container: a fixed header followed by a DEFLATE
//! (zlib-framed) payload of codebook indices.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MSVQ1"                       5 bytes
//! version                       u8, currently 1
//! clip dims T, H, W             u16 each
//! levels                        u8 (1 or 2)
//! per level, top first:
//!   grid dims T', H', W'        u16 each
//!   alphabet size K             u32
//! payload                       zlib stream of indices as u16,
//!                               levels concatenated top first,
//!                               each grid in row-major (T',H',W') order
//! ```
//!
//! Indices are stored at a fixed 16-bit width (hence K <= 65536); DEFLATE
//! reclaims most of the slack and the zlib checksum covers the payload.

use std::io::Write;

use flate2::write::ZlibEncoder;
use flate2::{Compression, Decompress, FlushDecompress, Status};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::quantizer::{IndexGrid, Level};

pub const MAGIC: [u8; 5] = *b"MSVQ1";
pub const VERSION: u8 = 1;

/// Upper bound on total indices per container; keeps a corrupt header from
/// provoking a huge allocation.
const MAX_INDICES: usize = 1 << 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelHeader {
    pub grid_dims: (usize, usize, usize),
    pub k: u32,
}

impl LevelHeader {
    pub fn index_count(&self) -> usize {
        self.grid_dims.0 * self.grid_dims.1 * self.grid_dims.2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub clip_dims: (usize, usize, usize),
    /// One entry per level, top first.
    pub levels: Vec<LevelHeader>,
}

impl BitstreamHeader {
    pub fn byte_len(&self) -> usize {
        5 + 1 + 6 + 1 + 10 * self.levels.len()
    }

    pub fn index_count(&self) -> usize {
        self.levels.iter().map(LevelHeader::index_count).sum()
    }
}

/// Result of parsing a container: header fields, index grids, and the size
/// of the compressed payload (for rate accounting).
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedBitstream {
    pub header: BitstreamHeader,
    pub top: Option<IndexGrid>,
    pub bottom: IndexGrid,
    pub payload_bytes: usize,
}

fn check_dims_u16(what: &str, dims: (usize, usize, usize)) -> Result<()> {
    for d in [dims.0, dims.1, dims.2] {
        if d == 0 || d > u16::MAX as usize {
            return Err(Error::Bitstream(format!(
                "{what} dims {dims:?} outside 1..=65535"
            )));
        }
    }
    Ok(())
}

fn check_grid(grid: &IndexGrid, k: u32, clip_dims: (usize, usize, usize)) -> Result<()> {
    let dims = grid.indices.dim();
    check_dims_u16("grid", dims)?;
    if dims.0 > clip_dims.0 || dims.1 > clip_dims.1 || dims.2 > clip_dims.2 {
        return Err(Error::Bitstream(format!(
            "grid {dims:?} larger than clip {clip_dims:?}"
        )));
    }
    if k == 0 || k > 65536 {
        return Err(Error::Bitstream(format!("alphabet size {k} outside 1..=65536")));
    }
    if let Some(&bad) = grid.indices.iter().find(|&&i| i >= k) {
        return Err(Error::Bitstream(format!("index {bad} out of range for alphabet {k}")));
    }
    Ok(())
}

fn push_u16(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u16).to_le_bytes());
}

/// Serializes quantized latents into container bytes. `top` is absent for
/// single-level models. Deterministic for fixed inputs.
pub fn serialize(
    top: Option<(&IndexGrid, u32)>,
    bottom: (&IndexGrid, u32),
    clip_dims: (usize, usize, usize),
) -> Result<Vec<u8>> {
    check_dims_u16("clip", clip_dims)?;
    if let Some((grid, k)) = top {
        if grid.level != Level::Top {
            return Err(Error::Bitstream("first grid must be the top level".into()));
        }
        check_grid(grid, k, clip_dims)?;
    }
    let (bottom_grid, bottom_k) = bottom;
    if bottom_grid.level != Level::Bottom {
        return Err(Error::Bitstream("second grid must be the bottom level".into()));
    }
    check_grid(bottom_grid, bottom_k, clip_dims)?;

    let levels: Vec<(&IndexGrid, u32)> = top.into_iter().chain([bottom]).collect();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    push_u16(&mut out, clip_dims.0);
    push_u16(&mut out, clip_dims.1);
    push_u16(&mut out, clip_dims.2);
    out.push(levels.len() as u8);
    for (grid, k) in &levels {
        let (t, h, w) = grid.indices.dim();
        push_u16(&mut out, t);
        push_u16(&mut out, h);
        push_u16(&mut out, w);
        out.extend_from_slice(&k.to_le_bytes());
    }

    let mut raw = Vec::with_capacity(2 * levels.iter().map(|(g, _)| g.len()).sum::<usize>());
    for (grid, _) in &levels {
        for &idx in grid.indices.iter() {
            raw.extend_from_slice(&(idx as u16).to_le_bytes());
        }
    }
    let mut encoder = ZlibEncoder::new(Vec::new(), Compression::best());
    encoder
        .write_all(&raw)
        .and_then(|()| encoder.finish())
        .map(|compressed| {
            out.extend_from_slice(&compressed);
            out
        })
        .map_err(|e| Error::Bitstream(format!("compression failed: {e}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Bitstream(format!(
                "truncated container: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn dims(&mut self, what: &str) -> Result<(usize, usize, usize)> {
        let d = (self.u16()? as usize, self.u16()? as usize, self.u16()? as usize);
        if d.0 == 0 || d.1 == 0 || d.2 == 0 {
            return Err(Error::Bitstream(format!("{what} dims {d:?} contain zero")));
        }
        Ok(d)
    }
}

/// Parses and validates a container, inverting [`serialize`].
pub fn deserialize(bytes: &[u8]) -> Result<DecodedBitstream> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err(Error::Bitstream("bad magic".into()));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Bitstream(format!("unsupported version {version}")));
    }
    let clip_dims = r.dims("clip")?;
    let level_count = r.u8()?;
    if !(1..=2).contains(&level_count) {
        return Err(Error::Bitstream(format!("level count {level_count} outside 1..=2")));
    }
    let mut levels = Vec::with_capacity(level_count as usize);
    for _ in 0..level_count {
        let grid_dims = r.dims("grid")?;
        if grid_dims.0 > clip_dims.0 || grid_dims.1 > clip_dims.1 || grid_dims.2 > clip_dims.2 {
            return Err(Error::Bitstream(format!(
                "grid {grid_dims:?} larger than clip {clip_dims:?}"
            )));
        }
        let k = r.u32()?;
        if k == 0 || k > 65536 {
            return Err(Error::Bitstream(format!("alphabet size {k} outside 1..=65536")));
        }
        levels.push(LevelHeader { grid_dims, k });
    }
    let header = BitstreamHeader { clip_dims, levels };

    let total_indices = header.index_count();
    if total_indices > MAX_INDICES {
        return Err(Error::Bitstream(format!("{total_indices} indices exceed container limit")));
    }
    let expected = 2 * total_indices;
    let compressed = &bytes[r.pos..];
    let payload_bytes = compressed.len();
    let mut decoder = Decompress::new(true);
    let mut raw = Vec::with_capacity(expected + 1);
    let status = decoder
        .decompress_vec(compressed, &mut raw, FlushDecompress::Finish)
        .map_err(|e| Error::Bitstream(format!("payload decompression failed: {e}")))?;
    if status != Status::StreamEnd || raw.len() > expected {
        if raw.len() > expected {
            return Err(Error::Bitstream("payload longer than declared grids".into()));
        }
        return Err(Error::Bitstream(format!(
            "payload truncated: {} of {expected} bytes",
            raw.len()
        )));
    }
    if raw.len() < expected {
        return Err(Error::Bitstream(format!(
            "payload truncated: {} of {expected} bytes",
            raw.len()
        )));
    }
    if (decoder.total_in() as usize) < compressed.len() {
        return Err(Error::Bitstream("trailing bytes after payload".into()));
    }

    let mut grids = Vec::with_capacity(header.levels.len());
    let mut offset = 0usize;
    for (pos, level) in header.levels.iter().enumerate() {
        let n = level.index_count();
        let mut indices = Vec::with_capacity(n);
        for i in 0..n {
            let b = [raw[offset + 2 * i], raw[offset + 2 * i + 1]];
            let idx = u16::from_le_bytes(b) as u32;
            if idx >= level.k {
                return Err(Error::Bitstream(format!(
                    "index {idx} out of range for alphabet {}",
                    level.k
                )));
            }
            indices.push(idx);
        }
        offset += 2 * n;
        let array = Array3::from_shape_vec(level.grid_dims, indices)
            .map_err(|e| Error::Internal(e.to_string()))?;
        let is_top = header.levels.len() == 2 && pos == 0;
        grids.push(IndexGrid {
            indices: array,
            level: if is_top { Level::Top } else { Level::Bottom },
        });
    }
    let bottom = grids.pop().expect("at least one level");
    let top = grids.pop();
    Ok(DecodedBitstream { header, top, bottom, payload_bytes })
}
