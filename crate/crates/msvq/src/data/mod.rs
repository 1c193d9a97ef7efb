//! Dataset plumbing: frame ingestion, 2-second segmentation, split
//! assignment, and clip directories on disk.
//!
//! On-disk layout: each clip is a directory of P6 frames named
//! `frame_0000.ppm` upward, referenced from a tab-separated manifest.

pub mod manifest;
pub mod ppm;
pub mod resize;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::metrics::quantize_u8;
use crate::nn::Scalar;

pub use manifest::{ClipRecord, Manifest, Split};
pub use ppm::Image;
pub use synth::synth_clip;

/// Frames per training clip: 2 seconds at [`CLIP_FPS`].
pub const CLIP_FRAMES: usize = 32;
pub const CLIP_FPS: u32 = 16;

/// Non-overlapping [`CLIP_FRAMES`]-sized windows; a trailing remainder is
/// dropped.
pub fn segment_frames(total_frames: usize) -> Vec<Range<usize>> {
    (0..total_frames / CLIP_FRAMES)
        .map(|i| i * CLIP_FRAMES..(i + 1) * CLIP_FRAMES)
        .collect()
}

/// The `.ppm` files of a clip directory, sorted by file name (zero-padded
/// indices sort numerically).
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no .ppm frames", dir.display())));
    }
    Ok(files)
}

/// Stacks decoded frames into a clip, bicubic-resizing each channel plane
/// to `target_hw`. Values are normalized to [0,1] and clamped after the
/// cubic pass (the kernel can overshoot near edges).
pub fn frames_to_clip<F: Scalar>(
    images: &[Image],
    target_hw: (usize, usize),
) -> Result<VideoClip<F>> {
    if images.is_empty() {
        return Err(Error::Data("clip has no frames".into()));
    }
    let (w0, h0) = (images[0].width, images[0].height);
    for (i, img) in images.iter().enumerate() {
        if img.width != w0 || img.height != h0 {
            return Err(Error::Data(format!(
                "frame {i} is {}x{}, first frame is {w0}x{h0}",
                img.width, img.height
            )));
        }
    }
    let (th, tw) = target_hw;
    let mut data = Array4::<F>::zeros((3, images.len(), th, tw));
    for (t, img) in images.iter().enumerate() {
        for c in 0..3 {
            let plane = Array2::from_shape_fn((h0, w0), |(r, col)| {
                img.sample(c, r, col) as f64 / 255.0
            });
            let resized = resize::resize_plane(&plane, th, tw)?;
            for r in 0..th {
                for col in 0..tw {
                    data[(c, t, r, col)] = F::from_f(resized[(r, col)].clamp(0.0, 1.0));
                }
            }
        }
    }
    VideoClip::new(data, CLIP_FPS)
}

/// Reads a directory of P6 frames into a clip resized to `target_hw`.
pub fn ingest_frames<F: Scalar>(dir: &Path, target_hw: (usize, usize)) -> Result<VideoClip<F>> {
    let files = list_frame_files(dir)?;
    let images = files.iter().map(|p| ppm::read_ppm(p)).collect::<Result<Vec<_>>>()?;
    frames_to_clip(&images, target_hw)
}

/// Reads a clip directory at its native frame size.
pub fn read_clip_dir<F: Scalar>(dir: &Path) -> Result<VideoClip<F>> {
    let files = list_frame_files(dir)?;
    let images = files.iter().map(|p| ppm::read_ppm(p)).collect::<Result<Vec<_>>>()?;
    let (h, w) = (images[0].height, images[0].width);
    frames_to_clip(&images, (h, w))
}

/// Writes a clip as zero-padded P6 frames, quantizing round-half-up.
pub fn write_clip_dir<F: Scalar>(dir: &Path, clip: &VideoClip<F>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let (t, h, w) = clip.dims();
    for frame in 0..t {
        let mut bytes = vec![0u8; 3 * h * w];
        for r in 0..h {
            for col in 0..w {
                for c in 0..3 {
                    bytes[3 * (r * w + col) + c] = quantize_u8(clip.data()[(c, frame, r, col)]);
                }
            }
        }
        let image = Image::new(w, h, bytes)?;
        ppm::write_ppm(&dir.join(format!("frame_{frame:04}.ppm")), &image)?;
    }
    Ok(())
}

/// Assigns class-preserving splits: within each class, records are shuffled
/// by a seeded permutation and partitioned by cumulative ratios (floor, then
/// remainder to later splits). Existing assignments are overwritten.
pub fn split_dataset(source: &Manifest, ratios: (f64, f64, f64), seed: u64) -> Result<Manifest> {
    let (r_train, r_val, r_test) = ratios;
    for r in [r_train, r_val, r_test] {
        if !r.is_finite() || r < 0.0 {
            return Err(Error::InvalidConfig("split ratios must be finite and >= 0".into()));
        }
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig("split ratios must sum to 1".into()));
    }
    if source.records.is_empty() {
        return Err(Error::Data("cannot split an empty manifest".into()));
    }
    source.validate()?;

    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in source.records.iter().enumerate() {
        by_class.entry(&r.class).or_default().push(i);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut assignment = vec![Split::Train; source.records.len()];
    for indices in by_class.values_mut() {
        indices.shuffle(&mut rng);
        let n = indices.len();
        let mut counts = [
            (n as f64 * r_train).floor() as usize,
            (n as f64 * r_val).floor() as usize,
            (n as f64 * r_test).floor() as usize,
        ];
        let mut rem = n - counts.iter().sum::<usize>();
        for c in counts.iter_mut().rev() {
            if rem == 0 {
                break;
            }
            *c += 1;
            rem -= 1;
        }
        let mut cursor = indices.iter();
        for (split, &count) in [Split::Train, Split::Val, Split::Test].iter().zip(&counts) {
            for &i in cursor.by_ref().take(count) {
                assignment[i] = *split;
            }
        }
    }
    let records = source
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| ClipRecord { split: assignment[i], ..r.clone() })
        .collect();
    Ok(Manifest { records, split_seed: Some(seed) })
}
