//! Separable bicubic resampling (Keys kernel, a = -0.5) with edge clamping.
//!
//! Destination sample centers map to source coordinates via the standard
//! center-aligned rule `src = (dst + 0.5) * scale - 0.5`, which makes
//! same-size resizing an exact identity.

use ndarray::Array2;

use crate::error::{Error, Result};

const A: f64 = -0.5;

/// Keys cubic convolution kernel.
fn kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Tap positions and weights for one destination coordinate.
fn taps(dst: usize, scale: f64, src_len: usize) -> ([usize; 4], [f64; 4]) {
    let x = (dst as f64 + 0.5) * scale - 0.5;
    let base = x.floor();
    let frac = x - base;
    let idx = std::array::from_fn(|i| {
        (base as i64 + i as i64 - 1).clamp(0, src_len as i64 - 1) as usize
    });
    let w = [
        kernel(frac + 1.0),
        kernel(frac),
        kernel(1.0 - frac),
        kernel(2.0 - frac),
    ];
    (idx, w)
}

/// Resizes one plane to `(dst_h, dst_w)`.
pub fn resize_plane(src: &Array2<f64>, dst_h: usize, dst_w: usize) -> Result<Array2<f64>> {
    let (src_h, src_w) = src.dim();
    if src_h == 0 || src_w == 0 || dst_h == 0 || dst_w == 0 {
        return Err(Error::Data("resize dims must be positive".into()));
    }
    let scale_w = src_w as f64 / dst_w as f64;
    let mut horiz = Array2::<f64>::zeros((src_h, dst_w));
    for j in 0..dst_w {
        let (idx, w) = taps(j, scale_w, src_w);
        for i in 0..src_h {
            let mut acc = 0.0;
            for t in 0..4 {
                acc += w[t] * src[(i, idx[t])];
            }
            horiz[(i, j)] = acc;
        }
    }
    let scale_h = src_h as f64 / dst_h as f64;
    let mut out = Array2::<f64>::zeros((dst_h, dst_w));
    for i in 0..dst_h {
        let (idx, w) = taps(i, scale_h, src_h);
        for j in 0..dst_w {
            let mut acc = 0.0;
            for t in 0..4 {
                acc += w[t] * horiz[(idx[t], j)];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}
