//! Reconstruction quality (PSNR, SSIM) and rate (bits per pixel) metrics.
//!
//! Frames are quantized to 8-bit (round half up) before either quality
//! metric, so results match what a viewer of the decoded frames would
//! measure. Clip-level values are the arithmetic mean over frames.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis};

use crate::bitstream::DecodedBitstream;
use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::nn::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricConfig {
    /// Dynamic range L of the quantized signal.
    pub peak: f64,
    /// PSNR is reported as this value when the quantized frames are
    /// identical, and never above it.
    pub psnr_cap_db: f64,
    /// Side length of the SSIM window.
    pub window: usize,
    /// Standard deviation of the Gaussian window.
    pub sigma: f64,
    /// SSIM stabilizers: C1 = (k1 * L)^2, C2 = (k2 * L)^2.
    pub k1: f64,
    pub k2: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { peak: 255.0, psnr_cap_db: 100.0, window: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0) || !self.peak.is_finite() {
            return Err(Error::InvalidConfig("peak must be positive".into()));
        }
        if !(self.psnr_cap_db > 0.0) || !self.psnr_cap_db.is_finite() {
            return Err(Error::InvalidConfig("psnr cap must be positive and finite".into()));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::InvalidConfig("window must be odd and >= 3".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidConfig("sigma must be positive".into()));
        }
        if !(self.k1 > 0.0) || !(self.k2 > 0.0) {
            return Err(Error::InvalidConfig("k1 and k2 must be positive".into()));
        }
        Ok(())
    }
}

/// Round-half-up 8-bit quantization of a unit-range value.
pub fn quantize_u8<F: Scalar>(v: F) -> u8 {
    let x = v.to_f() * 255.0 + 0.5;
    (x.floor() as i64).clamp(0, 255) as u8
}

fn check_frames<F: Scalar>(a: &ArrayView3<F>, b: &ArrayView3<F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("empty frame".into()));
    }
    Ok(())
}

/// PSNR in dB between two frames (channels x H x W) over their 8-bit
/// quantized values, capped at `psnr_cap_db`.
pub fn psnr<F: Scalar>(a: ArrayView3<F>, b: ArrayView3<F>, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    check_frames(&a, &b)?;
    let mut sq_sum = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = quantize_u8(x) as f64 - quantize_u8(y) as f64;
        sq_sum += d * d;
    }
    let mse = sq_sum / a.len() as f64;
    if mse == 0.0 {
        return Ok(cfg.psnr_cap_db);
    }
    Ok((10.0 * (cfg.peak * cfg.peak / mse).log10()).min(cfg.psnr_cap_db))
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let half = (window / 2) as f64;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable filtering with the same 1D kernel along both axes.
fn filter_valid(img: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = kernel.len();
    let mut rows = Array2::<f64>::zeros((h, w - k + 1));
    for i in 0..h {
        for j in 0..w - k + 1 {
            let mut acc = 0.0;
            for (u, &kv) in kernel.iter().enumerate() {
                acc += kv * img[(i, j + u)];
            }
            rows[(i, j)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - k + 1, w - k + 1));
    for i in 0..h - k + 1 {
        for j in 0..w - k + 1 {
            let mut acc = 0.0;
            for (u, &kv) in kernel.iter().enumerate() {
                acc += kv * rows[(i + u, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

fn quantized_plane<F: Scalar>(view: ArrayView2<F>) -> Array2<f64> {
    view.mapv(|v| quantize_u8(v) as f64)
}

fn ssim_plane(x: &Array2<f64>, y: &Array2<f64>, cfg: &MetricConfig, kernel: &[f64]) -> f64 {
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let mu_x = filter_valid(x, kernel);
    let mu_y = filter_valid(y, kernel);
    let xx = filter_valid(&(x * x), kernel);
    let yy = filter_valid(&(y * y), kernel);
    let xy = filter_valid(&(x * y), kernel);
    let mut total = 0.0;
    for ((((&mx, &my), &sxx), &syy), &sxy) in
        mu_x.iter().zip(mu_y.iter()).zip(xx.iter()).zip(yy.iter()).zip(xy.iter())
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
        let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
        total += num / den;
    }
    total / mu_x.len() as f64
}

/// Mean SSIM between two frames: per channel over all valid window
/// positions with a Gaussian window, then averaged across channels.
pub fn ssim<F: Scalar>(a: ArrayView3<F>, b: ArrayView3<F>, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    check_frames(&a, &b)?;
    let (channels, h, w) = a.dim();
    if h < cfg.window || w < cfg.window {
        return Err(Error::DimensionMismatch(format!(
            "frame {h}x{w} smaller than the {}x{} SSIM window",
            cfg.window, cfg.window
        )));
    }
    let kernel = gaussian_kernel(cfg.window, cfg.sigma);
    let mut total = 0.0;
    for ch in 0..channels {
        let x = quantized_plane(a.index_axis(Axis(0), ch));
        let y = quantized_plane(b.index_axis(Axis(0), ch));
        total += ssim_plane(&x, &y, cfg, &kernel);
    }
    Ok(total / channels as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Frame-wise PSNR and SSIM averaged over all frames of the clip pair.
pub fn clip_metrics<F: Scalar>(
    a: &VideoClip<F>,
    b: &VideoClip<F>,
    cfg: &MetricConfig,
) -> Result<ClipMetrics> {
    if a.data().dim() != b.data().dim() {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.data().dim(),
            b.data().dim()
        )));
    }
    let frames = a.frames();
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for t in 0..frames {
        let fa = a.data().index_axis(Axis(1), t);
        let fb = b.data().index_axis(Axis(1), t);
        psnr_sum += psnr(fa, fb, cfg)?;
        ssim_sum += ssim(fa, fb, cfg)?;
    }
    Ok(ClipMetrics { psnr_db: psnr_sum / frames as f64, ssim: ssim_sum / frames as f64 })
}

fn check_clip_dims(dims: (usize, usize, usize)) -> Result<usize> {
    let (t, h, w) = dims;
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidInput("clip dimensions must be positive".into()));
    }
    Ok(t * h * w)
}

/// Information-content rate (N_t log2 K_t + N_b log2 K_b) / (T H W).
/// `n_t` is 0 for single-level models; an alphabet is only consulted when
/// its level has indices.
pub fn bpp_theoretical(
    n_t: usize,
    k_t: u32,
    n_b: usize,
    k_b: u32,
    dims: (usize, usize, usize),
) -> Result<f64> {
    let pixels = check_clip_dims(dims)?;
    let mut bits = 0.0f64;
    for (n, k) in [(n_t, k_t), (n_b, k_b)] {
        if n > 0 {
            if k == 0 {
                return Err(Error::InvalidInput("codebook size must be positive".into()));
            }
            bits += n as f64 * (k as f64).log2();
        }
    }
    Ok(bits / pixels as f64)
}

/// Actual rate of a compressed index payload, header excluded.
pub fn bpp_deflate(payload_bytes: usize, dims: (usize, usize, usize)) -> Result<f64> {
    let pixels = check_clip_dims(dims)?;
    Ok(8.0 * payload_bytes as f64 / pixels as f64)
}

/// Rate summary for one encoded clip.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    pub n_t: usize,
    pub k_t: u32,
    pub n_b: usize,
    pub k_b: u32,
    pub theoretical_bpp: f64,
    pub deflate_bpp: f64,
    pub header_bytes: usize,
    /// Raw 24 bpp RGB divided by the deflate rate.
    pub compression_ratio: f64,
}

/// Rate accounting for a parsed container.
pub fn rate_report(decoded: &DecodedBitstream) -> Result<RateReport> {
    let dims = decoded.header.clip_dims;
    let bottom = decoded
        .header
        .levels
        .last()
        .ok_or_else(|| Error::Bitstream("container without levels".into()))?;
    let (n_t, k_t) = match (&decoded.top, decoded.header.levels.len()) {
        (Some(g), 2) => (g.len(), decoded.header.levels[0].k),
        (None, 1) => (0, 0),
        _ => return Err(Error::Bitstream("level structure mismatch".into())),
    };
    let n_b = decoded.bottom.len();
    if n_b != bottom.index_count() {
        return Err(Error::Bitstream("bottom grid disagrees with header".into()));
    }
    let theoretical = bpp_theoretical(n_t, k_t, n_b, bottom.k, dims)?;
    let deflate = bpp_deflate(decoded.payload_bytes, dims)?;
    let ratio = if deflate > 0.0 { 24.0 / deflate } else { f64::INFINITY };
    Ok(RateReport {
        n_t,
        k_t,
        n_b,
        k_b: bottom.k,
        theoretical_bpp: theoretical,
        deflate_bpp: deflate,
        header_bytes: decoded.header.byte_len(),
        compression_ratio: ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitstream;
    use crate::quantizer::{IndexGrid, Level};
    use approx::assert_abs_diff_eq;
    use ndarray::{Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn cfg() -> MetricConfig {
        MetricConfig::default()
    }

    fn frame_from_u8(values: &Array3<u8>) -> Array3<f64> {
        values.mapv(|v| v as f64 / 255.0)
    }

    fn random_u8_frame(dims: (usize, usize), seed: u64, max: u8) -> Array3<u8> {
        let (h, w) = dims;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((3, h, w), || rng.gen_range(0..=max))
    }

    #[test]
    fn psnr_identical_hits_cap() {
        let a = frame_from_u8(&random_u8_frame((16, 16), 1, 255));
        assert_abs_diff_eq!(psnr(a.view(), a.view(), &cfg()).unwrap(), 100.0, epsilon = 0.0);
    }

    #[test]
    fn psnr_of_constant_offset_16() {
        let base = random_u8_frame((16, 16), 2, 239);
        let a = frame_from_u8(&base);
        let b = frame_from_u8(&base.mapv(|v| v + 16));
        // MSE of 16^2 at every value: 10 log10(255^2 / 256)
        let expected = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        let got = psnr(a.view(), b.view(), &cfg()).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 24.05, epsilon = 0.01);
    }

    #[test]
    fn psnr_of_opposite_extremes_is_zero() {
        let zeros = frame_from_u8(&Array3::zeros((3, 12, 12)));
        let ones = frame_from_u8(&Array3::from_elem((3, 12, 12), 255));
        assert_abs_diff_eq!(psnr(zeros.view(), ones.view(), &cfg()).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn psnr_matches_naive_oracle() {
        let a = frame_from_u8(&random_u8_frame((12, 12), 3, 255));
        let b = frame_from_u8(&random_u8_frame((12, 12), 4, 255));
        let mut sq = 0.0;
        for (&x, &y) in a.iter().zip(b.iter()) {
            let d = (x * 255.0).round() - (y * 255.0).round();
            sq += d * d;
        }
        let expected = 10.0 * (255.0f64 * 255.0 / (sq / a.len() as f64)).log10();
        assert_abs_diff_eq!(psnr(a.view(), b.view(), &cfg()).unwrap(), expected, epsilon = 1e-9);
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let base = frame_from_u8(&Array3::from_elem((3, 8, 8), 100));
        let mut last = f64::INFINITY;
        for offset in [1u8, 4, 16, 64] {
            let other = frame_from_u8(&Array3::from_elem((3, 8, 8), 100 + offset));
            let p = psnr(base.view(), other.view(), &cfg()).unwrap();
            assert!(p < last, "psnr must strictly decrease as MSE grows");
            last = p;
        }
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(quantize_u8(0.0f64), 0);
        assert_eq!(quantize_u8(1.0f64), 255);
        assert_eq!(quantize_u8(0.5f64 / 255.0), 1);
        assert_eq!(quantize_u8(0.499999f64 / 255.0), 0);
        assert_eq!(quantize_u8(254.5f64 / 255.0), 255);
    }

    #[test]
    fn ssim_of_identical_frames_is_one() {
        let a = frame_from_u8(&random_u8_frame((16, 16), 5, 255));
        assert_abs_diff_eq!(ssim(a.view(), a.view(), &cfg()).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn ssim_of_constant_extremes() {
        let zeros = frame_from_u8(&Array3::zeros((3, 16, 16)));
        let ones = frame_from_u8(&Array3::from_elem((3, 16, 16), 255));
        // means 0 and 255 with zero variance: C1 / (255^2 + C1)
        let c1 = 2.55f64 * 2.55;
        let expected = c1 / (255.0 * 255.0 + c1);
        let got = ssim(zeros.view(), ones.view(), &cfg()).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 1.0e-4, epsilon = 1e-5);
    }

    #[test]
    fn ssim_shift_stays_below_one() {
        let base = random_u8_frame((16, 16), 6, 200);
        let a = frame_from_u8(&base);
        let b = frame_from_u8(&base.mapv(|v| v + 30));
        let s = ssim(a.view(), b.view(), &cfg()).unwrap();
        assert!(s < 1.0, "luminance shift must reduce SSIM, got {s}");
    }

    /// Direct per-window evaluation with an explicit 2D kernel.
    fn ssim_naive(a: ArrayView3<f64>, b: ArrayView3<f64>, cfg: &MetricConfig) -> f64 {
        let k1d = gaussian_kernel(cfg.window, cfg.sigma);
        let win = cfg.window;
        let c1 = (cfg.k1 * cfg.peak).powi(2);
        let c2 = (cfg.k2 * cfg.peak).powi(2);
        let (channels, h, w) = a.dim();
        let mut total = 0.0;
        for ch in 0..channels {
            let x = quantized_plane(a.index_axis(Axis(0), ch));
            let y = quantized_plane(b.index_axis(Axis(0), ch));
            let mut plane_sum = 0.0;
            let mut count = 0;
            for i in 0..=h - win {
                for j in 0..=w - win {
                    let (mut mx, mut my) = (0.0, 0.0);
                    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
                    for u in 0..win {
                        for v in 0..win {
                            let wgt = k1d[u] * k1d[v];
                            let xv = x[(i + u, j + v)];
                            let yv = y[(i + u, j + v)];
                            mx += wgt * xv;
                            my += wgt * yv;
                            sxx += wgt * xv * xv;
                            syy += wgt * yv * yv;
                            sxy += wgt * xv * yv;
                        }
                    }
                    let num = (2.0 * mx * my + c1) * (2.0 * (sxy - mx * my) + c2);
                    let den =
                        (mx * mx + my * my + c1) * ((sxx - mx * mx) + (syy - my * my) + c2);
                    plane_sum += num / den;
                    count += 1;
                }
            }
            total += plane_sum / count as f64;
        }
        total / channels as f64
    }

    #[test]
    fn ssim_matches_naive_oracle() {
        for seed in 0..4 {
            let a = frame_from_u8(&random_u8_frame((14, 14), 10 + seed, 255));
            let b = frame_from_u8(&random_u8_frame((14, 14), 20 + seed, 255));
            let fast = ssim(a.view(), b.view(), &cfg()).unwrap();
            let slow = ssim_naive(a.view(), b.view(), &cfg());
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-6);
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = frame_from_u8(&random_u8_frame((12, 12), 30, 255));
        let b = frame_from_u8(&random_u8_frame((12, 12), 31, 255));
        assert_abs_diff_eq!(
            ssim(a.view(), b.view(), &cfg()).unwrap(),
            ssim(b.view(), a.view(), &cfg()).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ssim_rejects_frames_smaller_than_window() {
        let a = frame_from_u8(&random_u8_frame((8, 8), 32, 255));
        assert!(ssim(a.view(), a.view(), &cfg()).is_err());
    }

    #[test]
    fn metric_input_shapes_must_match() {
        let a = frame_from_u8(&random_u8_frame((12, 12), 33, 255));
        let b = frame_from_u8(&random_u8_frame((12, 14), 34, 255));
        assert!(psnr(a.view(), b.view(), &cfg()).is_err());
        assert!(ssim(a.view(), b.view(), &cfg()).is_err());
    }

    #[test]
    fn clip_values_average_frame_values() {
        // two identical frames, two opposite-extreme frames: 100 and 0 dB
        let mut a = Array4::<f64>::zeros((3, 4, 12, 12));
        let mut b = Array4::<f64>::zeros((3, 4, 12, 12));
        for t in 0..2 {
            a.index_axis_mut(Axis(1), t).fill(0.5);
            b.index_axis_mut(Axis(1), t).fill(0.5);
        }
        for t in 2..4 {
            a.index_axis_mut(Axis(1), t).fill(0.0);
            b.index_axis_mut(Axis(1), t).fill(1.0);
        }
        let ca = VideoClip::new(a, 16).unwrap();
        let cb = VideoClip::new(b, 16).unwrap();
        let m = clip_metrics(&ca, &cb, &cfg()).unwrap();
        assert_abs_diff_eq!(m.psnr_db, 50.0, epsilon = 1e-12);
        // identical clips reach the cap and unit similarity
        let same = clip_metrics(&ca, &ca, &cfg()).unwrap();
        assert_abs_diff_eq!(same.psnr_db, 100.0, epsilon = 0.0);
        assert_abs_diff_eq!(same.ssim, 1.0, epsilon = 1e-9);
        // constant per-frame values collapse to the frame value
        let frame_psnr = psnr(
            ca.data().index_axis(Axis(1), 2),
            cb.data().index_axis(Axis(1), 2),
            &cfg(),
        )
        .unwrap();
        assert_abs_diff_eq!(frame_psnr, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn theoretical_rate_of_reference_layout() {
        // 8^3 top and 16^3 bottom indices, 1024-way codebooks, 32x64x64 clip
        let bpp = bpp_theoretical(512, 1024, 4096, 1024, (32, 64, 64)).unwrap();
        assert_abs_diff_eq!(bpp, 0.3515625, epsilon = 1e-12);
        assert_abs_diff_eq!(bpp, 0.3516, epsilon = 1e-4);
        // one bit per pixel: single level, K = 2, one index per pixel
        let one = bpp_theoretical(0, 0, 2 * 8 * 8, 2, (2, 8, 8)).unwrap();
        assert_abs_diff_eq!(one, 1.0, epsilon = 1e-12);
        // no indices at all
        assert_abs_diff_eq!(
            bpp_theoretical(0, 0, 0, 0, (2, 8, 8)).unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn rate_input_validation() {
        assert!(bpp_theoretical(4, 0, 4, 4, (1, 1, 1)).is_err());
        assert!(bpp_theoretical(4, 4, 4, 0, (1, 1, 1)).is_err());
        assert!(bpp_theoretical(4, 4, 4, 4, (0, 1, 1)).is_err());
        assert!(bpp_deflate(10, (0, 4, 4)).is_err());
        assert_abs_diff_eq!(bpp_deflate(0, (2, 8, 8)).unwrap(), 0.0, epsilon = 0.0);
        assert_abs_diff_eq!(bpp_deflate(64, (2, 8, 8)).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn rate_report_of_parsed_container() {
        let mut rng = ChaCha20Rng::seed_from_u64(40);
        let top = IndexGrid {
            indices: Array3::from_shape_simple_fn((2, 4, 4), || rng.gen_range(0..512u32)),
            level: Level::Top,
        };
        let bottom = IndexGrid {
            indices: Array3::from_shape_simple_fn((4, 8, 8), || rng.gen_range(0..1024u32)),
            level: Level::Bottom,
        };
        let bytes =
            bitstream::serialize(Some((&top, 512)), (&bottom, 1024), (8, 32, 32)).unwrap();
        let decoded = bitstream::deserialize(&bytes).unwrap();
        let report = rate_report(&decoded).unwrap();
        assert_eq!((report.n_t, report.k_t), (32, 512));
        assert_eq!((report.n_b, report.k_b), (256, 1024));
        let pixels = (8 * 32 * 32) as f64;
        assert_abs_diff_eq!(
            report.theoretical_bpp,
            (32.0 * 9.0 + 256.0 * 10.0) / pixels,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            report.deflate_bpp,
            8.0 * decoded.payload_bytes as f64 / pixels,
            epsilon = 1e-12
        );
        assert_eq!(report.header_bytes, 33);
        assert_abs_diff_eq!(
            report.compression_ratio,
            24.0 / report.deflate_bpp,
            epsilon = 1e-9
        );
    }
}
