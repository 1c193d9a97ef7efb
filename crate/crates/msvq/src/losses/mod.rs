//! Reconstruction, perceptual, and total objective assembly.
//!
//! The perceptual term compares feature maps of original and reconstructed
//! frames: L_perc = sum_l lambda_l * mean|phi_l(x) - phi_l(xhat)|, averaged
//! over frames. Extractors are pluggable: a fixed-seed convolution stack
//! serves as the test-time proxy, and externally converted VGG-16 weights
//! can be loaded from a named-tensor container for the paper's relu1_2 /
//! relu2_2 / relu3_3 taps.

use std::cell::Cell;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::nn::{max_pool2, max_pool2_vjp, relu, relu_vjp, Conv3d, Scalar};
use crate::trainer::checkpoint::NamedTensors;

/// Weights of the total objective: L_total = L_recon + beta * L_VQ +
/// gamma * L_perc, with per-tap weights lambda_l inside L_perc.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub layer_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 1.0, gamma: 0.4, layer_weights: vec![1.0, 1.0, 1.0] }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::InvalidConfig("beta must be finite and >= 0".into()));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidConfig("gamma must be finite and >= 0".into()));
        }
        if self.layer_weights.iter().any(|&l| !l.is_finite() || l < 0.0) {
            return Err(Error::InvalidConfig("layer weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Deterministic frame-level feature extractor with a fixed list of taps.
pub trait FeatureExtractor<F: Scalar> {
    fn tap_count(&self) -> usize;

    /// Feature maps at each tap for a 3 x H x W frame in [0,1].
    fn features(&self, frame: ArrayView3<F>) -> Result<Vec<Array3<F>>>;

    /// Gradient of sum_l <d_taps[l], phi_l(frame)> with respect to the frame.
    fn input_grad(&self, frame: ArrayView3<F>, d_taps: &[Array3<F>]) -> Result<Array3<F>>;
}

/// Per-channel normalization constants applied before VGG-style extractors.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

enum StackOp<F> {
    Conv(Conv3d<F>),
    Relu { tap: bool },
    Pool,
}

/// A convolution/rectifier/pool stack with taps after designated rectifiers.
/// Frames are processed as single-frame 3D tensors so the model's convolution
/// kernels are reused unchanged.
pub struct ConvStackExtractor<F> {
    ops: Vec<StackOp<F>>,
    normalize: Option<([F; 3], [F; 3])>,
}

impl<F: Scalar> ConvStackExtractor<F> {
    /// Fixed-seed three-stage proxy: 3->8 (stride 1), 8->16 and 16->32
    /// (stride 2), a tap after each rectifier. Used by automated tests in
    /// place of pre-trained weights.
    pub fn proxy(seed: u64) -> Self {
        let rng = &mut ChaCha20Rng::seed_from_u64(seed);
        let ops = vec![
            StackOp::Conv(Conv3d::init(rng, 3, 8, [1, 3, 3], [1, 1, 1], [0, 1, 1], 1)),
            StackOp::Relu { tap: true },
            StackOp::Conv(Conv3d::init(rng, 8, 16, [1, 4, 4], [1, 2, 2], [0, 1, 1], 1)),
            StackOp::Relu { tap: true },
            StackOp::Conv(Conv3d::init(rng, 16, 32, [1, 4, 4], [1, 2, 2], [0, 1, 1], 1)),
            StackOp::Relu { tap: true },
        ];
        Self { ops, normalize: None }
    }

    /// Builds the front of VGG-16 (conv1_1 .. conv3_3) from a named-tensor
    /// container with entries "conv1_1.w", "conv1_1.b", ... Taps follow the
    /// relu1_2, relu2_2, and relu3_3 activations. Channel widths are read
    /// from the stored tensor shapes, so reduced-width stand-ins work too.
    pub fn vgg16(tensors: &NamedTensors, imagenet_normalize: bool) -> Result<Self> {
        const PLAN: [(&str, bool, bool); 7] = [
            // (layer, tap after its relu, pool after the tap)
            ("conv1_1", false, false),
            ("conv1_2", true, true),
            ("conv2_1", false, false),
            ("conv2_2", true, true),
            ("conv3_1", false, false),
            ("conv3_2", false, false),
            ("conv3_3", true, false),
        ];
        let mut ops = Vec::new();
        let mut prev_ch = 3usize;
        for (name, tap, pool) in PLAN {
            let w = tensors
                .get(&format!("{name}.w"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}.w")))?;
            let b = tensors
                .get(&format!("{name}.b"))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}.b")))?;
            if w.ndim() != 4 {
                return Err(Error::Checkpoint(format!("{name}.w must be rank 4 (out,in,kh,kw)")));
            }
            let (out_ch, in_ch, kh, kw) =
                (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            if in_ch != prev_ch {
                return Err(Error::Checkpoint(format!(
                    "{name}.w expects {in_ch} input channels, previous layer has {prev_ch}"
                )));
            }
            if b.ndim() != 1 || b.shape()[0] != out_ch {
                return Err(Error::Checkpoint(format!("{name}.b shape mismatch")));
            }
            let weight = ndarray::Array5::from_shape_vec(
                (out_ch, in_ch, 1, kh, kw),
                w.iter().map(|&v| F::from_f(v as f64)).collect(),
            )
            .map_err(|e| Error::Internal(e.to_string()))?;
            let bias = ndarray::Array1::from_iter(b.iter().map(|&v| F::from_f(v as f64)));
            ops.push(StackOp::Conv(Conv3d {
                weight,
                bias,
                stride: [1, 1, 1],
                padding: [0, kh / 2, kw / 2],
                groups: 1,
            }));
            ops.push(StackOp::Relu { tap });
            if pool {
                ops.push(StackOp::Pool);
            }
            prev_ch = out_ch;
        }
        let normalize = imagenet_normalize.then(|| {
            (
                IMAGENET_MEAN.map(F::from_f),
                IMAGENET_STD.map(F::from_f),
            )
        });
        Ok(Self { ops, normalize })
    }

    fn prepare(&self, frame: ArrayView3<F>) -> Result<Array4<F>> {
        let (c, _, _) = frame.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3-channel frame, got {c}")));
        }
        let mut x = frame.to_owned().insert_axis(Axis(1)); // (3,1,H,W)
        if let Some((mean, std)) = &self.normalize {
            for ch in 0..3 {
                let m = mean[ch];
                let s = std[ch];
                x.index_axis_mut(Axis(0), ch).mapv_inplace(|v| (v - m) / s);
            }
        }
        Ok(x)
    }

    /// Runs the stack, returning each op's input plus the tap outputs.
    fn run(&self, frame: ArrayView3<F>) -> Result<(Vec<Array4<F>>, Vec<Array3<F>>)> {
        let mut inputs = Vec::with_capacity(self.ops.len());
        let mut taps = Vec::new();
        let mut x = self.prepare(frame)?;
        for op in &self.ops {
            inputs.push(x.clone());
            x = match op {
                StackOp::Conv(c) => c.forward(&x)?,
                StackOp::Relu { tap } => {
                    let y = relu(&x);
                    if *tap {
                        taps.push(y.clone().remove_axis(Axis(1)));
                    }
                    y
                }
                StackOp::Pool => max_pool2(&x)?,
            };
        }
        Ok((inputs, taps))
    }
}

impl<F: Scalar> FeatureExtractor<F> for ConvStackExtractor<F> {
    fn tap_count(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| matches!(op, StackOp::Relu { tap: true }))
            .count()
    }

    fn features(&self, frame: ArrayView3<F>) -> Result<Vec<Array3<F>>> {
        Ok(self.run(frame)?.1)
    }

    fn input_grad(&self, frame: ArrayView3<F>, d_taps: &[Array3<F>]) -> Result<Array3<F>> {
        if d_taps.len() != self.tap_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} tap gradients for {} taps",
                d_taps.len(),
                self.tap_count()
            )));
        }
        let (inputs, taps) = self.run(frame)?;
        for (dt, t) in d_taps.iter().zip(taps.iter()) {
            if dt.dim() != t.dim() {
                return Err(Error::ShapeMismatch("tap gradient shape mismatch".into()));
            }
        }
        let mut d: Option<Array4<F>> = None;
        let mut tap_idx = self.tap_count();
        for (op, x) in self.ops.iter().zip(inputs.iter()).rev() {
            match op {
                StackOp::Conv(c) => {
                    let cur = d.ok_or_else(|| {
                        Error::Internal("stack must end with a tapped rectifier".into())
                    })?;
                    d = Some(c.vjp(x, &cur)?.0);
                }
                StackOp::Relu { tap } => {
                    let mut cur = d.take();
                    if *tap {
                        tap_idx -= 1;
                        let dt = d_taps[tap_idx].clone().insert_axis(Axis(1));
                        cur = Some(match cur {
                            Some(c) => c + &dt,
                            None => dt,
                        });
                    }
                    let cur = cur.ok_or_else(|| {
                        Error::Internal("stack must end with a tapped rectifier".into())
                    })?;
                    d = Some(relu_vjp(x, &cur));
                }
                StackOp::Pool => {
                    let cur = d.ok_or_else(|| {
                        Error::Internal("stack must end with a tapped rectifier".into())
                    })?;
                    d = Some(max_pool2_vjp(x, &cur)?);
                }
            }
        }
        let mut g = d.ok_or_else(|| Error::Internal("empty op stack".into()))?;
        if let Some((_, std)) = &self.normalize {
            for ch in 0..3 {
                let s = std[ch];
                g.index_axis_mut(Axis(0), ch).mapv_inplace(|v| v / s);
            }
        }
        Ok(g.remove_axis(Axis(1)))
    }
}

/// Wraps an extractor and counts invocations; used to assert that the
/// perceptual path is never exercised when gamma = 0.
pub struct CountingExtractor<'a, F: Scalar> {
    inner: &'a dyn FeatureExtractor<F>,
    calls: Cell<usize>,
}

impl<'a, F: Scalar> CountingExtractor<'a, F> {
    pub fn new(inner: &'a dyn FeatureExtractor<F>) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn call_count(&self) -> usize {
        self.calls.get()
    }
}

impl<F: Scalar> FeatureExtractor<F> for CountingExtractor<'_, F> {
    fn tap_count(&self) -> usize {
        self.inner.tap_count()
    }

    fn features(&self, frame: ArrayView3<F>) -> Result<Vec<Array3<F>>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.features(frame)
    }

    fn input_grad(&self, frame: ArrayView3<F>, d_taps: &[Array3<F>]) -> Result<Array3<F>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.input_grad(frame, d_taps)
    }
}

/// Mean squared error over all clip values.
pub fn recon_loss<F: Scalar>(x: &VideoClip<F>, xhat: &VideoClip<F>) -> Result<F> {
    if x.data().dim() != xhat.data().dim() {
        return Err(Error::ShapeMismatch("reconstruction loss shape mismatch".into()));
    }
    let n = F::from_f(x.data().len() as f64);
    let sum: F = x
        .data()
        .iter()
        .zip(xhat.data().iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Gradient of [`recon_loss`] with respect to the reconstruction.
pub fn recon_loss_grad<F: Scalar>(x: &VideoClip<F>, xhat: &VideoClip<F>) -> Result<Array4<F>> {
    if x.data().dim() != xhat.data().dim() {
        return Err(Error::ShapeMismatch("reconstruction loss shape mismatch".into()));
    }
    let scale = F::from_f(2.0 / x.data().len() as f64);
    let mut g = xhat.data().clone();
    g.zip_mut_with(x.data(), |xh, &xv| *xh = (*xh - xv) * scale);
    Ok(g)
}

/// Frame-averaged, lambda-weighted mean-l1 distance between tap features.
pub fn perceptual_loss<F: Scalar>(
    x: &VideoClip<F>,
    xhat: &VideoClip<F>,
    extractor: &dyn FeatureExtractor<F>,
    weights: &LossWeights,
) -> Result<F> {
    if x.data().dim() != xhat.data().dim() {
        return Err(Error::ShapeMismatch("perceptual loss shape mismatch".into()));
    }
    if weights.layer_weights.len() != extractor.tap_count() {
        return Err(Error::InvalidConfig(format!(
            "{} layer weights for {} taps",
            weights.layer_weights.len(),
            extractor.tap_count()
        )));
    }
    let frames = x.frames();
    let mut total = F::zero();
    for t in 0..frames {
        let fx = extractor.features(x.data().index_axis(Axis(1), t))?;
        let fxh = extractor.features(xhat.data().index_axis(Axis(1), t))?;
        for ((a, b), &lambda) in fx.iter().zip(fxh.iter()).zip(&weights.layer_weights) {
            let n = F::from_f(a.len() as f64);
            let l1: F = a
                .iter()
                .zip(b.iter())
                .map(|(&u, &v)| (u - v).abs())
                .sum();
            total += F::from_f(lambda) * l1 / n;
        }
    }
    Ok(total / F::from_f(frames as f64))
}

/// Gradient of [`perceptual_loss`] with respect to the reconstruction.
pub fn perceptual_loss_grad<F: Scalar>(
    x: &VideoClip<F>,
    xhat: &VideoClip<F>,
    extractor: &dyn FeatureExtractor<F>,
    weights: &LossWeights,
) -> Result<Array4<F>> {
    if x.data().dim() != xhat.data().dim() {
        return Err(Error::ShapeMismatch("perceptual loss shape mismatch".into()));
    }
    if weights.layer_weights.len() != extractor.tap_count() {
        return Err(Error::InvalidConfig(format!(
            "{} layer weights for {} taps",
            weights.layer_weights.len(),
            extractor.tap_count()
        )));
    }
    let frames = x.frames();
    let inv_frames = F::from_f(1.0 / frames as f64);
    let mut grad = Array4::<F>::zeros(xhat.data().dim());
    for t in 0..frames {
        let fx = extractor.features(x.data().index_axis(Axis(1), t))?;
        let fxh = extractor.features(xhat.data().index_axis(Axis(1), t))?;
        let d_taps: Vec<Array3<F>> = fx
            .iter()
            .zip(fxh.iter())
            .zip(&weights.layer_weights)
            .map(|((a, b), &lambda)| {
                let scale = F::from_f(lambda) / F::from_f(a.len() as f64) * inv_frames;
                let mut d = b.clone();
                d.zip_mut_with(a, |bv, &av| {
                    *bv = if *bv > av {
                        scale
                    } else if *bv < av {
                        -scale
                    } else {
                        F::zero()
                    };
                });
                d
            })
            .collect();
        let g = extractor.input_grad(xhat.data().index_axis(Axis(1), t), &d_taps)?;
        grad.index_axis_mut(Axis(1), t).assign(&g);
    }
    Ok(grad)
}

/// L_total = recon + beta * (commit_top + commit_bottom) + gamma * perc.
pub fn total_loss<F: Scalar>(
    recon: F,
    commit_top: F,
    commit_bottom: F,
    perc: F,
    weights: &LossWeights,
) -> Result<F> {
    for (name, v) in [
        ("recon", recon),
        ("commit_top", commit_top),
        ("commit_bottom", commit_bottom),
        ("perceptual", perc),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss component")));
        }
        if v < F::zero() {
            return Err(Error::InvalidInput(format!("negative {name} loss component")));
        }
    }
    Ok(recon
        + F::from_f(weights.beta) * (commit_top + commit_bottom)
        + F::from_f(weights.gamma) * perc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array4, IxDyn};
    use rand::Rng;

    fn clip_of<F: Scalar>(value: f64, dims: (usize, usize, usize)) -> VideoClip<F> {
        let (t, h, w) = dims;
        VideoClip::new(Array4::from_elem((3, t, h, w), F::from_f(value)), 16).unwrap()
    }

    fn random_clip<F: Scalar>(dims: (usize, usize, usize), seed: u64) -> VideoClip<F> {
        let (t, h, w) = dims;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data =
            Array4::from_shape_simple_fn((3, t, h, w), || F::from_f(rng.gen_range(0.0..1.0)));
        VideoClip::new(data, 16).unwrap()
    }

    #[test]
    fn recon_loss_cases() {
        let a = random_clip::<f64>((2, 4, 4), 1);
        assert_abs_diff_eq!(recon_loss(&a, &a).unwrap(), 0.0, epsilon = 1e-15);
        let zeros = clip_of::<f64>(0.0, (2, 4, 4));
        let ones = clip_of::<f64>(1.0, (2, 4, 4));
        let halves = clip_of::<f64>(0.5, (2, 4, 4));
        assert_abs_diff_eq!(recon_loss(&zeros, &ones).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(recon_loss(&zeros, &halves).unwrap(), 0.25, epsilon = 1e-15);
        let small = clip_of::<f64>(0.0, (1, 4, 4));
        assert!(recon_loss(&zeros, &small).is_err());
    }

    #[test]
    fn recon_grad_matches_definition() {
        let x = random_clip::<f64>((2, 4, 4), 2);
        let xhat = random_clip::<f64>((2, 4, 4), 3);
        let g = recon_loss_grad(&x, &xhat).unwrap();
        let n = x.data().len() as f64;
        for ((gv, &xv), &xhv) in g.iter().zip(x.data().iter()).zip(xhat.data().iter()) {
            assert_abs_diff_eq!(*gv, 2.0 * (xhv - xv) / n, epsilon = 1e-15);
        }
    }

    #[test]
    fn total_loss_linear_combination() {
        let w = LossWeights::default();
        assert_abs_diff_eq!(
            total_loss(1.0, 0.3, 0.2, 0.25, &w).unwrap(),
            1.0 + 0.5 + 0.1,
            epsilon = 1e-12
        );
        // unit vectors of the component space
        assert_abs_diff_eq!(total_loss(1.0, 0.0, 0.0, 0.0, &w).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(total_loss(0.0, 1.0, 0.0, 0.0, &w).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(total_loss(0.0, 0.0, 1.0, 0.0, &w).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(total_loss(0.0, 0.0, 0.0, 1.0, &w).unwrap(), 0.4, epsilon = 1e-12);
        let w0 = LossWeights { beta: 0.0, gamma: 0.0, ..LossWeights::default() };
        assert_abs_diff_eq!(total_loss(0.7, 9.0, 9.0, 9.0, &w0).unwrap(), 0.7, epsilon = 1e-12);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, &w).is_err());
        assert!(total_loss(0.0, f64::INFINITY, 0.0, 0.0, &w).is_err());
        assert!(total_loss(-0.1, 0.0, 0.0, 0.0, &w).is_err());
    }

    struct IdentityExtractor;

    impl FeatureExtractor<f64> for IdentityExtractor {
        fn tap_count(&self) -> usize {
            1
        }
        fn features(&self, frame: ArrayView3<f64>) -> Result<Vec<Array3<f64>>> {
            Ok(vec![frame.to_owned()])
        }
        fn input_grad(
            &self,
            _frame: ArrayView3<f64>,
            d_taps: &[Array3<f64>],
        ) -> Result<Array3<f64>> {
            Ok(d_taps[0].clone())
        }
    }

    #[test]
    fn single_tap_reduces_to_mean_l1() {
        let x = random_clip::<f64>((2, 4, 4), 4);
        let xhat = random_clip::<f64>((2, 4, 4), 5);
        let w = LossWeights { layer_weights: vec![1.0], ..LossWeights::default() };
        let got = perceptual_loss(&x, &xhat, &IdentityExtractor, &w).unwrap();
        let n = x.data().len() as f64;
        let expected: f64 = x
            .data()
            .iter()
            .zip(xhat.data().iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum::<f64>()
            / n;
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        // pseudometric: symmetric, zero on the diagonal
        let swapped = perceptual_loss(&xhat, &x, &IdentityExtractor, &w).unwrap();
        assert_abs_diff_eq!(got, swapped, epsilon = 1e-15);
        assert_abs_diff_eq!(
            perceptual_loss(&x, &x, &IdentityExtractor, &w).unwrap(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn proxy_matches_direct_formula_evaluation() {
        let ex = ConvStackExtractor::<f64>::proxy(17);
        let x = random_clip::<f64>((2, 8, 8), 6);
        let xhat = random_clip::<f64>((2, 8, 8), 7);
        let w = LossWeights { layer_weights: vec![1.0, 0.5, 2.0], ..LossWeights::default() };
        let got = perceptual_loss(&x, &xhat, &ex, &w).unwrap();
        // independent straight-line evaluation of the formula
        let mut expected = 0.0;
        for t in 0..2 {
            let fx = ex.features(x.data().index_axis(Axis(1), t)).unwrap();
            let fxh = ex.features(xhat.data().index_axis(Axis(1), t)).unwrap();
            for (l, lambda) in w.layer_weights.iter().enumerate() {
                let diff: f64 = fx[l]
                    .iter()
                    .zip(fxh[l].iter())
                    .map(|(&a, &b)| (a - b).abs())
                    .sum();
                expected += lambda * diff / fx[l].len() as f64;
            }
        }
        expected /= 2.0;
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        assert!(got > 0.0);
        // same input twice: deterministic features
        let f1 = ex.features(x.data().index_axis(Axis(1), 0)).unwrap();
        let f2 = ex.features(x.data().index_axis(Axis(1), 0)).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1[0].dim(), (8, 8, 8));
        assert_eq!(f1[1].dim(), (16, 4, 4));
        assert_eq!(f1[2].dim(), (32, 2, 2));
    }

    #[test]
    fn tap_weight_count_mismatch_is_rejected() {
        let ex = ConvStackExtractor::<f64>::proxy(17);
        let x = random_clip::<f64>((1, 8, 8), 8);
        let w = LossWeights { layer_weights: vec![1.0], ..LossWeights::default() };
        assert!(perceptual_loss(&x, &x, &ex, &w).is_err());
        assert!(perceptual_loss_grad(&x, &x, &ex, &w).is_err());
    }

    #[test]
    fn perceptual_grad_matches_finite_differences() {
        let ex = ConvStackExtractor::<f64>::proxy(23);
        let x = random_clip::<f64>((2, 8, 8), 9);
        let xhat = random_clip::<f64>((2, 8, 8), 10);
        let w = LossWeights { layer_weights: vec![1.0, 1.0, 1.0], ..LossWeights::default() };
        let g = perceptual_loss_grad(&x, &xhat, &ex, &w).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut ok = 0;
        let samples = 25;
        let dims = xhat.data().dim();
        for _ in 0..samples {
            let idx = (
                rng.gen_range(0..dims.0),
                rng.gen_range(0..dims.1),
                rng.gen_range(0..dims.2),
                rng.gen_range(0..dims.3),
            );
            let eval = |delta: f64| -> f64 {
                let mut d = xhat.data().clone();
                d[idx] += delta;
                let c = VideoClip::new(d, 16).unwrap();
                perceptual_loss(&x, &c, &ex, &w).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = g[idx];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            if rel < 1e-3 || (a - fd).abs() < 1e-8 {
                ok += 1;
            }
        }
        assert!(ok >= 22, "perceptual gradient check passed {ok}/{samples}");
    }

    fn tiny_vgg_tensors(seed: u64) -> NamedTensors {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut t = NamedTensors::new();
        let widths = [
            ("conv1_1", 3usize, 4usize),
            ("conv1_2", 4, 4),
            ("conv2_1", 4, 6),
            ("conv2_2", 6, 6),
            ("conv3_1", 6, 8),
            ("conv3_2", 8, 8),
            ("conv3_3", 8, 8),
        ];
        for (name, cin, cout) in widths {
            let w = ndarray::ArrayD::from_shape_simple_fn(IxDyn(&[cout, cin, 3, 3]), || {
                rng.gen_range(-0.2f32..0.2)
            });
            let b = ndarray::ArrayD::from_shape_simple_fn(IxDyn(&[cout]), || {
                rng.gen_range(-0.1f32..0.1)
            });
            t.insert(&format!("{name}.w"), w).unwrap();
            t.insert(&format!("{name}.b"), b).unwrap();
        }
        t
    }

    #[test]
    fn vgg_import_builds_and_taps_expected_shapes() {
        let tensors = tiny_vgg_tensors(31);
        let ex = ConvStackExtractor::<f64>::vgg16(&tensors, true).unwrap();
        assert_eq!(ex.tap_count(), 3);
        let x = random_clip::<f64>((1, 8, 8), 12);
        let taps = ex.features(x.data().index_axis(Axis(1), 0)).unwrap();
        assert_eq!(taps[0].dim(), (4, 8, 8));
        assert_eq!(taps[1].dim(), (6, 4, 4));
        assert_eq!(taps[2].dim(), (8, 2, 2));
        // normalization changes the features
        let ex_raw = ConvStackExtractor::<f64>::vgg16(&tensors, false).unwrap();
        let taps_raw = ex_raw.features(x.data().index_axis(Axis(1), 0)).unwrap();
        assert_ne!(taps[0], taps_raw[0]);
        // gradient flows through the normalized stack too
        let w = LossWeights::default();
        let xhat = random_clip::<f64>((1, 8, 8), 13);
        let g = perceptual_loss_grad(&x, &xhat, &ex, &w).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn vgg_import_rejects_missing_or_misshapen_tensors() {
        let mut tensors = tiny_vgg_tensors(31);
        assert!(ConvStackExtractor::<f64>::vgg16(&NamedTensors::new(), false).is_err());
        tensors
            .insert("conv2_1.w", ndarray::ArrayD::zeros(IxDyn(&[6, 5, 3, 3])))
            .unwrap();
        assert!(ConvStackExtractor::<f64>::vgg16(&tensors, false).is_err());
    }

    #[test]
    fn counting_extractor_counts_invocations() {
        let ex = ConvStackExtractor::<f64>::proxy(17);
        let counting = CountingExtractor::new(&ex);
        assert_eq!(counting.call_count(), 0);
        let x = random_clip::<f64>((2, 8, 8), 14);
        let w = LossWeights::default();
        perceptual_loss(&x, &x, &counting, &w).unwrap();
        assert_eq!(counting.call_count(), 4); // two frames, two clips each
    }
}
