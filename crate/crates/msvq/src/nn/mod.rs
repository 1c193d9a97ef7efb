//! Numeric substrate for the codec: 3D convolutions with hand-derived
//! backward passes, expressed as im2col/col2im plus GEMM so the heavy
//! work runs through `ndarray`'s matrix multiply.
//!
//! Everything is generic over `f32`/`f64`; training runs in 32-bit,
//! gradient checks in 64-bit.

use ndarray::{Array1, Array2, Array4, Array5, ArrayView4, LinalgScalar};
use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;

use crate::error::{Error, Result};

/// Element type bound shared by all numeric code in the crate.
pub trait Scalar:
    Float
    + NumAssign
    + LinalgScalar
    + FromPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
{
    fn from_f(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn to_f(self) -> f64;
}

impl Scalar for f32 {
    fn to_f(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn to_f(self) -> f64 {
        self
    }
}

pub type Dims3 = [usize; 3];

fn conv_out_dims(input: Dims3, kernel: Dims3, stride: Dims3, padding: Dims3) -> Result<Dims3> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let padded = input[a] + 2 * padding[a];
        if padded < kernel[a] {
            return Err(Error::DimensionMismatch(format!(
                "input dim {} (padded {}) smaller than kernel {}",
                input[a], padded, kernel[a]
            )));
        }
        let span = padded - kernel[a];
        if span % stride[a] != 0 {
            return Err(Error::DimensionMismatch(format!(
                "input dim {} not compatible with kernel {} stride {} padding {}",
                input[a], kernel[a], stride[a], padding[a]
            )));
        }
        out[a] = span / stride[a] + 1;
    }
    Ok(out)
}

fn convt_out_dims(input: Dims3, kernel: Dims3, stride: Dims3, padding: Dims3) -> Result<Dims3> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let v = (input[a] - 1) * stride[a] + kernel[a];
        if v < 2 * padding[a] + 1 {
            return Err(Error::DimensionMismatch(format!(
                "transposed conv output dim would be non-positive (input {})",
                input[a]
            )));
        }
        out[a] = v - 2 * padding[a];
    }
    Ok(out)
}

/// Gathers kernel-sized patches of `image` (C x dims) into a matrix of shape
/// (positions, C * kt * kh * kw). Position p maps to image coordinates
/// `p * stride - padding + k`; out-of-bounds taps contribute zero.
fn im2col<F: Scalar>(
    image: ArrayView4<F>,
    pos_dims: Dims3,
    kernel: Dims3,
    stride: Dims3,
    padding: Dims3,
) -> Array2<F> {
    let (ch, dt, dh, dw) = image.dim();
    let [pt, ph, pw] = pos_dims;
    let [kt, kh, kw] = kernel;
    let cols_per_ch = kt * kh * kw;
    let mut cols = Array2::<F>::zeros((pt * ph * pw, ch * cols_per_ch));
    for (r, mut row) in cols.outer_iter_mut().enumerate() {
        let wo = r % pw;
        let ho = (r / pw) % ph;
        let to = r / (pw * ph);
        let t0 = (to * stride[0]) as isize - padding[0] as isize;
        let h0 = (ho * stride[1]) as isize - padding[1] as isize;
        let w0 = (wo * stride[2]) as isize - padding[2] as isize;
        for a in 0..kt {
            let ti = t0 + a as isize;
            if ti < 0 || ti >= dt as isize {
                continue;
            }
            for b in 0..kh {
                let hi = h0 + b as isize;
                if hi < 0 || hi >= dh as isize {
                    continue;
                }
                for d in 0..kw {
                    let wi = w0 + d as isize;
                    if wi < 0 || wi >= dw as isize {
                        continue;
                    }
                    let col_base = (a * kh + b) * kw + d;
                    for c in 0..ch {
                        row[c * cols_per_ch + col_base] =
                            image[(c, ti as usize, hi as usize, wi as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`]: accumulates patch columns back into an
/// image of shape (C x image_dims).
fn col2im<F: Scalar>(
    cols: &Array2<F>,
    channels: usize,
    image_dims: Dims3,
    pos_dims: Dims3,
    kernel: Dims3,
    stride: Dims3,
    padding: Dims3,
) -> Array4<F> {
    let [dt, dh, dw] = image_dims;
    let [_, ph, pw] = pos_dims;
    let [kt, kh, kw] = kernel;
    let cols_per_ch = kt * kh * kw;
    let mut image = Array4::<F>::zeros((channels, dt, dh, dw));
    for (r, row) in cols.outer_iter().enumerate() {
        let wo = r % pw;
        let ho = (r / pw) % ph;
        let to = r / (pw * ph);
        let t0 = (to * stride[0]) as isize - padding[0] as isize;
        let h0 = (ho * stride[1]) as isize - padding[1] as isize;
        let w0 = (wo * stride[2]) as isize - padding[2] as isize;
        for a in 0..kt {
            let ti = t0 + a as isize;
            if ti < 0 || ti >= dt as isize {
                continue;
            }
            for b in 0..kh {
                let hi = h0 + b as isize;
                if hi < 0 || hi >= dh as isize {
                    continue;
                }
                for d in 0..kw {
                    let wi = w0 + d as isize;
                    if wi < 0 || wi >= dw as isize {
                        continue;
                    }
                    let col_base = (a * kh + b) * kw + d;
                    for c in 0..channels {
                        image[(c, ti as usize, hi as usize, wi as usize)] +=
                            row[c * cols_per_ch + col_base];
                    }
                }
            }
        }
    }
    image
}

/// Strided 3D convolution with optional channel groups.
/// Weight layout: (out_channels, in_channels / groups, kt, kh, kw).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<F> {
    pub weight: Array5<F>,
    pub bias: Array1<F>,
    pub stride: Dims3,
    pub padding: Dims3,
    pub groups: usize,
}

/// Parameter gradients of a [`Conv3d`].
pub struct Conv3dGrad<F> {
    pub weight: Array5<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Conv3d<F> {
    /// Fan-in-scaled uniform weights, zero biases.
    pub fn init<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: Dims3,
        stride: Dims3,
        padding: Dims3,
        groups: usize,
    ) -> Self {
        assert!(groups >= 1 && in_ch % groups == 0 && out_ch % groups == 0);
        let fan_in = (in_ch / groups) * kernel[0] * kernel[1] * kernel[2];
        // He-uniform bound; keeps activation scale roughly constant through
        // the ReLU stages instead of attenuating per layer
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Array5::from_shape_simple_fn(
            (out_ch, in_ch / groups, kernel[0], kernel[1], kernel[2]),
            || F::from_f(rng.gen_range(-bound..bound)),
        );
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            padding,
            groups,
        }
    }

    pub fn kernel(&self) -> Dims3 {
        let d = self.weight.dim();
        [d.2, d.3, d.4]
    }

    pub fn out_dims(&self, input: Dims3) -> Result<Dims3> {
        conv_out_dims(input, self.kernel(), self.stride, self.padding)
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let (out_ch, in_per_g, kt, kh, kw) = self.weight.dim();
        let (cin, t, h, w) = x.dim();
        if cin != in_per_g * self.groups {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                in_per_g * self.groups,
                cin
            )));
        }
        let out = self.out_dims([t, h, w])?;
        let positions = out[0] * out[1] * out[2];
        let cols_per_ch = kt * kh * kw;
        let og = out_ch / self.groups;
        let mut y = Array4::<F>::zeros((out_ch, out[0], out[1], out[2]));
        for g in 0..self.groups {
            let xg = x.slice(ndarray::s![g * in_per_g..(g + 1) * in_per_g, .., .., ..]);
            let cols = im2col(xg, out, [kt, kh, kw], self.stride, self.padding);
            let wg = self
                .weight
                .slice(ndarray::s![g * og..(g + 1) * og, .., .., .., ..])
                .into_shape_with_order((og, in_per_g * cols_per_ch))
                .map_err(|e| Error::Internal(e.to_string()))?
                .to_owned();
            let yg = cols.dot(&wg.t()); // (positions, og)
            for oc in 0..og {
                let mut plane = y.index_axis_mut(ndarray::Axis(0), g * og + oc);
                let src = yg.column(oc);
                for (dst, &v) in plane.iter_mut().zip(src.iter()) {
                    *dst = v + self.bias[g * og + oc];
                }
            }
            debug_assert_eq!(positions, yg.nrows());
        }
        Ok(y)
    }

    /// Backward pass: input gradient plus parameter gradients.
    pub fn vjp(&self, x: &Array4<F>, dout: &Array4<F>) -> Result<(Array4<F>, Conv3dGrad<F>)> {
        let (out_ch, in_per_g, kt, kh, kw) = self.weight.dim();
        let (_, t, h, w) = x.dim();
        let out = self.out_dims([t, h, w])?;
        if dout.dim() != (out_ch, out[0], out[1], out[2]) {
            return Err(Error::ShapeMismatch("conv vjp: dout shape".into()));
        }
        let positions = out[0] * out[1] * out[2];
        let cols_per_ch = kt * kh * kw;
        let og = out_ch / self.groups;
        let mut dx = Array4::<F>::zeros(x.dim());
        let mut dw = Array5::<F>::zeros(self.weight.dim());
        let mut db = Array1::<F>::zeros(out_ch);
        for oc in 0..out_ch {
            db[oc] = dout.index_axis(ndarray::Axis(0), oc).iter().copied().sum();
        }
        for g in 0..self.groups {
            let xg = x.slice(ndarray::s![g * in_per_g..(g + 1) * in_per_g, .., .., ..]);
            let cols = im2col(xg, out, [kt, kh, kw], self.stride, self.padding);
            // dout for this group as (positions, og)
            let dg = dout.slice(ndarray::s![g * og..(g + 1) * og, .., .., ..]);
            let dg2 = dg
                .into_shape_with_order((og, positions))
                .map_err(|e| Error::Internal(e.to_string()))?;
            let dwg = dg2.dot(&cols); // (og, in_per_g*cols_per_ch)
            dw.slice_mut(ndarray::s![g * og..(g + 1) * og, .., .., .., ..])
                .assign(
                    &dwg.into_shape_with_order((og, in_per_g, kt, kh, kw))
                        .map_err(|e| Error::Internal(e.to_string()))?,
                );
            let wg = self
                .weight
                .slice(ndarray::s![g * og..(g + 1) * og, .., .., .., ..])
                .into_shape_with_order((og, in_per_g * cols_per_ch))
                .map_err(|e| Error::Internal(e.to_string()))?
                .to_owned();
            let dg2t = dg2.t().to_owned(); // (positions, og)
            let dcols = dg2t.dot(&wg); // (positions, in_per_g*cols_per_ch)
            let dxg = col2im(
                &dcols,
                in_per_g,
                [t, h, w],
                out,
                [kt, kh, kw],
                self.stride,
                self.padding,
            );
            dx.slice_mut(ndarray::s![g * in_per_g..(g + 1) * in_per_g, .., .., ..])
                .assign(&dxg);
        }
        Ok((dx, Conv3dGrad { weight: dw, bias: db }))
    }
}

/// Transposed 3D convolution (fractionally-strided upsampling).
/// Weight layout: (in_channels, out_channels, kt, kh, kw).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose3d<F> {
    pub weight: Array5<F>,
    pub bias: Array1<F>,
    pub stride: Dims3,
    pub padding: Dims3,
}

pub struct ConvTranspose3dGrad<F> {
    pub weight: Array5<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> ConvTranspose3d<F> {
    pub fn init<R: Rng>(
        rng: &mut R,
        in_ch: usize,
        out_ch: usize,
        kernel: Dims3,
        stride: Dims3,
        padding: Dims3,
    ) -> Self {
        let fan_in = in_ch * kernel[0] * kernel[1] * kernel[2];
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Array5::from_shape_simple_fn(
            (in_ch, out_ch, kernel[0], kernel[1], kernel[2]),
            || F::from_f(rng.gen_range(-bound..bound)),
        );
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            padding,
        }
    }

    pub fn kernel(&self) -> Dims3 {
        let d = self.weight.dim();
        [d.2, d.3, d.4]
    }

    pub fn out_dims(&self, input: Dims3) -> Result<Dims3> {
        convt_out_dims(input, self.kernel(), self.stride, self.padding)
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<Array4<F>> {
        let (in_ch, out_ch, kt, kh, kw) = self.weight.dim();
        let (cin, t, h, w) = x.dim();
        if cin != in_ch {
            return Err(Error::ShapeMismatch(format!(
                "transposed conv expects {in_ch} input channels, got {cin}"
            )));
        }
        let out = self.out_dims([t, h, w])?;
        let positions = t * h * w;
        let x2 = x
            .view()
            .into_shape_with_order((in_ch, positions))
            .map_err(|e| Error::Internal(e.to_string()))?;
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((in_ch, out_ch * kt * kh * kw))
            .map_err(|e| Error::Internal(e.to_string()))?;
        let cols = x2.t().dot(&w2); // (positions, out_ch*k)
        let mut y = col2im(
            &cols,
            out_ch,
            out,
            [t, h, w],
            [kt, kh, kw],
            self.stride,
            self.padding,
        );
        for oc in 0..out_ch {
            let b = self.bias[oc];
            y.index_axis_mut(ndarray::Axis(0), oc).mapv_inplace(|v| v + b);
        }
        Ok(y)
    }

    pub fn vjp(
        &self,
        x: &Array4<F>,
        dout: &Array4<F>,
    ) -> Result<(Array4<F>, ConvTranspose3dGrad<F>)> {
        let (in_ch, out_ch, kt, kh, kw) = self.weight.dim();
        let (_, t, h, w) = x.dim();
        let out = self.out_dims([t, h, w])?;
        if dout.dim() != (out_ch, out[0], out[1], out[2]) {
            return Err(Error::ShapeMismatch("transposed conv vjp: dout shape".into()));
        }
        let positions = t * h * w;
        let dcols = im2col(
            dout.view(),
            [t, h, w],
            [kt, kh, kw],
            self.stride,
            self.padding,
        ); // (positions, out_ch*k)
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((in_ch, out_ch * kt * kh * kw))
            .map_err(|e| Error::Internal(e.to_string()))?;
        let dx2 = dcols.dot(&w2.t()); // (positions, in_ch)
        let dx = dx2
            .t()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((in_ch, t, h, w))
            .map_err(|e| Error::Internal(e.to_string()))?;
        let x2 = x
            .view()
            .into_shape_with_order((in_ch, positions))
            .map_err(|e| Error::Internal(e.to_string()))?;
        let dw2 = x2.dot(&dcols); // (in_ch, out_ch*k)
        let dw = dw2
            .into_shape_with_order((in_ch, out_ch, kt, kh, kw))
            .map_err(|e| Error::Internal(e.to_string()))?;
        let mut db = Array1::<F>::zeros(out_ch);
        for oc in 0..out_ch {
            db[oc] = dout.index_axis(ndarray::Axis(0), oc).iter().copied().sum();
        }
        Ok((dx, ConvTranspose3dGrad { weight: dw, bias: db }))
    }
}

pub fn relu<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// ReLU gradient with respect to the pre-activation input.
pub fn relu_vjp<F: Scalar>(x: &Array4<F>, dout: &Array4<F>) -> Array4<F> {
    let mut dx = dout.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn sigmoid<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| F::one() / (F::one() + (-v).exp()))
}

/// Sigmoid gradient expressed in terms of the activation output `y`.
pub fn sigmoid_vjp<F: Scalar>(y: &Array4<F>, dout: &Array4<F>) -> Array4<F> {
    let mut dx = dout.clone();
    dx.zip_mut_with(y, |d, &v| *d = *d * v * (F::one() - v));
    dx
}

pub fn clamp01<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v.max(F::zero()).min(F::one()))
}

/// Clamp passes gradient only where the input lies strictly inside (0, 1).
pub fn clamp01_vjp<F: Scalar>(x: &Array4<F>, dout: &Array4<F>) -> Array4<F> {
    let mut dx = dout.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= F::zero() || v >= F::one() {
            *d = F::zero();
        }
    });
    dx
}

/// 2x2 spatial max pooling over (C, T, H, W); H and W must be even.
pub fn max_pool2<F: Scalar>(x: &Array4<F>) -> Result<Array4<F>> {
    let (c, t, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "max pool requires even spatial dims, got {h}x{w}"
        )));
    }
    let mut y = Array4::<F>::zeros((c, t, h / 2, w / 2));
    for ci in 0..c {
        for ti in 0..t {
            for hi in 0..h / 2 {
                for wi in 0..w / 2 {
                    let mut m = x[(ci, ti, 2 * hi, 2 * wi)];
                    for (dy, dx_) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x[(ci, ti, 2 * hi + dy, 2 * wi + dx_)];
                        if v > m {
                            m = v;
                        }
                    }
                    y[(ci, ti, hi, wi)] = m;
                }
            }
        }
    }
    Ok(y)
}

/// Max-pool gradient: routes each output gradient to the first maximal tap.
pub fn max_pool2_vjp<F: Scalar>(x: &Array4<F>, dout: &Array4<F>) -> Result<Array4<F>> {
    let (c, t, h, w) = x.dim();
    if dout.dim() != (c, t, h / 2, w / 2) {
        return Err(Error::ShapeMismatch("max pool vjp: dout shape".into()));
    }
    let mut dx = Array4::<F>::zeros(x.dim());
    for ci in 0..c {
        for ti in 0..t {
            for hi in 0..h / 2 {
                for wi in 0..w / 2 {
                    let mut best = (0usize, 0usize);
                    let mut m = x[(ci, ti, 2 * hi, 2 * wi)];
                    for (dy, dx_) in [(0, 1), (1, 0), (1, 1)] {
                        let v = x[(ci, ti, 2 * hi + dy, 2 * wi + dx_)];
                        if v > m {
                            m = v;
                            best = (dy, dx_);
                        }
                    }
                    dx[(ci, ti, 2 * hi + best.0, 2 * wi + best.1)] += dout[(ci, ti, hi, wi)];
                }
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rand_array4(rng: &mut ChaCha20Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_simple_fn(dim, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv_output_dims() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let conv = Conv3d::<f64>::init(&mut rng, 3, 8, [4, 4, 4], [2, 2, 2], [1, 1, 1], 1);
        assert_eq!(conv.out_dims([8, 16, 16]).unwrap(), [4, 8, 8]);
        assert!(conv.out_dims([7, 16, 16]).is_err());
        assert_eq!(conv.weight.len() + conv.bias.len(), 8 * 3 * 64 + 8);
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let conv = Conv3d::<f64>::init(&mut rng, 2, 3, [3, 3, 3], [1, 2, 2], [1, 1, 1], 1);
        let x = rand_array4(&mut rng, (2, 4, 5, 5));
        let y = conv.forward(&x).unwrap();
        // direct seven-loop reference
        let out = conv.out_dims([4, 5, 5]).unwrap();
        for oc in 0..3 {
            for to in 0..out[0] {
                for ho in 0..out[1] {
                    for wo in 0..out[2] {
                        let mut acc = conv.bias[oc];
                        for ic in 0..2 {
                            for a in 0..3 {
                                for b in 0..3 {
                                    for d in 0..3 {
                                        let ti = (to * 1 + a) as isize - 1;
                                        let hi = (ho * 2 + b) as isize - 1;
                                        let wi = (wo * 2 + d) as isize - 1;
                                        if ti < 0 || hi < 0 || wi < 0 {
                                            continue;
                                        }
                                        let (ti, hi, wi) = (ti as usize, hi as usize, wi as usize);
                                        if ti >= 4 || hi >= 5 || wi >= 5 {
                                            continue;
                                        }
                                        acc += conv.weight[(oc, ic, a, b, d)] * x[(ic, ti, hi, wi)];
                                    }
                                }
                            }
                        }
                        let got = y[(oc, to, ho, wo)];
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    fn fd_check<FWD, G>(forward: FWD, grads: G, params: &mut [f64], tol: f64)
    where
        FWD: Fn(&[f64]) -> f64,
        G: Fn(&[f64]) -> Vec<f64>,
    {
        let analytic = grads(params);
        let eps = 1e-6;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + eps;
            let hi = forward(params);
            params[i] = orig - eps;
            let lo = forward(params);
            params[i] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (fd - analytic[i]).abs() / denom < tol,
                "coord {i}: fd {fd} analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let conv = Conv3d::<f64>::init(&mut rng, 2, 4, [3, 3, 3], [1, 2, 2], [1, 1, 1], 2);
        let x0 = rand_array4(&mut rng, (2, 3, 5, 5));
        // loss = sum(forward(x)^2) / 2 so dL/dy = y
        let loss = |conv: &Conv3d<f64>, x: &Array4<f64>| -> f64 {
            let y = conv.forward(x).unwrap();
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };

        // input gradient
        let mut xv: Vec<f64> = x0.iter().copied().collect();
        let shape = x0.dim();
        fd_check(
            |p| {
                let x = Array4::from_shape_vec(shape, p.to_vec()).unwrap();
                loss(&conv, &x)
            },
            |p| {
                let x = Array4::from_shape_vec(shape, p.to_vec()).unwrap();
                let y = conv.forward(&x).unwrap();
                let (dx, _) = conv.vjp(&x, &y).unwrap();
                dx.iter().copied().collect()
            },
            &mut xv,
            1e-6,
        );

        // weight + bias gradient
        let wshape = conv.weight.dim();
        let nw = conv.weight.len();
        let mut pv: Vec<f64> = conv.weight.iter().copied().chain(conv.bias.iter().copied()).collect();
        let rebuild = |p: &[f64]| {
            let mut c = conv.clone();
            c.weight = Array5::from_shape_vec(wshape, p[..nw].to_vec()).unwrap();
            c.bias = Array1::from_vec(p[nw..].to_vec());
            c
        };
        fd_check(
            |p| loss(&rebuild(p), &x0),
            |p| {
                let c = rebuild(p);
                let y = c.forward(&x0).unwrap();
                let (_, g) = c.vjp(&x0, &y).unwrap();
                g.weight.iter().copied().chain(g.bias.iter().copied()).collect()
            },
            &mut pv,
            1e-6,
        );
    }

    #[test]
    fn conv_transpose_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let convt = ConvTranspose3d::<f64>::init(&mut rng, 3, 2, [4, 4, 4], [2, 2, 2], [1, 1, 1]);
        assert_eq!(convt.out_dims([2, 3, 3]).unwrap(), [4, 6, 6]);
        let x0 = rand_array4(&mut rng, (3, 2, 3, 3));
        let loss = |c: &ConvTranspose3d<f64>, x: &Array4<f64>| -> f64 {
            let y = c.forward(x).unwrap();
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };

        let mut xv: Vec<f64> = x0.iter().copied().collect();
        let shape = x0.dim();
        fd_check(
            |p| {
                let x = Array4::from_shape_vec(shape, p.to_vec()).unwrap();
                loss(&convt, &x)
            },
            |p| {
                let x = Array4::from_shape_vec(shape, p.to_vec()).unwrap();
                let y = convt.forward(&x).unwrap();
                let (dx, _) = convt.vjp(&x, &y).unwrap();
                dx.iter().copied().collect()
            },
            &mut xv,
            1e-6,
        );

        let wshape = convt.weight.dim();
        let nw = convt.weight.len();
        let mut pv: Vec<f64> =
            convt.weight.iter().copied().chain(convt.bias.iter().copied()).collect();
        let rebuild = |p: &[f64]| {
            let mut c = convt.clone();
            c.weight = Array5::from_shape_vec(wshape, p[..nw].to_vec()).unwrap();
            c.bias = Array1::from_vec(p[nw..].to_vec());
            c
        };
        fd_check(
            |p| loss(&rebuild(p), &x0),
            |p| {
                let c = rebuild(p);
                let y = c.forward(&x0).unwrap();
                let (_, g) = c.vjp(&x0, &y).unwrap();
                g.weight.iter().copied().chain(g.bias.iter().copied()).collect()
            },
            &mut pv,
            1e-6,
        );
    }

    #[test]
    fn transpose_inverts_conv_dims() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let conv = Conv3d::<f64>::init(&mut rng, 4, 8, [3, 4, 4], [1, 2, 2], [1, 1, 1], 1);
        let convt = ConvTranspose3d::<f64>::init(&mut rng, 8, 4, [3, 4, 4], [1, 2, 2], [1, 1, 1]);
        let dims = [6, 8, 8];
        let down = conv.out_dims(dims).unwrap();
        assert_eq!(down, [6, 4, 4]);
        assert_eq!(convt.out_dims(down).unwrap(), dims);
    }

    #[test]
    fn max_pool_and_grad() {
        let x = Array4::from_shape_vec(
            (1, 1, 2, 4),
            vec![1.0, 2.0, 3.0, 0.0, 0.5, 0.25, 3.0, 1.0],
        )
        .unwrap();
        let y = max_pool2(&x).unwrap();
        assert_eq!(y.dim(), (1, 1, 1, 2));
        assert_eq!(y[(0, 0, 0, 0)], 2.0);
        assert_eq!(y[(0, 0, 0, 1)], 3.0);
        let dout = Array4::from_elem((1, 1, 1, 2), 1.0);
        let dx = max_pool2_vjp(&x, &dout).unwrap();
        assert_eq!(dx[(0, 0, 0, 1)], 1.0); // max of first window
        assert_eq!(dx[(0, 0, 0, 2)], 1.0); // first occurrence of tied max 3.0
        assert_eq!(dx[(0, 0, 1, 2)], 0.0);
        assert_eq!(dx.sum(), 2.0);
    }
}
