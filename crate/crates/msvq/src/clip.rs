//! Video clip container shared by the model, data, and metrics modules.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// A single video clip: channels(3) x T x H x W with values in [0, 1],
/// plus frame-rate metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip<F> {
    data: Array4<F>,
    fps: u32,
}

impl<F: Scalar> VideoClip<F> {
    /// Builds a clip, validating channel count and the [0, 1] value range.
    pub fn new(data: Array4<F>, fps: u32) -> Result<Self> {
        if fps == 0 {
            return Err(Error::InvalidInput("fps must be positive".into()));
        }
        if data.dim().0 != 3 {
            return Err(Error::ShapeMismatch(format!(
                "clip must have 3 channels, got {}",
                data.dim().0
            )));
        }
        if data
            .iter()
            .any(|&v| !v.is_finite() || v < F::zero() || v > F::one())
        {
            return Err(Error::InvalidInput(
                "clip values must be finite and within [0, 1]".into(),
            ));
        }
        Ok(Self { data, fps })
    }

    /// Builds a clip from data known to be in range (e.g. a sigmoid output).
    pub(crate) fn from_model_output(data: Array4<F>, fps: u32) -> Self {
        debug_assert!(data
            .iter()
            .all(|&v| v >= F::zero() && v <= F::one()));
        Self { data, fps }
    }

    pub fn data(&self) -> &Array4<F> {
        &self.data
    }

    pub fn into_data(self) -> Array4<F> {
        self.data
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    /// (T, H, W) of the clip.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (_, t, h, w) = self.data.dim();
        (t, h, w)
    }

    pub fn frames(&self) -> usize {
        self.dims().0
    }
}
