use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Final nonlinearity mapping decoder output into [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
    Clamp,
}

/// Architecture, codebook, and loss hyperparameters. Ablation variants are
/// instances of this type (levels=1 for the single-level baseline, gamma=0
/// to disable the perceptual term).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_levels")]
    pub levels: u8,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_codebook_size")]
    pub codebook_size_top: usize,
    #[serde(default = "default_codebook_size")]
    pub codebook_size_bottom: usize,
    /// (temporal, spatial) downsampling of the bottom latent grid.
    #[serde(default = "default_bottom_stride")]
    pub bottom_stride: (usize, usize),
    /// Additional (temporal, spatial) downsampling of the top grid.
    #[serde(default = "default_top_extra_stride")]
    pub top_extra_stride: (usize, usize),
    #[serde(default = "default_res_blocks")]
    pub residual_blocks_per_stage: usize,
    #[serde(default = "default_output_activation")]
    pub output_activation: OutputActivation,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_levels() -> u8 {
    2
}
fn default_base_channels() -> usize {
    184
}
fn default_latent_dim() -> usize {
    128
}
fn default_codebook_size() -> usize {
    1024
}
fn default_bottom_stride() -> (usize, usize) {
    (2, 4)
}
fn default_top_extra_stride() -> (usize, usize) {
    (2, 2)
}
fn default_res_blocks() -> usize {
    2
}
fn default_output_activation() -> OutputActivation {
    OutputActivation::Sigmoid
}
fn default_beta() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    0.4
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            base_channels: default_base_channels(),
            latent_dim: default_latent_dim(),
            codebook_size_top: default_codebook_size(),
            codebook_size_bottom: default_codebook_size(),
            bottom_stride: default_bottom_stride(),
            top_extra_stride: default_top_extra_stride(),
            residual_blocks_per_stage: default_res_blocks(),
            output_activation: default_output_activation(),
            beta: default_beta(),
            gamma: default_gamma(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.levels == 1 || self.levels == 2) {
            return Err(Error::InvalidConfig(format!("levels must be 1 or 2, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "base_channels must be a positive multiple of 4, got {}",
                self.base_channels
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig("latent_dim must be positive".into()));
        }
        for (name, k) in [
            ("codebook_size_top", self.codebook_size_top),
            ("codebook_size_bottom", self.codebook_size_bottom),
        ] {
            if k == 0 || k > 65536 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be in 1..=65536, got {k}"
                )));
            }
        }
        if self.bottom_stride != (2, 4) || self.top_extra_stride != (2, 2) {
            return Err(Error::InvalidConfig(
                "only the (2,4) bottom / (2,2) top stride plan is implemented".into(),
            ));
        }
        if self.residual_blocks_per_stage == 0 {
            return Err(Error::InvalidConfig(
                "residual_blocks_per_stage must be positive".into(),
            ));
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite non-negative real, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Cumulative (temporal, height, width) divisor the input dims must
    /// satisfy: the bottom strides, further doubled when a top level exists.
    pub fn required_divisor(&self) -> (usize, usize, usize) {
        let (bt, bs) = self.bottom_stride;
        if self.levels == 2 {
            let (tt, ts) = self.top_extra_stride;
            (bt * tt, bs * ts, bs * ts)
        } else {
            (bt, bs, bs)
        }
    }

    /// Bottom latent grid dims for an input of the given size.
    pub fn bottom_grid_dims(&self, dims: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (t, h, w) = dims;
        let (dt, dh, dw) = self.required_divisor();
        if t == 0 || h == 0 || w == 0 || t % dt != 0 || h % dh != 0 || w % dw != 0 {
            return Err(Error::DimensionMismatch(format!(
                "clip dims {t}x{h}x{w} must be positive multiples of {dt}x{dh}x{dw}"
            )));
        }
        let (bt, bs) = self.bottom_stride;
        Ok((t / bt, h / bs, w / bs))
    }

    /// Top latent grid dims; only meaningful for levels=2.
    pub fn top_grid_dims(&self, dims: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (t, h, w) = self.bottom_grid_dims(dims)?;
        let (tt, ts) = self.top_extra_stride;
        Ok((t / tt, h / ts, w / ts))
    }
}

fn conv_params(cin: usize, cout: usize, kernel: (usize, usize, usize), groups: usize) -> u64 {
    let (kt, kh, kw) = kernel;
    (cout * (cin / groups) * kt * kh * kw + cout) as u64
}

/// Exact count of trainable scalars (convolution weights and biases).
/// Codebook entries are EMA-updated, not gradient-trained; see
/// [`codebook_scalar_count`].
pub fn param_count(cfg: &ModelConfig) -> Result<u64> {
    cfg.validate()?;
    let c = cfg.base_channels;
    let d = cfg.latent_dim;
    let r = cfg.residual_blocks_per_stage as u64;
    let res_block = |groups: usize| 2 * conv_params(c, c, (3, 3, 3), groups);

    let mut n = 0u64;
    // bottom encoder trunk
    n += conv_params(3, c / 2, (3, 4, 4), 1);
    n += conv_params(c / 2, c, (4, 4, 4), 1);
    n += conv_params(c, c, (3, 3, 3), 1);
    n += r * res_block(1);
    if cfg.levels == 2 {
        // top encoder, fusion, and the top half of the decoder
        n += conv_params(c, c, (4, 4, 4), 1);
        n += r * res_block(4);
        n += conv_params(c, d, (1, 1, 1), 1); // head_top
        n += conv_params(d, c, (4, 4, 4), 1); // fuse_up (transposed)
        n += conv_params(2 * c, d, (1, 1, 1), 1); // head_bottom
        n += conv_params(d, c, (4, 4, 4), 1); // dec_top_up (transposed)
        n += conv_params(c + d, c, (3, 3, 3), 1); // dec_in
    } else {
        n += conv_params(c, d, (1, 1, 1), 1); // head_bottom
        n += conv_params(d, c, (3, 3, 3), 1); // dec_in
    }
    n += r * res_block(1);
    n += conv_params(c, c / 2, (4, 4, 4), 1); // dec_up1 (transposed)
    n += conv_params(c / 2, c / 4, (3, 4, 4), 1); // dec_up2 (transposed)
    n += conv_params(c / 4, 3, (3, 3, 3), 1);
    Ok(n)
}

/// Scalars held by the codebooks (reported separately from the trainable
/// count).
pub fn codebook_scalar_count(cfg: &ModelConfig) -> u64 {
    let mut n = (cfg.codebook_size_bottom * cfg.latent_dim) as u64;
    if cfg.levels == 2 {
        n += (cfg.codebook_size_top * cfg.latent_dim) as u64;
    }
    n
}
