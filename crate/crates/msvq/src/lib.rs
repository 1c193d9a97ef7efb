//! Multi-scale vector-quantized video codec.
//!
//! A two-level spatiotemporal VQ-VAE for short low-resolution clips: 3D
//! residual encoders/decoders, EMA codebooks, a bit-exact latent bitstream
//! (`.msvq`), training with reconstruction + commitment + perceptual losses,
//! and PSNR/SSIM/bpp evaluation.

pub mod bitstream;
pub mod clip;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub(crate) mod nn;
pub mod quantizer;
pub mod trainer;

pub use clip::VideoClip;
pub use error::{Error, Result};
pub use losses::{
    perceptual_loss, perceptual_loss_grad, recon_loss, recon_loss_grad, total_loss,
    ConvStackExtractor, CountingExtractor, FeatureExtractor, LossWeights,
};
pub use model::{
    codebook_scalar_count, param_count, EncodeOutput, ForwardOutput, GradStore, LatentGrid,
    Model, ModelConfig, OutputActivation,
};
pub use metrics::{
    bpp_deflate, bpp_theoretical, clip_metrics, psnr, quantize_u8, rate_report, ssim, ClipMetrics,
    MetricConfig, RateReport,
};
pub use nn::Scalar;
pub use quantizer::{Codebook, Codebooks, IndexGrid, Level};
pub use trainer::{
    cosine_lr, evaluate, load_checkpoint, save_checkpoint, steps_per_epoch, total_steps, train,
    Adam, AdamConfig, ClipEval, EvalReport, LoadedCheckpoint, NamedTensors, StepRecord,
    TrainConfig, TrainOutcome, TrainState,
};

