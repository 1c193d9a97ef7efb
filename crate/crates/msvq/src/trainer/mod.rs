//! Optimization loop, checkpoint persistence, and evaluation orchestration.
//!
//! Determinism contract: a run is a pure function of (configs, seed, dataset
//! order). Batch order for an epoch depends only on the seed and the epoch
//! number, so a run resumed from any step-boundary checkpoint replays the
//! exact arithmetic of an uninterrupted run.

mod adam;
pub mod checkpoint;
mod schedule;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::NamedTensors;
pub use schedule::cosine_lr;

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::losses::{
    perceptual_loss, perceptual_loss_grad, recon_loss, recon_loss_grad, total_loss,
    FeatureExtractor, LossWeights,
};
use crate::metrics::{clip_metrics, rate_report, MetricConfig};
use crate::model::{GradStore, Model, ModelConfig};
use crate::nn::Scalar;
use crate::quantizer::Codebooks;

fn default_epochs() -> usize {
    50
}
fn default_batch_size() -> usize {
    8
}
fn default_lr_max() -> f64 {
    2e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_checkpoint_period() -> usize {
    10
}

/// Hyperparameters of one optimization run. Loss weights live in
/// [`ModelConfig`]; paths and seeds for a concrete run come from the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_checkpoint_period")]
    pub checkpoint_period_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Per-tap perceptual weights; defaults to all ones when an extractor is
    /// in play.
    #[serde(default)]
    pub layer_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr_max: default_lr_max(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            checkpoint_period_epochs: default_checkpoint_period(),
            seed: 0,
            layer_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !self.lr_max.is_finite() || self.lr_max <= 0.0 {
            return Err(Error::InvalidConfig("lr_max must be finite and positive".into()));
        }
        if self.checkpoint_period_epochs == 0 {
            return Err(Error::InvalidConfig("checkpoint_period_epochs must be >= 1".into()));
        }
        if let Some(w) = &self.layer_weights {
            if w.is_empty() || w.iter().any(|&l| !l.is_finite() || l < 0.0) {
                return Err(Error::InvalidConfig(
                    "layer_weights must be non-empty, finite and >= 0".into(),
                ));
            }
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

/// Batches per epoch under drop-last batching.
pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> Result<u64> {
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let spe = dataset_len / batch_size;
    if spe == 0 {
        return Err(Error::InvalidInput(format!(
            "dataset of {dataset_len} clips cannot fill a batch of {batch_size}"
        )));
    }
    Ok(spe as u64)
}

/// Length of the full cosine schedule for a dataset.
pub fn total_steps(cfg: &TrainConfig, dataset_len: usize) -> Result<u64> {
    Ok(cfg.epochs as u64 * steps_per_epoch(dataset_len, cfg.batch_size)?)
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState<F: Scalar> {
    pub model: Model<F>,
    pub codebooks: Codebooks<F>,
    pub optimizer: Adam<F>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<F: Scalar> TrainState<F> {
    /// Fresh state: model weights from `seed`, codebooks from `seed + 1`.
    pub fn init(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        let model = Model::init(model_cfg, train_cfg.seed)?;
        let codebooks = Codebooks::new(
            model_cfg.codebook_size_top,
            model_cfg.codebook_size_bottom,
            model_cfg.latent_dim,
            train_cfg.seed.wrapping_add(1),
        )?;
        let optimizer = Adam::new(train_cfg.adam())?;
        Ok(Self { model, codebooks, optimizer, step: 0 })
    }
}

/// One optimizer step's observables, in log order.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub recon: f64,
    pub commit_top: f64,
    pub commit_bottom: f64,
    pub perceptual: f64,
    pub perplexity_top: Option<f64>,
    pub perplexity_bottom: f64,
}

impl StepRecord {
    /// One deterministic `key=value` line. Float formatting is Rust's
    /// shortest round-trip display, so identical runs yield identical bytes.
    pub fn to_line(&self) -> String {
        let ppl_top = match self.perplexity_top {
            Some(p) => p.to_string(),
            None => "na".into(),
        };
        format!(
            "step={} lr={} total={} recon={} commit_top={} commit_bottom={} perceptual={} ppl_top={} ppl_bottom={}",
            self.step,
            self.lr,
            self.total,
            self.recon,
            self.commit_top,
            self.commit_bottom,
            self.perceptual,
            ppl_top,
            self.perplexity_bottom,
        )
    }
}

/// What a [`train`] call produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    /// Checkpoints written, in order; the last one reflects the exit state.
    pub checkpoints: Vec<PathBuf>,
}

fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Runs (or resumes) the optimization loop over in-memory clips.
///
/// `stop_after_steps` is an absolute step count; training halts once
/// `state.step` reaches it, which makes interrupt/resume tests exact. When
/// `out_dir` is set, a checkpoint lands there every
/// `checkpoint_period_epochs` epochs and at exit.
pub fn train<F: Scalar>(
    state: &mut TrainState<F>,
    cfg: &TrainConfig,
    clips: &[VideoClip<F>],
    extractor: Option<&dyn FeatureExtractor<F>>,
    out_dir: Option<&Path>,
    stop_after_steps: Option<u64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = state.model.config().clone();
    let spe = steps_per_epoch(clips.len(), cfg.batch_size)?;
    let total = cfg.epochs as u64 * spe;
    if state.step > total {
        return Err(Error::InvalidInput(format!(
            "state is at step {} but the schedule ends at {total}",
            state.step
        )));
    }
    if mcfg.gamma > 0.0 && extractor.is_none() {
        return Err(Error::InvalidConfig(
            "gamma is positive but no feature extractor was provided".into(),
        ));
    }
    let weights = LossWeights {
        beta: mcfg.beta,
        gamma: mcfg.gamma,
        layer_weights: match (&cfg.layer_weights, extractor) {
            (Some(w), _) => w.clone(),
            (None, Some(e)) => vec![1.0; e.tap_count()],
            (None, None) => Vec::new(),
        },
    };
    weights.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let hard_stop = stop_after_steps.unwrap_or(u64::MAX).min(total);
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut last_saved: Option<u64> = None;

    let save = |state: &TrainState<F>,
                    last_saved: &mut Option<u64>,
                    checkpoints: &mut Vec<PathBuf>|
     -> Result<()> {
        if let Some(dir) = out_dir {
            if *last_saved != Some(state.step) {
                let path = dir.join(format!("ckpt_step_{:08}.ntc", state.step));
                save_checkpoint(&path, state, cfg)?;
                *last_saved = Some(state.step);
                checkpoints.push(path);
            }
        }
        Ok(())
    };

    while state.step < hard_stop {
        let epoch = state.step / spe;
        let perm = epoch_permutation(cfg.seed, epoch, clips.len());
        let batch_in_epoch = (state.step % spe) as usize;
        let bs = cfg.batch_size;
        let batch = &perm[batch_in_epoch * bs..(batch_in_epoch + 1) * bs];

        let lr = cosine_lr(state.step, total, cfg.lr_max)?;
        let mut grad_acc = GradStore::<F>::new();
        let mut recon_sum = 0.0;
        let mut commit_top_sum = 0.0;
        let mut commit_bottom_sum = 0.0;
        let mut perc_sum = 0.0;
        let mut ppl_top_sum = 0.0;
        let mut ppl_bottom_sum = 0.0;
        let mut top_vectors: Vec<Array2<F>> = Vec::new();
        let mut top_indices: Vec<u32> = Vec::new();
        let mut bottom_vectors: Vec<Array2<F>> = Vec::new();
        let mut bottom_indices: Vec<u32> = Vec::new();

        for &ci in batch {
            let clip = &clips[ci];
            let (out, trace) = state.model.forward_train(clip, &state.codebooks)?;
            let recon = recon_loss(clip, &out.reconstruction)?;
            let mut d_xhat = recon_loss_grad(clip, &out.reconstruction)?;
            let mut perc = F::zero();
            if mcfg.gamma > 0.0 {
                let e = extractor.expect("checked above");
                perc = perceptual_loss(clip, &out.reconstruction, e, &weights)?;
                let d_perc = perceptual_loss_grad(clip, &out.reconstruction, e, &weights)?;
                d_xhat.zip_mut_with(&d_perc, |a, &b| *a = *a + F::from_f(mcfg.gamma) * b);
            }
            grad_acc.merge(state.model.backward(&trace, &d_xhat)?);

            recon_sum += recon.to_f();
            commit_top_sum += out.commit_loss_top.to_f();
            commit_bottom_sum += out.commit_loss_bottom.to_f();
            perc_sum += perc.to_f();
            ppl_top_sum += out.perplexity_top.unwrap_or(0.0);
            ppl_bottom_sum += out.perplexity_bottom;

            if let Some((v, idx)) = trace.top_assignments() {
                top_vectors.push(v.clone());
                top_indices.extend_from_slice(idx);
            }
            let (v, idx) = trace.bottom_assignments();
            bottom_vectors.push(v.clone());
            bottom_indices.extend_from_slice(idx);
        }

        let inv = 1.0 / bs as f64;
        grad_acc.scale(F::from_f(inv));
        let recon_m = recon_sum * inv;
        let commit_top_m = commit_top_sum * inv;
        let commit_bottom_m = commit_bottom_sum * inv;
        let perc_m = perc_sum * inv;
        let step_now = state.step;
        let total_m = total_loss(
            F::from_f(recon_m),
            F::from_f(commit_top_m),
            F::from_f(commit_bottom_m),
            F::from_f(perc_m),
            &weights,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("step {step_now}: {msg}")),
            other => other,
        })?
        .to_f();

        if !top_vectors.is_empty() {
            let all = concat_rows(&top_vectors)?;
            state.codebooks.top.ema_update(all.view(), &top_indices)?;
        }
        let all = concat_rows(&bottom_vectors)?;
        state.codebooks.bottom.ema_update(all.view(), &bottom_indices)?;

        state.optimizer.apply(state.model.named_params_mut(), &grad_acc, lr)?;

        records.push(StepRecord {
            step: state.step,
            lr,
            total: total_m,
            recon: recon_m,
            commit_top: commit_top_m,
            commit_bottom: commit_bottom_m,
            perceptual: perc_m,
            perplexity_top: if mcfg.levels == 2 { Some(ppl_top_sum * inv) } else { None },
            perplexity_bottom: ppl_bottom_sum * inv,
        });
        state.step += 1;

        if state.step % spe == 0 {
            let finished_epochs = state.step / spe;
            if finished_epochs % cfg.checkpoint_period_epochs as u64 == 0 {
                save(state, &mut last_saved, &mut checkpoints)?;
            }
        }
    }

    save(state, &mut last_saved, &mut checkpoints)?;
    Ok(TrainOutcome { records, checkpoints })
}

fn concat_rows<F: Scalar>(parts: &[Array2<F>]) -> Result<Array2<F>> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Internal(e.to_string()))
}

const STEP_EXACT_LIMIT: u64 = 1 << 24;

fn string_tensor(s: &str) -> ArrayD<f32> {
    ArrayD::from_shape_vec(IxDyn(&[s.len()]), s.bytes().map(|b| b as f32).collect())
        .expect("length matches")
}

fn tensor_string(t: &ArrayD<f32>) -> Result<String> {
    let mut bytes = Vec::with_capacity(t.len());
    for &v in t.iter() {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::Checkpoint("embedded text tensor holds non-byte values".into()));
        }
        bytes.push(v as u8);
    }
    String::from_utf8(bytes).map_err(|_| Error::Checkpoint("embedded text is not UTF-8".into()))
}

fn scalar_tensor(v: f32) -> ArrayD<f32> {
    ArrayD::from_shape_vec(IxDyn(&[1]), vec![v]).expect("length matches")
}

fn typed<F: Scalar>(t: &ArrayD<f32>) -> ArrayD<F> {
    t.map(|&v| F::from_f(v as f64))
}

fn want<'a>(
    t: &'a NamedTensors,
    consumed: &mut std::collections::BTreeSet<String>,
    name: &str,
) -> Result<&'a ArrayD<f32>> {
    consumed.insert(name.to_string());
    t.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
}

fn load_codebook<F: Scalar>(
    t: &NamedTensors,
    consumed: &mut std::collections::BTreeSet<String>,
    tag: &str,
) -> Result<crate::quantizer::Codebook<F>> {
    let embed = typed::<F>(want(t, consumed, &format!("vq.{tag}.embed"))?)
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Checkpoint(format!("vq.{tag}.embed must be rank 2")))?;
    let cluster = typed::<F>(want(t, consumed, &format!("vq.{tag}.cluster"))?)
        .into_dimensionality::<Ix1>()
        .map_err(|_| Error::Checkpoint(format!("vq.{tag}.cluster must be rank 1")))?;
    let sum = typed::<F>(want(t, consumed, &format!("vq.{tag}.sum"))?)
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::Checkpoint(format!("vq.{tag}.sum must be rank 2")))?;
    let hyper = want(t, consumed, &format!("vq.{tag}.hyper"))?;
    if hyper.len() != 2 {
        return Err(Error::Checkpoint(format!("vq.{tag}.hyper must hold [decay, eps]")));
    }
    crate::quantizer::Codebook::from_parts(
        embed,
        cluster,
        sum,
        F::from_f(hyper[[0]] as f64),
        F::from_f(hyper[[1]] as f64),
    )
}

/// Writes the full training state (weights, codebooks with EMA accumulators,
/// optimizer moments, step counter, both configs) as one ".ntc" container.
/// With f32 training this round-trips bit-exactly.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    state: &TrainState<F>,
    train_cfg: &TrainConfig,
) -> Result<()> {
    if state.step >= STEP_EXACT_LIMIT {
        return Err(Error::Checkpoint(format!(
            "step {} cannot be stored exactly as f32",
            state.step
        )));
    }
    let mut t = NamedTensors::new();
    for (name, view) in state.model.named_params() {
        t.insert(&format!("model.{name}"), view.map(|&v| v.to_f() as f32))?;
    }
    for (tag, book) in [("top", &state.codebooks.top), ("bottom", &state.codebooks.bottom)] {
        t.insert(
            &format!("vq.{tag}.embed"),
            book.embeddings().map(|&v| v.to_f() as f32).into_dyn(),
        )?;
        t.insert(
            &format!("vq.{tag}.cluster"),
            book.ema_cluster_size().map(|&v| v.to_f() as f32).into_dyn(),
        )?;
        t.insert(
            &format!("vq.{tag}.sum"),
            book.ema_embed_sum().map(|&v| v.to_f() as f32).into_dyn(),
        )?;
        let hyper = vec![book.decay().to_f() as f32, book.laplace_eps().to_f() as f32];
        t.insert(&format!("vq.{tag}.hyper"), ArrayD::from_shape_vec(IxDyn(&[2]), hyper).unwrap())?;
    }
    for (name, tensor) in state.optimizer.first_moments() {
        t.insert(&format!("opt.m.{name}"), tensor.map(|&v| v.to_f() as f32))?;
    }
    for (name, tensor) in state.optimizer.second_moments() {
        t.insert(&format!("opt.v.{name}"), tensor.map(|&v| v.to_f() as f32))?;
    }
    t.insert("meta.step", scalar_tensor(state.step as f32))?;
    let model_toml = toml::to_string(state.model.config())
        .map_err(|e| Error::Checkpoint(format!("model config does not serialize: {e}")))?;
    t.insert("meta.model_config", string_tensor(&model_toml))?;
    let train_toml = toml::to_string(train_cfg)
        .map_err(|e| Error::Checkpoint(format!("train config does not serialize: {e}")))?;
    t.insert("meta.train_config", string_tensor(&train_toml))?;
    t.save(path)
}

/// A checkpoint read back from disk.
#[derive(Debug)]
pub struct LoadedCheckpoint<F: Scalar> {
    pub state: TrainState<F>,
    pub train_config: TrainConfig,
}

/// Inverse of [`save_checkpoint`]. Every tensor in the container must be
/// consumed and every expected tensor must be present.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<LoadedCheckpoint<F>> {
    let t = NamedTensors::load(path)?;
    let mut consumed: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();

    let model_cfg: ModelConfig =
        toml::from_str(&tensor_string(want(&t, &mut consumed, "meta.model_config")?)?)
            .map_err(|e| Error::Checkpoint(format!("bad embedded model config: {e}")))?;
    let train_cfg: TrainConfig =
        toml::from_str(&tensor_string(want(&t, &mut consumed, "meta.train_config")?)?)
            .map_err(|e| Error::Checkpoint(format!("bad embedded train config: {e}")))?;
    model_cfg.validate()?;
    train_cfg.validate()?;
    let step_t = want(&t, &mut consumed, "meta.step")?;
    if step_t.len() != 1 {
        return Err(Error::Checkpoint("meta.step must hold one value".into()));
    }
    let step_f = step_t[[0]];
    if step_f < 0.0 || step_f.fract() != 0.0 || step_f >= STEP_EXACT_LIMIT as f32 {
        return Err(Error::Checkpoint(format!("meta.step value {step_f} is not a valid step")));
    }
    let step = step_f as u64;

    let mut model = Model::<F>::init(&model_cfg, 0)?;
    for (name, mut view) in model.named_params_mut() {
        let full = format!("model.{name}");
        consumed.insert(full.clone());
        let stored =
            t.get(&full).ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
        if stored.shape() != view.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {full} has shape {:?}, expected {:?}",
                stored.shape(),
                view.shape()
            )));
        }
        view.zip_mut_with(stored, |dst, &src| *dst = F::from_f(src as f64));
    }

    let codebooks = Codebooks {
        top: load_codebook(&t, &mut consumed, "top")?,
        bottom: load_codebook(&t, &mut consumed, "bottom")?,
    };
    if codebooks.bottom.k() != model_cfg.codebook_size_bottom
        || codebooks.bottom.dim() != model_cfg.latent_dim
        || codebooks.top.k() != model_cfg.codebook_size_top
        || codebooks.top.dim() != model_cfg.latent_dim
    {
        return Err(Error::Checkpoint(
            "stored codebooks disagree with the stored model config".into(),
        ));
    }

    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, tensor) in t.iter() {
        if let Some(suffix) = name.strip_prefix("opt.m.") {
            m.insert(suffix.to_string(), typed::<F>(tensor));
            consumed.insert(name.to_string());
        } else if let Some(suffix) = name.strip_prefix("opt.v.") {
            v.insert(suffix.to_string(), typed::<F>(tensor));
            consumed.insert(name.to_string());
        }
    }
    let optimizer = Adam::from_state(train_cfg.adam(), step, m, v)?;

    for name in t.names() {
        if !consumed.contains(name) {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
    }

    Ok(LoadedCheckpoint {
        state: TrainState { model, codebooks, optimizer, step },
        train_config: train_cfg,
    })
}

/// Rate and distortion of one evaluated clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipEval {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub theoretical_bpp: f64,
    pub deflate_bpp: f64,
}

/// Per-clip results plus their means.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_clip: Vec<ClipEval>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_theoretical_bpp: f64,
    pub mean_deflate_bpp: f64,
}

impl EvalReport {
    /// Tab-separated per-clip lines followed by an aggregate block.
    pub fn render(&self) -> String {
        let mut out = String::from("id\tpsnr_db\tssim\ttheoretical_bpp\tdeflate_bpp\n");
        for c in &self.per_clip {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                c.id, c.psnr_db, c.ssim, c.theoretical_bpp, c.deflate_bpp
            ));
        }
        out.push_str(&format!(
            "\nclips\t{}\nmean_psnr_db\t{}\nmean_ssim\t{}\nmean_theoretical_bpp\t{}\nmean_deflate_bpp\t{}\n",
            self.per_clip.len(),
            self.mean_psnr_db,
            self.mean_ssim,
            self.mean_theoretical_bpp,
            self.mean_deflate_bpp,
        ));
        out
    }
}

/// Compresses and reconstructs every clip through the real bitstream,
/// reporting PSNR, SSIM and both bpp figures.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    codebooks: &Codebooks<F>,
    clips: &[(String, VideoClip<F>)],
    metric_cfg: &MetricConfig,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate: the split is empty".into()));
    }
    let k_top = model.config().codebook_size_top as u32;
    let k_bottom = model.config().codebook_size_bottom as u32;
    let mut per_clip = Vec::with_capacity(clips.len());
    for (id, clip) in clips {
        let (top, bottom) = model.encode_indices(clip, codebooks)?;
        let bytes = crate::bitstream::serialize(
            top.as_ref().map(|g| (g, k_top)),
            (&bottom, k_bottom),
            clip.dims(),
        )?;
        let decoded = crate::bitstream::deserialize(&bytes)?;
        let rate = rate_report(&decoded)?;
        let recon = model.decode_indices(
            decoded.top.as_ref(),
            &decoded.bottom,
            codebooks,
            clip.fps(),
        )?;
        let m = clip_metrics(clip, &recon, metric_cfg)?;
        per_clip.push(ClipEval {
            id: id.clone(),
            psnr_db: m.psnr_db,
            ssim: m.ssim,
            theoretical_bpp: rate.theoretical_bpp,
            deflate_bpp: rate.deflate_bpp,
        });
    }
    let n = per_clip.len() as f64;
    Ok(EvalReport {
        mean_psnr_db: per_clip.iter().map(|c| c.psnr_db).sum::<f64>() / n,
        mean_ssim: per_clip.iter().map(|c| c.ssim).sum::<f64>() / n,
        mean_theoretical_bpp: per_clip.iter().map(|c| c.theoretical_bpp).sum::<f64>() / n,
        mean_deflate_bpp: per_clip.iter().map(|c| c.deflate_bpp).sum::<f64>() / n,
        per_clip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{ConvStackExtractor, CountingExtractor};
    use crate::model::OutputActivation;
    use ndarray::{Array3, Array4, ArrayView3};
    use rand::Rng;

    fn tiny_cfg(gamma: f64) -> ModelConfig {
        ModelConfig {
            levels: 2,
            base_channels: 4,
            latent_dim: 8,
            codebook_size_top: 16,
            codebook_size_bottom: 16,
            bottom_stride: (2, 4),
            top_extra_stride: (2, 2),
            residual_blocks_per_stage: 1,
            output_activation: OutputActivation::Sigmoid,
            beta: 1.0,
            gamma,
        }
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            lr_max: 1e-3,
            checkpoint_period_epochs: 10,
            seed: 7,
            ..Default::default()
        }
    }

    fn sized_clip(seed: u64, dims: (usize, usize, usize)) -> VideoClip<f32> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (t, h, w) = dims;
        let data = Array4::from_shape_simple_fn((3, t, h, w), || rng.gen_range(0.0..1.0));
        VideoClip::new(data, 16).unwrap()
    }

    fn random_clip(seed: u64) -> VideoClip<f32> {
        sized_clip(seed, (4, 8, 8))
    }

    fn clips(n: usize) -> Vec<VideoClip<f32>> {
        (0..n).map(|i| random_clip(100 + i as u64)).collect()
    }

    #[test]
    fn batching_drops_the_last_partial_batch() {
        assert_eq!(steps_per_epoch(10, 3).unwrap(), 3);
        assert_eq!(steps_per_epoch(9, 3).unwrap(), 3);
        assert!(steps_per_epoch(2, 3).is_err());
        let cfg = TrainConfig { epochs: 4, batch_size: 3, ..Default::default() };
        assert_eq!(total_steps(&cfg, 10).unwrap(), 12);
    }

    #[test]
    fn identical_runs_produce_identical_records() {
        let data = clips(4);
        let cfg = tiny_train_cfg();
        let run = || {
            let mut st = TrainState::<f32>::init(&tiny_cfg(0.0), &cfg).unwrap();
            train(&mut st, &cfg, &data, None, None, None).unwrap().records
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
        assert_eq!(a[0].step, 0);
        assert_eq!(a[0].lr, cfg.lr_max);
        assert!(a.iter().all(|r| r.total.is_finite() && r.total >= 0.0));
        let lines_a: Vec<String> = a.iter().map(|r| r.to_line()).collect();
        let lines_b: Vec<String> = b.iter().map(|r| r.to_line()).collect();
        assert_eq!(lines_a, lines_b);
        assert!(lines_a[0].starts_with("step=0 lr=0.001 "), "{}", lines_a[0]);
    }

    #[test]
    fn gamma_zero_never_invokes_the_extractor() {
        let data = clips(4);
        let cfg = tiny_train_cfg();
        let proxy = ConvStackExtractor::<f32>::proxy(3);
        let counting = CountingExtractor::new(&proxy);
        let mut st = TrainState::<f32>::init(&tiny_cfg(0.0), &cfg).unwrap();
        let out = train(&mut st, &cfg, &data, Some(&counting), None, Some(2)).unwrap();
        assert_eq!(out.records.len(), 2);
        assert_eq!(counting.call_count(), 0);
        assert!(out.records.iter().all(|r| r.perceptual == 0.0));
    }

    #[test]
    fn positive_gamma_without_extractor_is_rejected() {
        let data = clips(4);
        let cfg = tiny_train_cfg();
        let mut st = TrainState::<f32>::init(&tiny_cfg(0.4), &cfg).unwrap();
        assert!(matches!(
            train(&mut st, &cfg, &data, None, None, None),
            Err(Error::InvalidConfig(_))
        ));
    }

    struct NanExtractor;

    impl FeatureExtractor<f32> for NanExtractor {
        fn tap_count(&self) -> usize {
            1
        }

        fn features(&self, frame: ArrayView3<f32>) -> Result<Vec<Array3<f32>>> {
            let (_, h, w) = frame.dim();
            Ok(vec![Array3::from_elem((1, h, w), f32::NAN)])
        }

        fn input_grad(
            &self,
            frame: ArrayView3<f32>,
            _d_taps: &[Array3<f32>],
        ) -> Result<Array3<f32>> {
            Ok(Array3::zeros(frame.raw_dim()))
        }
    }

    #[test]
    fn non_finite_loss_aborts_and_names_the_step() {
        let data = clips(4);
        let cfg = tiny_train_cfg();
        let mut st = TrainState::<f32>::init(&tiny_cfg(0.4), &cfg).unwrap();
        let err = train(&mut st, &cfg, &data, Some(&NanExtractor), None, None).unwrap_err();
        match err {
            Error::NonFinite(msg) => assert!(msg.contains("step 0"), "{msg}"),
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ntc");
        let data = clips(4);
        let cfg = tiny_train_cfg();
        let mut st = TrainState::<f32>::init(&tiny_cfg(0.0), &cfg).unwrap();
        train(&mut st, &cfg, &data, None, None, Some(3)).unwrap();
        save_checkpoint(&path, &st, &cfg).unwrap();

        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.state.step, 3);
        assert_eq!(loaded.train_config, cfg);
        assert_eq!(loaded.state.model.config(), st.model.config());
        for ((na, va), (nb, vb)) in
            st.model.named_params().iter().zip(loaded.state.model.named_params().iter())
        {
            assert_eq!(na, nb);
            let a: Vec<u32> = va.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = vb.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "parameter {na} drifted");
        }
        for (book_a, book_b) in
            [(&st.codebooks.top, &loaded.state.codebooks.top),
             (&st.codebooks.bottom, &loaded.state.codebooks.bottom)]
        {
            assert_eq!(book_a.embeddings(), book_b.embeddings());
            assert_eq!(book_a.ema_cluster_size(), book_b.ema_cluster_size());
            assert_eq!(book_a.ema_embed_sum(), book_b.ema_embed_sum());
            assert_eq!(book_a.decay(), book_b.decay());
            assert_eq!(book_a.laplace_eps(), book_b.laplace_eps());
        }
        assert_eq!(st.optimizer.first_moments(), loaded.state.optimizer.first_moments());
        assert_eq!(st.optimizer.second_moments(), loaded.state.optimizer.second_moments());
        assert_eq!(st.optimizer.step_count(), loaded.state.optimizer.step_count());
    }

    #[test]
    fn resume_replays_a_straight_run_exactly() {
        let data = clips(4);
        let cfg = tiny_train_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();

        let mut straight = TrainState::<f32>::init(&tiny_cfg(0.0), &cfg).unwrap();
        let out_a =
            train(&mut straight, &cfg, &data, None, Some(dir_a.path()), None).unwrap();

        let mut interrupted = TrainState::<f32>::init(&tiny_cfg(0.0), &cfg).unwrap();
        let out_b1 =
            train(&mut interrupted, &cfg, &data, None, Some(dir_b.path()), Some(3)).unwrap();
        let mid = out_b1.checkpoints.last().unwrap();
        assert!(mid.ends_with("ckpt_step_00000003.ntc"));

        let mut resumed = load_checkpoint::<f32>(mid).unwrap().state;
        let out_b2 = train(&mut resumed, &cfg, &data, None, Some(dir_b.path()), None).unwrap();

        let mut merged = out_b1.records.clone();
        merged.extend(out_b2.records.clone());
        assert_eq!(out_a.records, merged);

        let final_a = std::fs::read(dir_a.path().join("ckpt_step_00000006.ntc")).unwrap();
        let final_b = std::fs::read(dir_b.path().join("ckpt_step_00000006.ntc")).unwrap();
        assert_eq!(final_a, final_b);
    }

    #[test]
    fn periodic_checkpoints_follow_the_epoch_period() {
        let data = clips(4);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 2,
            checkpoint_period_epochs: 2,
            seed: 1,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut st = TrainState::<f32>::init(&tiny_cfg(0.0), &cfg).unwrap();
        let out = train(&mut st, &cfg, &data, None, Some(dir.path()), None).unwrap();
        // epochs end at steps 2, 4, 6, 8; period 2 puts checkpoints at 4 and 8
        let names: Vec<String> = out
            .checkpoints
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["ckpt_step_00000004.ntc", "ckpt_step_00000008.ntc"]);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ntc");
        let cfg = tiny_train_cfg();
        let st = TrainState::<f32>::init(&tiny_cfg(0.0), &cfg).unwrap();
        save_checkpoint(&path, &st, &cfg).unwrap();

        let full = NamedTensors::load(&path).unwrap();
        let missing_path = dir.path().join("missing.ntc");
        let mut missing = NamedTensors::new();
        for (name, tensor) in full.iter() {
            if name != "vq.top.embed" {
                missing.insert(name, tensor.clone()).unwrap();
            }
        }
        missing.save(&missing_path).unwrap();
        let err = load_checkpoint::<f32>(&missing_path).unwrap_err();
        assert!(err.to_string().contains("vq.top.embed"), "{err}");

        let extra_path = dir.path().join("extra.ntc");
        let mut extra = NamedTensors::new();
        for (name, tensor) in full.iter() {
            extra.insert(name, tensor.clone()).unwrap();
        }
        extra.insert("stray", scalar_tensor(1.0)).unwrap();
        extra.save(&extra_path).unwrap();
        let err = load_checkpoint::<f32>(&extra_path).unwrap_err();
        assert!(err.to_string().contains("stray"), "{err}");
    }

    #[test]
    fn evaluate_reports_per_clip_and_means() {
        let cfg = tiny_cfg(0.0);
        let model = Model::<f32>::init(&cfg, 11).unwrap();
        let books = Codebooks::new(16, 16, 8, 12).unwrap();
        let items: Vec<(String, VideoClip<f32>)> = vec![
            ("a".into(), sized_clip(1, (4, 16, 16))),
            ("b".into(), sized_clip(2, (4, 16, 16))),
        ];
        let report = evaluate(&model, &books, &items, &MetricConfig::default()).unwrap();
        assert_eq!(report.per_clip.len(), 2);
        let mean = (report.per_clip[0].psnr_db + report.per_clip[1].psnr_db) / 2.0;
        assert!((report.mean_psnr_db - mean).abs() < 1e-12);
        assert!(report.per_clip.iter().all(|c| c.theoretical_bpp > 0.0));
        assert!(report.per_clip.iter().all(|c| c.deflate_bpp > 0.0));
        let text = report.render();
        assert!(text.contains("a\t"), "{text}");
        assert!(text.contains("mean_psnr_db"), "{text}");

        assert!(evaluate(&model, &books, &[], &MetricConfig::default()).is_err());
    }
}
