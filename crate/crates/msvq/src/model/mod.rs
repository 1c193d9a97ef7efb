//! Two-level spatiotemporal encoder/decoder. The bottom path downsamples by
//! (2,4,4), the top path by a further (2,2,2). The top latent is fused into
//! the bottom encoder by upsampling and channel concatenation, and the
//! decoder consumes both quantized grids coarse-to-fine.
//!
//! The same continuous top latent feeds the fusion in both `encode` and
//! `forward_train`, which makes `decode(quantize(encode(x)))` reproduce the
//! training-mode reconstruction bit-exactly.

mod config;

pub use config::{codebook_scalar_count, param_count, ModelConfig, OutputActivation};

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::nn::{
    clamp01, clamp01_vjp, relu, relu_vjp, sigmoid, sigmoid_vjp, Conv3d, Conv3dGrad,
    ConvTranspose3d, Scalar,
};
use crate::quantizer::{
    commitment_loss, commitment_loss_grad, grid_to_vectors, perplexity, quantize,
    vectors_to_grid, Codebooks, IndexGrid, Level,
};

/// Continuous latent feature grid, D x T' x H' x W'.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<F> {
    pub data: Array4<F>,
    pub level: Level,
}

impl<F: Scalar> LatentGrid<F> {
    pub fn dims(&self) -> (usize, usize, usize) {
        let (_, t, h, w) = self.data.dim();
        (t, h, w)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }
}

/// Encoder result: the top grid is absent for single-level configs.
#[derive(Debug, Clone)]
pub struct EncodeOutput<F> {
    pub top: Option<LatentGrid<F>>,
    pub bottom: LatentGrid<F>,
}

/// Everything the training loop needs from one clip's forward pass.
#[derive(Debug)]
pub struct ForwardOutput<F> {
    pub reconstruction: VideoClip<F>,
    pub commit_loss_top: F,
    pub commit_loss_bottom: F,
    pub indices_top: Option<IndexGrid>,
    pub indices_bottom: IndexGrid,
    pub perplexity_top: Option<f64>,
    pub perplexity_bottom: f64,
}

/// Named parameter gradients, accumulated additively.
#[derive(Debug, Clone)]
pub struct GradStore<F> {
    map: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Default for GradStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> GradStore<F> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn add<D: ndarray::Dimension>(&mut self, name: &str, grad: ndarray::Array<F, D>) {
        let grad = grad.into_dyn();
        match self.map.get_mut(name) {
            Some(acc) => *acc += &grad,
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.map.get(name)
    }

    pub fn merge(&mut self, other: GradStore<F>) {
        for (name, grad) in other.map {
            match self.map.get_mut(&name) {
                Some(acc) => *acc += &grad,
                None => {
                    self.map.insert(name, grad);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for grad in self.map.values_mut() {
            grad.mapv_inplace(|v| v * factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total element count across all gradients.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|g| g.len()).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, grad) in &self.map {
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock<F> {
    c1: Conv3d<F>,
    c2: Conv3d<F>,
}

struct ResTrace<F> {
    x: Array4<F>,
    c1: Array4<F>,
}

impl<F: Scalar> ResBlock<F> {
    fn init(rng: &mut ChaCha20Rng, channels: usize, groups: usize) -> Self {
        Self {
            c1: Conv3d::init(rng, channels, channels, [3, 3, 3], [1, 1, 1], [1, 1, 1], groups),
            c2: Conv3d::init(rng, channels, channels, [3, 3, 3], [1, 1, 1], [1, 1, 1], groups),
        }
    }

    fn forward(&self, x: Array4<F>) -> Result<(Array4<F>, ResTrace<F>)> {
        let c1 = self.c1.forward(&relu(&x))?;
        let c2 = self.c2.forward(&relu(&c1))?;
        let y = &x + &c2;
        Ok((y, ResTrace { x, c1 }))
    }

    fn vjp(
        &self,
        tr: &ResTrace<F>,
        dout: &Array4<F>,
    ) -> Result<(Array4<F>, Conv3dGrad<F>, Conv3dGrad<F>)> {
        let (dr2, g2) = self.c2.vjp(&relu(&tr.c1), dout)?;
        let dc1 = relu_vjp(&tr.c1, &dr2);
        let (dr1, g1) = self.c1.vjp(&relu(&tr.x), &dc1)?;
        let dx = relu_vjp(&tr.x, &dr1) + dout;
        Ok((dx, g1, g2))
    }
}

fn res_stack_forward<F: Scalar>(
    blocks: &[ResBlock<F>],
    x: Array4<F>,
) -> Result<(Array4<F>, Vec<ResTrace<F>>)> {
    let mut traces = Vec::with_capacity(blocks.len());
    let mut cur = x;
    for b in blocks {
        let (y, tr) = b.forward(cur)?;
        traces.push(tr);
        cur = y;
    }
    Ok((cur, traces))
}

fn res_stack_vjp<F: Scalar>(
    blocks: &[ResBlock<F>],
    traces: &[ResTrace<F>],
    prefix: &str,
    dout: Array4<F>,
    grads: &mut GradStore<F>,
) -> Result<Array4<F>> {
    let mut d = dout;
    for (i, (b, tr)) in blocks.iter().zip(traces.iter()).enumerate().rev() {
        let (dx, g1, g2) = b.vjp(tr, &d)?;
        grads.add(&format!("{prefix}{i}.c1.w"), g1.weight);
        grads.add(&format!("{prefix}{i}.c1.b"), g1.bias);
        grads.add(&format!("{prefix}{i}.c2.w"), g2.weight);
        grads.add(&format!("{prefix}{i}.c2.b"), g2.bias);
        d = dx;
    }
    Ok(d)
}

fn concat_channels<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> Result<Array4<F>> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()])
        .map_err(|e| Error::ShapeMismatch(format!("channel concat: {e}")))
}

#[derive(Debug, Clone)]
struct TopPath<F> {
    et0: Conv3d<F>,
    et_res: Vec<ResBlock<F>>,
    head_top: Conv3d<F>,
    fuse_up: ConvTranspose3d<F>,
    dec_top_up: ConvTranspose3d<F>,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    cfg: ModelConfig,
    eb0: Conv3d<F>,
    eb1: Conv3d<F>,
    eb2: Conv3d<F>,
    eb_res: Vec<ResBlock<F>>,
    top: Option<TopPath<F>>,
    head_bottom: Conv3d<F>,
    dec_in: Conv3d<F>,
    dec_res: Vec<ResBlock<F>>,
    dec_up1: ConvTranspose3d<F>,
    dec_up2: ConvTranspose3d<F>,
    dec_out: Conv3d<F>,
}

struct EncodeTrace<F> {
    x: Array4<F>,
    a0: Array4<F>,
    a1: Array4<F>,
    eb_res_trace: Vec<ResTrace<F>>,
    h_pre: Array4<F>,
    top: Option<TopTrace<F>>,
    cat_enc: Option<Array4<F>>,
    e_top: Option<Array4<F>>,
    e_bottom: Array4<F>,
}

struct TopTrace<F> {
    et_res_trace: Vec<ResTrace<F>>,
    t_pre: Array4<F>,
    u_pre: Array4<F>,
}

struct QuantTrace<F> {
    vt: Option<Array2<F>>,
    qt: Option<Array2<F>>,
    idx_t: Option<Vec<u32>>,
    vb: Array2<F>,
    qb: Array2<F>,
    idx_b: Vec<u32>,
    top_dims: Option<(usize, usize, usize)>,
    bottom_dims: (usize, usize, usize),
}

struct DecodeTrace<F> {
    q_top_grid: Option<Array4<F>>,
    td_pre: Option<Array4<F>>,
    cat_dec: Array4<F>,
    dec_res_trace: Vec<ResTrace<F>>,
    d_pre: Array4<F>,
    u1: Array4<F>,
    u2: Array4<F>,
    o: Array4<F>,
    xhat: Array4<F>,
}

/// Forward intermediates kept for the backward pass and the EMA update.
pub struct TrainTrace<F> {
    enc: EncodeTrace<F>,
    quant: QuantTrace<F>,
    dec: DecodeTrace<F>,
}

impl<F: Scalar> TrainTrace<F> {
    /// (vectors, assignments) fed to the top codebook, for EMA maintenance.
    pub fn top_assignments(&self) -> Option<(&Array2<F>, &[u32])> {
        match (&self.quant.vt, &self.quant.idx_t) {
            (Some(v), Some(i)) => Some((v, i.as_slice())),
            _ => None,
        }
    }

    /// (vectors, assignments) fed to the bottom codebook.
    pub fn bottom_assignments(&self) -> (&Array2<F>, &[u32]) {
        (&self.quant.vb, self.quant.idx_b.as_slice())
    }
}

fn embed_indices<F: Scalar>(
    grid: &IndexGrid,
    codebook: &crate::quantizer::Codebook<F>,
) -> Result<Array4<F>> {
    let (t, h, w) = grid.indices.dim();
    let d = codebook.dim();
    let embed = codebook.embeddings();
    let mut out = Array4::<F>::zeros((d, t, h, w));
    for ((ti, hi, wi), &idx) in grid.indices.indexed_iter() {
        if idx as usize >= codebook.k() {
            return Err(Error::InvalidInput(format!(
                "index {} out of range for codebook of size {}",
                idx,
                codebook.k()
            )));
        }
        for c in 0..d {
            out[(c, ti, hi, wi)] = embed[(idx as usize, c)];
        }
    }
    Ok(out)
}

impl<F: Scalar> Model<F> {
    /// Builds a model with fan-in-scaled uniform weights from a fixed seed.
    /// Layer creation order is part of the determinism contract.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let d = cfg.latent_dim;
        let r = cfg.residual_blocks_per_stage;
        let rng = &mut ChaCha20Rng::seed_from_u64(seed);

        let eb0 = Conv3d::init(rng, 3, c / 2, [3, 4, 4], [1, 2, 2], [1, 1, 1], 1);
        let eb1 = Conv3d::init(rng, c / 2, c, [4, 4, 4], [2, 2, 2], [1, 1, 1], 1);
        let eb2 = Conv3d::init(rng, c, c, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);
        let eb_res = (0..r).map(|_| ResBlock::init(rng, c, 1)).collect();

        let (top, head_bottom_in, dec_in_ch) = if cfg.levels == 2 {
            let et0 = Conv3d::init(rng, c, c, [4, 4, 4], [2, 2, 2], [1, 1, 1], 1);
            let et_res = (0..r).map(|_| ResBlock::init(rng, c, 4)).collect();
            let head_top = Conv3d::init(rng, c, d, [1, 1, 1], [1, 1, 1], [0, 0, 0], 1);
            let fuse_up = ConvTranspose3d::init(rng, d, c, [4, 4, 4], [2, 2, 2], [1, 1, 1]);
            let dec_top_up = ConvTranspose3d::init(rng, d, c, [4, 4, 4], [2, 2, 2], [1, 1, 1]);
            (
                Some(TopPath { et0, et_res, head_top, fuse_up, dec_top_up }),
                2 * c,
                c + d,
            )
        } else {
            (None, c, d)
        };

        let head_bottom =
            Conv3d::init(rng, head_bottom_in, d, [1, 1, 1], [1, 1, 1], [0, 0, 0], 1);
        let dec_in = Conv3d::init(rng, dec_in_ch, c, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);
        let dec_res = (0..r).map(|_| ResBlock::init(rng, c, 1)).collect();
        let dec_up1 = ConvTranspose3d::init(rng, c, c / 2, [4, 4, 4], [2, 2, 2], [1, 1, 1]);
        let dec_up2 = ConvTranspose3d::init(rng, c / 2, c / 4, [3, 4, 4], [1, 2, 2], [1, 1, 1]);
        let dec_out = Conv3d::init(rng, c / 4, 3, [3, 3, 3], [1, 1, 1], [1, 1, 1], 1);

        Ok(Self {
            cfg: cfg.clone(),
            eb0,
            eb1,
            eb2,
            eb_res,
            top,
            head_bottom,
            dec_in,
            dec_res,
            dec_up1,
            dec_up2,
            dec_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn trainable_param_count(&self) -> u64 {
        self.named_params().iter().map(|(_, v)| v.len() as u64).sum()
    }

    fn encode_trace(&self, x: &Array4<F>) -> Result<EncodeTrace<F>> {
        let (c, t, h, w) = x.dim();
        if c != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 input channels, got {c}")));
        }
        self.cfg.bottom_grid_dims((t, h, w))?;

        let a0 = self.eb0.forward(x)?;
        let a1 = self.eb1.forward(&relu(&a0))?;
        let a2 = self.eb2.forward(&relu(&a1))?;
        let (h_pre, eb_res_trace) = res_stack_forward(&self.eb_res, a2)?;
        let h_b = relu(&h_pre);

        if let Some(top) = &self.top {
            let b0 = top.et0.forward(&h_b)?;
            let (t_pre, et_res_trace) = res_stack_forward(&top.et_res, b0)?;
            let e_top = top.head_top.forward(&relu(&t_pre))?;
            let u_pre = top.fuse_up.forward(&e_top)?;
            let cat_enc = concat_channels(&h_b, &relu(&u_pre))?;
            let e_bottom = self.head_bottom.forward(&cat_enc)?;
            Ok(EncodeTrace {
                x: x.clone(),
                a0,
                a1,
                eb_res_trace,
                h_pre,
                top: Some(TopTrace { et_res_trace, t_pre, u_pre }),
                cat_enc: Some(cat_enc),
                e_top: Some(e_top),
                e_bottom,
            })
        } else {
            let e_bottom = self.head_bottom.forward(&h_b)?;
            Ok(EncodeTrace {
                x: x.clone(),
                a0,
                a1,
                eb_res_trace,
                h_pre,
                top: None,
                cat_enc: None,
                e_top: None,
                e_bottom,
            })
        }
    }

    fn decode_trace(
        &self,
        q_top: Option<&Array4<F>>,
        q_bottom: &Array4<F>,
    ) -> Result<DecodeTrace<F>> {
        let (db, bt, bh, bw) = q_bottom.dim();
        if db != self.cfg.latent_dim {
            return Err(Error::ShapeMismatch(format!(
                "bottom grid has {} channels, config wants {}",
                db, self.cfg.latent_dim
            )));
        }
        let (cat_dec, q_top_grid, td_pre) = if let Some(top) = &self.top {
            let qt = q_top.ok_or_else(|| {
                Error::ShapeMismatch("two-level model requires a top grid".into())
            })?;
            let (dt, tt, th, tw) = qt.dim();
            if dt != self.cfg.latent_dim || (tt * 2, th * 2, tw * 2) != (bt, bh, bw) {
                return Err(Error::ShapeMismatch(format!(
                    "top grid {dt}x{tt}x{th}x{tw} inconsistent with bottom {db}x{bt}x{bh}x{bw}"
                )));
            }
            let td_pre = top.dec_top_up.forward(qt)?;
            let cat = concat_channels(&relu(&td_pre), q_bottom)?;
            (cat, Some(qt.clone()), Some(td_pre))
        } else {
            if q_top.is_some() {
                return Err(Error::ShapeMismatch(
                    "single-level model got a top grid".into(),
                ));
            }
            (q_bottom.clone(), None, None)
        };

        let d0 = self.dec_in.forward(&cat_dec)?;
        let (d_pre, dec_res_trace) = res_stack_forward(&self.dec_res, d0)?;
        let u1 = self.dec_up1.forward(&relu(&d_pre))?;
        let u2 = self.dec_up2.forward(&relu(&u1))?;
        let o = self.dec_out.forward(&relu(&u2))?;
        let xhat = match self.cfg.output_activation {
            OutputActivation::Sigmoid => sigmoid(&o),
            OutputActivation::Clamp => clamp01(&o),
        };
        Ok(DecodeTrace {
            q_top_grid,
            td_pre,
            cat_dec,
            dec_res_trace,
            d_pre,
            u1,
            u2,
            o,
            xhat,
        })
    }

    /// Continuous latents for a clip; no codebooks involved.
    pub fn encode(&self, clip: &VideoClip<F>) -> Result<EncodeOutput<F>> {
        let tr = self.encode_trace(clip.data())?;
        Ok(EncodeOutput {
            top: tr.e_top.map(|data| LatentGrid { data, level: Level::Top }),
            bottom: LatentGrid { data: tr.e_bottom, level: Level::Bottom },
        })
    }

    /// Decodes (typically quantized) latent grids back to pixel space.
    pub fn decode(
        &self,
        top: Option<&LatentGrid<F>>,
        bottom: &LatentGrid<F>,
        fps: u32,
    ) -> Result<VideoClip<F>> {
        let tr = self.decode_trace(top.map(|g| &g.data), &bottom.data)?;
        Ok(VideoClip::from_model_output(tr.xhat, fps))
    }

    /// Encodes a clip and assigns every latent vector to its nearest codeword.
    /// Together with [`Model::decode_indices`] this reproduces the
    /// training-mode reconstruction exactly.
    pub fn encode_indices(
        &self,
        clip: &VideoClip<F>,
        codebooks: &Codebooks<F>,
    ) -> Result<(Option<IndexGrid>, IndexGrid)> {
        self.check_codebooks(codebooks)?;
        let enc = self.encode(clip)?;
        let top = match &enc.top {
            Some(grid) => {
                let (idx, _) = quantize(grid_to_vectors(&grid.data).view(), &codebooks.top)?;
                let (_, t, h, w) = grid.data.dim();
                Some(IndexGrid {
                    indices: Array3::from_shape_vec((t, h, w), idx)
                        .map_err(|e| Error::Internal(e.to_string()))?,
                    level: Level::Top,
                })
            }
            None => None,
        };
        let (idx_b, _) = quantize(grid_to_vectors(&enc.bottom.data).view(), &codebooks.bottom)?;
        let (_, t, h, w) = enc.bottom.data.dim();
        let bottom = IndexGrid {
            indices: Array3::from_shape_vec((t, h, w), idx_b)
                .map_err(|e| Error::Internal(e.to_string()))?,
            level: Level::Bottom,
        };
        Ok((top, bottom))
    }

    /// Looks up codewords for the given index grids and decodes them.
    pub fn decode_indices(
        &self,
        top: Option<&IndexGrid>,
        bottom: &IndexGrid,
        codebooks: &Codebooks<F>,
        fps: u32,
    ) -> Result<VideoClip<F>> {
        self.check_codebooks(codebooks)?;
        if self.cfg.levels == 2 && top.is_none() {
            return Err(Error::InvalidInput("two-level model needs a top index grid".into()));
        }
        if self.cfg.levels == 1 && top.is_some() {
            return Err(Error::InvalidInput("single-level model got a top index grid".into()));
        }
        let top_grid = match top {
            Some(idx) => Some(LatentGrid {
                data: embed_indices(idx, &codebooks.top)?,
                level: Level::Top,
            }),
            None => None,
        };
        let bottom_grid = LatentGrid {
            data: embed_indices(bottom, &codebooks.bottom)?,
            level: Level::Bottom,
        };
        self.decode(top_grid.as_ref(), &bottom_grid, fps)
    }

    fn check_codebooks(&self, codebooks: &Codebooks<F>) -> Result<()> {
        if codebooks.bottom.dim() != self.cfg.latent_dim
            || codebooks.bottom.k() != self.cfg.codebook_size_bottom
        {
            return Err(Error::InvalidConfig(
                "bottom codebook does not match model config".into(),
            ));
        }
        if self.cfg.levels == 2
            && (codebooks.top.dim() != self.cfg.latent_dim
                || codebooks.top.k() != self.cfg.codebook_size_top)
        {
            return Err(Error::InvalidConfig(
                "top codebook does not match model config".into(),
            ));
        }
        Ok(())
    }

    /// Full training-mode pass: encode, quantize both levels with the
    /// straight-through contract, decode. Returns the observable outputs and
    /// the trace needed by [`Model::backward`] and the EMA update.
    pub fn forward_train(
        &self,
        clip: &VideoClip<F>,
        codebooks: &Codebooks<F>,
    ) -> Result<(ForwardOutput<F>, TrainTrace<F>)> {
        self.check_codebooks(codebooks)?;
        let enc = self.encode_trace(clip.data())?;

        let (_, bt, bh, bw) = enc.e_bottom.dim();
        let bottom_dims = (bt, bh, bw);
        let vb = grid_to_vectors(&enc.e_bottom);
        let (idx_b, qb) = quantize(vb.view(), &codebooks.bottom)?;
        let commit_b = commitment_loss(vb.view(), qb.view())?;
        let q_bottom_grid = vectors_to_grid(qb.view(), bottom_dims);

        let (quant, dec, indices_top, perplexity_top, commit_t) = if let Some(e_top) = &enc.e_top {
            let (_, tt, th, tw) = e_top.dim();
            let top_dims = (tt, th, tw);
            let vt = grid_to_vectors(e_top);
            let (idx_t, qt) = quantize(vt.view(), &codebooks.top)?;
            let commit_t = commitment_loss(vt.view(), qt.view())?;
            let q_top_grid = vectors_to_grid(qt.view(), top_dims);
            let dec = self.decode_trace(Some(&q_top_grid), &q_bottom_grid)?;
            let grid = IndexGrid {
                indices: Array3::from_shape_vec(top_dims, idx_t.clone())
                    .map_err(|e| Error::Internal(e.to_string()))?,
                level: Level::Top,
            };
            let perp = perplexity(&idx_t, codebooks.top.k())?;
            let quant = QuantTrace {
                vt: Some(vt),
                qt: Some(qt),
                idx_t: Some(idx_t),
                vb,
                qb,
                idx_b: idx_b.clone(),
                top_dims: Some(top_dims),
                bottom_dims,
            };
            (quant, dec, Some(grid), Some(perp), commit_t)
        } else {
            let dec = self.decode_trace(None, &q_bottom_grid)?;
            let quant = QuantTrace {
                vt: None,
                qt: None,
                idx_t: None,
                vb,
                qb,
                idx_b: idx_b.clone(),
                top_dims: None,
                bottom_dims,
            };
            (quant, dec, None, None, F::zero())
        };

        let indices_bottom = IndexGrid {
            indices: Array3::from_shape_vec(bottom_dims, idx_b.clone())
                .map_err(|e| Error::Internal(e.to_string()))?,
            level: Level::Bottom,
        };
        let perplexity_bottom = perplexity(&idx_b, codebooks.bottom.k())?;
        let out = ForwardOutput {
            reconstruction: VideoClip::from_model_output(dec.xhat.clone(), clip.fps()),
            commit_loss_top: commit_t,
            commit_loss_bottom: commit_b,
            indices_top,
            indices_bottom,
            perplexity_top,
            perplexity_bottom,
        };
        Ok((out, TrainTrace { enc, quant, dec }))
    }

    /// Backpropagates `d_xhat` (the gradient of the pixel-space loss terms
    /// with respect to the reconstruction) through decoder, straight-through
    /// quantization, and encoder. The commitment gradients, scaled by the
    /// config's beta, are injected at the pre-quantization latents.
    pub fn backward(&self, trace: &TrainTrace<F>, d_xhat: &Array4<F>) -> Result<GradStore<F>> {
        let enc = &trace.enc;
        let dec = &trace.dec;
        let quant = &trace.quant;
        if d_xhat.dim() != dec.xhat.dim() {
            return Err(Error::ShapeMismatch("d_xhat shape mismatch".into()));
        }
        let beta = F::from_f(self.cfg.beta);
        let mut grads = GradStore::new();

        // decoder
        let do_ = match self.cfg.output_activation {
            OutputActivation::Sigmoid => sigmoid_vjp(&dec.xhat, d_xhat),
            OutputActivation::Clamp => clamp01_vjp(&dec.o, d_xhat),
        };
        let (dr3, g) = self.dec_out.vjp(&relu(&dec.u2), &do_)?;
        grads.add("dec_out.w", g.weight);
        grads.add("dec_out.b", g.bias);
        let du2 = relu_vjp(&dec.u2, &dr3);
        let (dr2, g) = self.dec_up2.vjp(&relu(&dec.u1), &du2)?;
        grads.add("dec_up2.w", g.weight);
        grads.add("dec_up2.b", g.bias);
        let du1 = relu_vjp(&dec.u1, &dr2);
        let (dr, g) = self.dec_up1.vjp(&relu(&dec.d_pre), &du1)?;
        grads.add("dec_up1.w", g.weight);
        grads.add("dec_up1.b", g.bias);
        let dd_pre = relu_vjp(&dec.d_pre, &dr);
        let dd0 = res_stack_vjp(&self.dec_res, &dec.dec_res_trace, "dec_res", dd_pre, &mut grads)?;
        let (dcat_dec, g) = self.dec_in.vjp(&dec.cat_dec, &dd0)?;
        grads.add("dec_in.w", g.weight);
        grads.add("dec_in.b", g.bias);

        // straight-through into the bottom latent, plus its commitment pull
        let c = self.cfg.base_channels;
        let mut d_e_bottom = if self.top.is_some() {
            dcat_dec.slice(s![c.., .., .., ..]).to_owned()
        } else {
            dcat_dec.clone()
        };
        if self.cfg.beta != 0.0 {
            let mut cg = commitment_loss_grad(quant.vb.view(), quant.qb.view());
            cg.mapv_inplace(|v| v * beta);
            d_e_bottom += &vectors_to_grid(cg.view(), quant.bottom_dims);
        }

        // top half of the decoder and the top latent's gradient
        let mut d_e_top: Option<Array4<F>> = None;
        if let Some(top) = &self.top {
            let dtd_act = dcat_dec.slice(s![..c, .., .., ..]).to_owned();
            let td_pre = dec.td_pre.as_ref().expect("two-level trace");
            let dtd_pre = relu_vjp(td_pre, &dtd_act);
            let q_top_grid = dec.q_top_grid.as_ref().expect("two-level trace");
            let (dq_top, g) = top.dec_top_up.vjp(q_top_grid, &dtd_pre)?;
            grads.add("dec_top_up.w", g.weight);
            grads.add("dec_top_up.b", g.bias);
            let mut dt = dq_top; // straight-through identity
            if self.cfg.beta != 0.0 {
                let vt = quant.vt.as_ref().expect("two-level trace");
                let qt = quant.qt.as_ref().expect("two-level trace");
                let mut cg = commitment_loss_grad(vt.view(), qt.view());
                cg.mapv_inplace(|v| v * beta);
                dt += &vectors_to_grid(cg.view(), quant.top_dims.expect("two-level trace"));
            }
            d_e_top = Some(dt);
        }

        // encoder, bottom head first
        let h_b_recomputed;
        let cat_or_h: &Array4<F> = if self.top.is_some() {
            enc.cat_enc.as_ref().expect("two-level trace")
        } else {
            h_b_recomputed = relu(&enc.h_pre);
            &h_b_recomputed
        };
        let (dcat_enc, g) = self.head_bottom.vjp(cat_or_h, &d_e_bottom)?;
        grads.add("head_bottom.w", g.weight);
        grads.add("head_bottom.b", g.bias);

        let mut dh_b = if let Some(top) = &self.top {
            let top_tr = enc.top.as_ref().expect("two-level trace");
            let dh = dcat_enc.slice(s![..c, .., .., ..]).to_owned();
            let du_act = dcat_enc.slice(s![c.., .., .., ..]).to_owned();
            let du_pre = relu_vjp(&top_tr.u_pre, &du_act);
            let e_top = enc.e_top.as_ref().expect("two-level trace");
            let (de_top_fuse, g) = top.fuse_up.vjp(e_top, &du_pre)?;
            grads.add("fuse_up.w", g.weight);
            grads.add("fuse_up.b", g.bias);
            *d_e_top.as_mut().expect("two-level trace") += &de_top_fuse;
            dh
        } else {
            dcat_enc
        };

        // top encoder
        if let Some(top) = &self.top {
            let top_tr = enc.top.as_ref().expect("two-level trace");
            let (dt_act, g) = top
                .head_top
                .vjp(&relu(&top_tr.t_pre), d_e_top.as_ref().expect("two-level trace"))?;
            grads.add("head_top.w", g.weight);
            grads.add("head_top.b", g.bias);
            let dt_pre = relu_vjp(&top_tr.t_pre, &dt_act);
            let db0 = res_stack_vjp(&top.et_res, &top_tr.et_res_trace, "et_res", dt_pre, &mut grads)?;
            let (dh_b2, g) = top.et0.vjp(&relu(&enc.h_pre), &db0)?;
            grads.add("et0.w", g.weight);
            grads.add("et0.b", g.bias);
            dh_b += &dh_b2;
        }

        // bottom encoder trunk
        let dh_pre = relu_vjp(&enc.h_pre, &dh_b);
        let da2 = res_stack_vjp(&self.eb_res, &enc.eb_res_trace, "eb_res", dh_pre, &mut grads)?;
        let (dr1, g) = self.eb2.vjp(&relu(&enc.a1), &da2)?;
        grads.add("eb2.w", g.weight);
        grads.add("eb2.b", g.bias);
        let da1 = relu_vjp(&enc.a1, &dr1);
        let (dr0, g) = self.eb1.vjp(&relu(&enc.a0), &da1)?;
        grads.add("eb1.w", g.weight);
        grads.add("eb1.b", g.bias);
        let da0 = relu_vjp(&enc.a0, &dr0);
        let (_, g) = self.eb0.vjp(&enc.x, &da0)?;
        grads.add("eb0.w", g.weight);
        grads.add("eb0.b", g.bias);

        Ok(grads)
    }

    /// Parameters in name order, as dynamic-dimension views.
    pub fn named_params(&self) -> Vec<(String, ndarray::ArrayViewD<'_, F>)> {
        let mut out: Vec<(String, ndarray::ArrayViewD<'_, F>)> = Vec::new();
        macro_rules! conv {
            ($name:expr, $c:expr) => {
                out.push((format!("{}.w", $name), $c.weight.view().into_dyn()));
                out.push((format!("{}.b", $name), $c.bias.view().into_dyn()));
            };
        }
        conv!("eb0", self.eb0);
        conv!("eb1", self.eb1);
        conv!("eb2", self.eb2);
        for (i, b) in self.eb_res.iter().enumerate() {
            conv!(format!("eb_res{i}.c1"), b.c1);
            conv!(format!("eb_res{i}.c2"), b.c2);
        }
        if let Some(top) = &self.top {
            conv!("et0", top.et0);
            for (i, b) in top.et_res.iter().enumerate() {
                conv!(format!("et_res{i}.c1"), b.c1);
                conv!(format!("et_res{i}.c2"), b.c2);
            }
            conv!("head_top", top.head_top);
            conv!("fuse_up", top.fuse_up);
            conv!("dec_top_up", top.dec_top_up);
        }
        conv!("head_bottom", self.head_bottom);
        conv!("dec_in", self.dec_in);
        for (i, b) in self.dec_res.iter().enumerate() {
            conv!(format!("dec_res{i}.c1"), b.c1);
            conv!(format!("dec_res{i}.c2"), b.c2);
        }
        conv!("dec_up1", self.dec_up1);
        conv!("dec_up2", self.dec_up2);
        conv!("dec_out", self.dec_out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Mutable views over all parameters, keyed by the same names as
    /// [`Model::named_params`].
    pub fn named_params_mut(&mut self) -> Vec<(String, ndarray::ArrayViewMutD<'_, F>)> {
        let mut out: Vec<(String, ndarray::ArrayViewMutD<'_, F>)> = Vec::new();
        macro_rules! conv {
            ($name:expr, $c:expr) => {
                out.push((format!("{}.w", $name), $c.weight.view_mut().into_dyn()));
                out.push((format!("{}.b", $name), $c.bias.view_mut().into_dyn()));
            };
        }
        conv!("eb0", self.eb0);
        conv!("eb1", self.eb1);
        conv!("eb2", self.eb2);
        for (i, b) in self.eb_res.iter_mut().enumerate() {
            conv!(format!("eb_res{i}.c1"), b.c1);
            conv!(format!("eb_res{i}.c2"), b.c2);
        }
        if let Some(top) = &mut self.top {
            conv!("et0", top.et0);
            for (i, b) in top.et_res.iter_mut().enumerate() {
                conv!(format!("et_res{i}.c1"), b.c1);
                conv!(format!("et_res{i}.c2"), b.c2);
            }
            conv!("head_top", top.head_top);
            conv!("fuse_up", top.fuse_up);
            conv!("dec_top_up", top.dec_top_up);
        }
        conv!("head_bottom", self.head_bottom);
        conv!("dec_in", self.dec_in);
        for (i, b) in self.dec_res.iter_mut().enumerate() {
            conv!(format!("dec_res{i}.c1"), b.c1);
            conv!(format!("dec_res{i}.c2"), b.c2);
        }
        conv!("dec_up1", self.dec_up1);
        conv!("dec_up2", self.dec_up2);
        conv!("dec_out", self.dec_out);
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}
