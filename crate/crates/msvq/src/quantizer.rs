//! Vector quantization: nearest-neighbor codebook assignment, EMA codebook
//! maintenance, commitment loss, and the straight-through gradient contract.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Hierarchy level tag for latent and index grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Top,
    Bottom,
}

/// Discrete assignment grid for one hierarchy level: T' x H' x W' indices,
/// each in [0, K).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexGrid {
    pub indices: Array3<u32>,
    pub level: Level,
}

impl IndexGrid {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Indices in row-major (T', H', W') order.
    pub fn flat(&self) -> Vec<u32> {
        self.indices.iter().copied().collect()
    }
}

/// A K x D embedding table with EMA accumulators.
///
/// The embedding rows always satisfy `embeddings[i] = ema_embed_sum[i] /
/// smoothed(ema_cluster_size[i])` after every update. Accumulators start at
/// `ema_cluster_size = 1`, `ema_embed_sum = embeddings`, which keeps the
/// relation consistent from the first step and lets unassigned entries decay
/// toward their running averages instead of blowing up.
#[derive(Debug)]
pub struct Codebook<F> {
    embeddings: Array2<F>,
    ema_cluster_size: Array1<F>,
    ema_embed_sum: Array2<F>,
    decay: F,
    laplace_eps: F,
    usage: AtomicU64,
}

impl<F: Scalar> Clone for Codebook<F> {
    fn clone(&self) -> Self {
        Self {
            embeddings: self.embeddings.clone(),
            ema_cluster_size: self.ema_cluster_size.clone(),
            ema_embed_sum: self.ema_embed_sum.clone(),
            decay: self.decay,
            laplace_eps: self.laplace_eps,
            usage: AtomicU64::new(self.usage.load(Ordering::Relaxed)),
        }
    }
}

pub const DEFAULT_DECAY: f64 = 0.99;
pub const DEFAULT_LAPLACE_EPS: f64 = 1e-5;

impl<F: Scalar> Codebook<F> {
    /// Fresh codebook with entries drawn uniformly from [-1/K, 1/K].
    pub fn new(k: usize, dim: usize, decay: F, laplace_eps: F, seed: u64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::InvalidConfig("codebook needs K >= 1 and D >= 1".into()));
        }
        if decay < F::zero() || decay > F::one() {
            return Err(Error::InvalidConfig("codebook decay must be in [0, 1]".into()));
        }
        if laplace_eps <= F::zero() {
            return Err(Error::InvalidConfig("laplace_eps must be positive".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let bound = 1.0 / k as f64;
        let embeddings =
            Array2::from_shape_simple_fn((k, dim), || F::from_f(rng.gen_range(-bound..bound)));
        Ok(Self {
            ema_cluster_size: Array1::from_elem(k, F::one()),
            ema_embed_sum: embeddings.clone(),
            embeddings,
            decay,
            laplace_eps,
            usage: AtomicU64::new(0),
        })
    }

    /// Restores a codebook from persisted tensors.
    pub fn from_parts(
        embeddings: Array2<F>,
        ema_cluster_size: Array1<F>,
        ema_embed_sum: Array2<F>,
        decay: F,
        laplace_eps: F,
    ) -> Result<Self> {
        if embeddings.dim() != ema_embed_sum.dim()
            || embeddings.nrows() != ema_cluster_size.len()
        {
            return Err(Error::ShapeMismatch(
                "codebook accumulator shapes disagree with embeddings".into(),
            ));
        }
        if ema_cluster_size.iter().any(|&v| v < F::zero()) {
            return Err(Error::InvalidInput(
                "ema_cluster_size entries must be non-negative".into(),
            ));
        }
        Ok(Self {
            embeddings,
            ema_cluster_size,
            ema_embed_sum,
            decay,
            laplace_eps,
            usage: AtomicU64::new(0),
        })
    }

    pub fn k(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<F> {
        &self.embeddings
    }

    pub fn ema_cluster_size(&self) -> &Array1<F> {
        &self.ema_cluster_size
    }

    pub fn ema_embed_sum(&self) -> &Array2<F> {
        &self.ema_embed_sum
    }

    pub fn decay(&self) -> F {
        self.decay
    }

    pub fn laplace_eps(&self) -> F {
        self.laplace_eps
    }

    /// Number of vectors this codebook has quantized or accumulated.
    pub fn usage_count(&self) -> u64 {
        self.usage.load(Ordering::Relaxed)
    }

    /// One EMA maintenance step from a batch of vectors and their
    /// assignments (as produced by [`quantize`] on the same vectors):
    /// counts and sums decay toward the batch statistics, then embeddings
    /// are renormalized with Laplace smoothing.
    pub fn ema_update(&mut self, vectors: ArrayView2<F>, indices: &[u32]) -> Result<()> {
        let k = self.k();
        let d = self.dim();
        if vectors.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "vector dim {} vs codebook dim {}",
                vectors.ncols(),
                d
            )));
        }
        if vectors.nrows() != indices.len() {
            return Err(Error::ShapeMismatch(
                "vector count and index count disagree".into(),
            ));
        }
        let mut counts = Array1::<F>::zeros(k);
        let mut sums = Array2::<F>::zeros((k, d));
        for (row, &idx) in vectors.outer_iter().zip(indices.iter()) {
            let i = idx as usize;
            if i >= k {
                return Err(Error::InvalidInput(format!(
                    "index {i} out of range for codebook of size {k}"
                )));
            }
            counts[i] += F::one();
            let mut s = sums.row_mut(i);
            s += &row;
        }
        let one_minus = F::one() - self.decay;
        for i in 0..k {
            self.ema_cluster_size[i] = self.decay * self.ema_cluster_size[i] + one_minus * counts[i];
        }
        self.ema_embed_sum
            .zip_mut_with(&sums, |m, &s| *m = self.decay * *m + one_minus * s);
        // Laplace-smoothed renormalization; preserves the total count mass.
        let total: F = self.ema_cluster_size.iter().copied().sum();
        let denom = total + F::from_f(k as f64) * self.laplace_eps;
        for i in 0..k {
            let smoothed = (self.ema_cluster_size[i] + self.laplace_eps) / denom * total;
            let inv = F::one() / smoothed;
            let mut e = self.embeddings.row_mut(i);
            e.assign(&self.ema_embed_sum.row(i));
            e.mapv_inplace(|v| v * inv);
        }
        self.usage.fetch_add(vectors.nrows() as u64, Ordering::Relaxed);
        Ok(())
    }
}

/// Nearest-neighbor assignment of each row of `vectors` against the
/// codebook, squared Euclidean distance, ties broken by lowest index.
/// Distances are computed as ||v||^2 - 2 v.e + ||e||^2 with the codeword
/// norms evaluated once per call.
pub fn quantize<F: Scalar>(
    vectors: ArrayView2<F>,
    codebook: &Codebook<F>,
) -> Result<(Vec<u32>, Array2<F>)> {
    let d = codebook.dim();
    if vectors.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "vector dim {} vs codebook dim {}",
            vectors.ncols(),
            d
        )));
    }
    let k = codebook.k();
    let embed = codebook.embeddings();
    let embed_norms: Vec<F> = embed
        .outer_iter()
        .map(|e| e.iter().map(|&v| v * v).sum())
        .collect();
    let scores = vectors.dot(&embed.t()); // (N, K)
    let n = vectors.nrows();
    let mut indices = Vec::with_capacity(n);
    let mut quantized = Array2::<F>::zeros((n, d));
    let two = F::from_f(2.0);
    for r in 0..n {
        let vnorm: F = vectors.row(r).iter().map(|&v| v * v).sum();
        let mut best = 0usize;
        let mut best_d = vnorm - two * scores[(r, 0)] + embed_norms[0];
        for c in 1..k {
            let dist = vnorm - two * scores[(r, c)] + embed_norms[c];
            if dist < best_d {
                best_d = dist;
                best = c;
            }
        }
        indices.push(best as u32);
        quantized.row_mut(r).assign(&embed.row(best));
    }
    codebook.usage.fetch_add(n as u64, Ordering::Relaxed);
    Ok((indices, quantized))
}

/// Commitment penalty: mean over all elements of (v - stopgrad(q))^2.
pub fn commitment_loss<F: Scalar>(
    vectors: ArrayView2<F>,
    quantized: ArrayView2<F>,
) -> Result<F> {
    if vectors.dim() != quantized.dim() {
        return Err(Error::ShapeMismatch(
            "commitment loss requires matching shapes".into(),
        ));
    }
    let n = vectors.len();
    if n == 0 {
        return Ok(F::zero());
    }
    let sum: F = vectors
        .iter()
        .zip(quantized.iter())
        .map(|(&v, &q)| (v - q) * (v - q))
        .sum();
    Ok(sum / F::from_f(n as f64))
}

/// Gradient of [`commitment_loss`] with respect to `vectors`
/// (the codeword side is stop-gradient).
pub(crate) fn commitment_loss_grad<F: Scalar>(
    vectors: ArrayView2<F>,
    quantized: ArrayView2<F>,
) -> Array2<F> {
    let scale = F::from_f(2.0 / vectors.len() as f64);
    let mut g = vectors.to_owned();
    g.zip_mut_with(&quantized, |v, &q| *v = (*v - q) * scale);
    g
}

/// Straight-through passthrough: the forward value is the quantized vector;
/// the backward contract treats quantization as identity, so the gradient of
/// any downstream scalar with respect to the input equals its gradient with
/// respect to this output (see [`straight_through_vjp`]).
pub fn straight_through<F: Scalar>(
    vectors: ArrayView2<F>,
    quantized: ArrayView2<F>,
) -> Result<Array2<F>> {
    if vectors.dim() != quantized.dim() {
        return Err(Error::ShapeMismatch(
            "straight-through requires matching shapes".into(),
        ));
    }
    Ok(quantized.to_owned())
}

/// Identity Jacobian of the straight-through estimator.
pub fn straight_through_vjp<F: Scalar>(grad_output: ArrayView2<F>) -> Array2<F> {
    grad_output.to_owned()
}

/// exp(entropy) of the empirical index distribution; 1 means a collapsed
/// codebook, K means uniform usage.
pub fn perplexity(indices: &[u32], k: usize) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("perplexity of an empty index set".into()));
    }
    let mut counts = vec![0usize; k];
    for &i in indices {
        let i = i as usize;
        if i >= k {
            return Err(Error::InvalidInput(format!(
                "index {i} out of range for alphabet {k}"
            )));
        }
        counts[i] += 1;
    }
    let n = indices.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(entropy.exp())
}

/// The pair of codebooks backing the two-level hierarchy. Both are always
/// allocated; a single-level model simply never touches the top one
/// (observable through its usage counter).
#[derive(Debug)]
pub struct Codebooks<F> {
    pub top: Codebook<F>,
    pub bottom: Codebook<F>,
}

impl<F: Scalar> Clone for Codebooks<F> {
    fn clone(&self) -> Self {
        Self { top: self.top.clone(), bottom: self.bottom.clone() }
    }
}

impl<F: Scalar> Codebooks<F> {
    pub fn new(k_top: usize, k_bottom: usize, dim: usize, seed: u64) -> Result<Self> {
        let decay = F::from_f(DEFAULT_DECAY);
        let eps = F::from_f(DEFAULT_LAPLACE_EPS);
        Ok(Self {
            top: Codebook::new(k_top, dim, decay, eps, seed.wrapping_add(1))?,
            bottom: Codebook::new(k_bottom, dim, decay, eps, seed.wrapping_add(2))?,
        })
    }
}

/// Converts a (D, T', H', W') latent grid into position-major vectors
/// (one D-dimensional row per grid site, row-major over T', H', W').
pub(crate) fn grid_to_vectors<F: Scalar>(grid: &ndarray::Array4<F>) -> Array2<F> {
    let (d, t, h, w) = grid.dim();
    let n = t * h * w;
    let mut out = Array2::<F>::zeros((n, d));
    for (c, plane) in grid.axis_iter(Axis(0)).enumerate() {
        for (r, &v) in plane.iter().enumerate() {
            out[(r, c)] = v;
        }
    }
    out
}

/// Inverse of [`grid_to_vectors`].
pub(crate) fn vectors_to_grid<F: Scalar>(
    vectors: ArrayView2<F>,
    dims: (usize, usize, usize),
) -> ndarray::Array4<F> {
    let (t, h, w) = dims;
    let d = vectors.ncols();
    let mut grid = ndarray::Array4::<F>::zeros((d, t, h, w));
    for (c, mut plane) in grid.axis_iter_mut(Axis(0)).enumerate() {
        for (r, dst) in plane.iter_mut().enumerate() {
            *dst = vectors[(r, c)];
        }
    }
    grid
}
