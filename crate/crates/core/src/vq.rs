//! Single-codebook vector quantizer.
//!
//! Tokens are nearest-code indices under squared Euclidean distance (lowest
//! index wins ties). The codebook is trained either from the codebook loss
//! `||sg[x] - c_k||^2` or by exponential moving averages; the commitment term
//! `beta * ||x - sg[c_k]||^2` is only monitored since the encoder is frozen.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{squared_distance, xlogx, Scalar};

pub const DEFAULT_VOCAB_SIZE: usize = 50;
pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_LAPLACE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookInit {
    /// `V` distinct training frames drawn uniformly without replacement.
    #[default]
    RandomFrames,
    /// k-means++ seeding: each further code is a frame drawn with probability
    /// proportional to its squared distance from the nearest chosen code.
    KMeansPlusPlus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    vectors: Vec<T>,
    vocab_size: usize,
    dim: usize,
    usage_counts: Vec<u64>,
    ema_cluster_size: Vec<T>,
    ema_embed_sum: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqLossBreakdown<T> {
    pub codebook_loss: T,
    pub commitment_loss: T,
    pub total: T,
    pub beta: T,
}

/// Gradient of the codebook loss; only `row` is non-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct RowGrad<T> {
    pub row: usize,
    pub grad: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub perplexity: f64,
    pub fraction_used: f64,
}

/// Perplexity `exp(-sum p ln p)` and used fraction of a usage histogram.
pub fn usage_from_counts(counts: &[u64]) -> Result<UsageStats> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("usage counts are all zero"));
    }
    let t = total as f64;
    let used = counts.iter().filter(|&&c| c > 0).count();
    let mut nonzero = counts.iter().filter(|&&c| c > 0);
    let first = nonzero.next().copied();
    // Equal usage of k codes has perplexity exactly k; avoid the rounding of
    // exp(ln k).
    let perplexity = if nonzero.all(|&c| Some(c) == first) {
        used as f64
    } else {
        let entropy: f64 = -counts.iter().map(|&c| xlogx(c as f64 / t)).sum::<f64>();
        entropy.exp()
    };
    Ok(UsageStats {
        perplexity,
        fraction_used: used as f64 / counts.len() as f64,
    })
}

impl<T: Scalar> Codebook<T> {
    pub fn new(vectors: Vec<T>, vocab_size: usize, dim: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::invalid("codebook needs at least 2 codes"));
        }
        if dim == 0 {
            return Err(Error::invalid("codebook dimension must be positive"));
        }
        if vectors.len() != vocab_size * dim {
            return Err(Error::Dimension {
                expected: vocab_size * dim,
                found: vectors.len(),
            });
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook vector".into()));
        }
        Ok(Self {
            ema_embed_sum: vectors.clone(),
            ema_cluster_size: vec![T::zero(); vocab_size],
            usage_counts: vec![0; vocab_size],
            vectors,
            vocab_size,
            dim,
        })
    }

    /// Seed a codebook from training frames.
    ///
    /// Frames with bit-identical values count once; if fewer than `V`
    /// distinct frames exist the chosen ones are repeated, and the repeats
    /// are never selected by [`quantize_frame`](Self::quantize_frame).
    pub fn init_from_frames<R: Rng>(
        frames: &[&[T]],
        vocab_size: usize,
        init: CodebookInit,
        rng: &mut R,
    ) -> Result<Self> {
        let dim = frames
            .first()
            .map(|f| f.len())
            .ok_or_else(|| Error::invalid("no frames to initialize the codebook"))?;
        if let Some(f) = frames.iter().find(|f| f.len() != dim) {
            return Err(Error::Dimension {
                expected: dim,
                found: f.len(),
            });
        }
        let chosen = match init {
            CodebookInit::RandomFrames => pick_distinct(frames, vocab_size, rng),
            CodebookInit::KMeansPlusPlus => pick_kmeans_pp(frames, vocab_size, rng),
        };
        let mut vectors = Vec::with_capacity(vocab_size * dim);
        for i in 0..vocab_size {
            vectors.extend_from_slice(frames[chosen[i % chosen.len()]]);
        }
        Self::new(vectors, vocab_size, dim)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vectors(&self) -> &[T] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[T] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Flat `V x D` parameter block for optimizers.
    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.vectors
    }

    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn ema_cluster_size(&self) -> &[T] {
        &self.ema_cluster_size
    }

    pub fn ema_embed_sum(&self) -> &[T] {
        &self.ema_embed_sum
    }

    fn check_dim(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Nearest code: `argmin_i ||x - c_i||^2`, lowest index on ties.
    pub fn quantize_frame(&self, x: &[T]) -> Result<(usize, &[T])> {
        self.check_dim(x)?;
        let (token, _) = self.nearest(x);
        Ok((token, self.vector(token)))
    }

    pub(crate) fn nearest(&self, x: &[T]) -> (usize, f64) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.vectors.chunks_exact(self.dim).enumerate() {
            let d = squared_distance(x, c);
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        (best, best_d)
    }

    /// Quantize and record the assignment in the usage histogram.
    pub fn assign(&mut self, x: &[T]) -> Result<usize> {
        let (token, _) = self.quantize_frame(x)?;
        self.usage_counts[token] += 1;
        Ok(token)
    }

    pub fn record_usage(&mut self, token: usize) {
        self.usage_counts[token] += 1;
    }

    pub fn reset_usage(&mut self) {
        self.usage_counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn vq_loss(&self, x: &[T], beta: T) -> Result<VqLossBreakdown<T>> {
        self.check_dim(x)?;
        let (_, d) = self.nearest(x);
        let dist = T::of(d);
        Ok(VqLossBreakdown {
            codebook_loss: dist,
            commitment_loss: dist,
            total: dist + beta * dist,
            beta,
        })
    }

    /// `d/dc_token ||sg[x] - c_token||^2 = 2 (c_token - x)`. The commitment
    /// term has no codebook gradient.
    pub fn codebook_grad(&self, x: &[T], token: usize) -> Result<RowGrad<T>> {
        self.check_dim(x)?;
        if token >= self.vocab_size {
            return Err(Error::invalid(format!(
                "token {token} outside codebook of size {}",
                self.vocab_size
            )));
        }
        let two = T::of(2.0);
        let grad = self
            .vector(token)
            .iter()
            .zip(x)
            .map(|(&c, &xi)| two * (c - xi))
            .collect();
        Ok(RowGrad { row: token, grad })
    }

    /// Exponential-moving-average codebook update with Laplace smoothing of
    /// the cluster sizes.
    pub fn ema_update(
        &mut self,
        assignments: &[(&[T], usize)],
        decay: f64,
        laplace_eps: f64,
    ) -> Result<()> {
        if assignments.is_empty() {
            return Err(Error::invalid("EMA update needs a non-empty batch"));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::invalid("EMA decay must lie in (0, 1)"));
        }
        if !(laplace_eps > 0.0) {
            return Err(Error::invalid("Laplace epsilon must be positive"));
        }
        let (v, d) = (self.vocab_size, self.dim);
        let mut counts = vec![0.0f64; v];
        let mut sums = vec![0.0f64; v * d];
        for &(x, token) in assignments {
            self.check_dim(x)?;
            if token >= v {
                return Err(Error::invalid(format!(
                    "token {token} outside codebook of size {v}"
                )));
            }
            counts[token] += 1.0;
            for (s, &xi) in sums[token * d..(token + 1) * d].iter_mut().zip(x) {
                *s += xi.as_f64();
            }
        }
        for i in 0..v {
            let prev = self.ema_cluster_size[i].as_f64();
            self.ema_cluster_size[i] = T::of(decay * prev + (1.0 - decay) * counts[i]);
        }
        for (e, s) in self.ema_embed_sum.iter_mut().zip(&sums) {
            *e = T::of(decay * e.as_f64() + (1.0 - decay) * s);
        }
        let n: f64 = self.ema_cluster_size.iter().map(|s| s.as_f64()).sum();
        for i in 0..v {
            let size = self.ema_cluster_size[i].as_f64();
            let smoothed = (size + laplace_eps) / (n + v as f64 * laplace_eps) * n;
            for k in 0..d {
                let value = self.ema_embed_sum[i * d + k].as_f64() / smoothed;
                self.vectors[i * d + k] = T::of(value);
            }
        }
        if self.vectors.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("codebook after EMA update".into()));
        }
        Ok(())
    }

    pub fn usage_stats(&self) -> Result<UsageStats> {
        usage_from_counts(&self.usage_counts)
    }

    /// Replace every code with zero recorded usage by a random frame.
    /// Returns the number of codes replaced.
    pub fn reinit_unused<R: Rng>(&mut self, frames: &[&[T]], rng: &mut R) -> usize {
        if frames.is_empty() {
            return 0;
        }
        let mut replaced = 0;
        for i in 0..self.vocab_size {
            if self.usage_counts[i] == 0 {
                let f = frames[rng.random_range(0..frames.len())];
                self.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(f);
                self.ema_embed_sum[i * self.dim..(i + 1) * self.dim].copy_from_slice(f);
                replaced += 1;
            }
        }
        replaced
    }
}

fn frame_key<T: Scalar>(f: &[T]) -> Vec<u64> {
    f.iter().map(|v| v.as_f64().to_bits()).collect()
}

fn pick_distinct<T: Scalar, R: Rng>(frames: &[&[T]], k: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    order.shuffle(rng);
    let mut seen = HashSet::new();
    let mut chosen = Vec::with_capacity(k);
    for i in order {
        if seen.insert(frame_key(frames[i])) {
            chosen.push(i);
            if chosen.len() == k {
                break;
            }
        }
    }
    chosen
}

fn pick_kmeans_pp<T: Scalar, R: Rng>(frames: &[&[T]], k: usize, rng: &mut R) -> Vec<usize> {
    // Greedy variant: draw several D^2 candidates per step and keep the one
    // that lowers the total potential most.
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = vec![rng.random_range(0..frames.len())];
    let mut nearest: Vec<f64> = frames
        .iter()
        .map(|f| squared_distance(f, frames[chosen[0]]))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = sample_weighted(&nearest, rng.random::<f64>() * total);
            let updated: Vec<f64> = nearest
                .iter()
                .zip(frames)
                .map(|(n, f)| n.min(squared_distance(f, frames[pick])))
                .collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, updated));
            }
        }
        let (_, pick, updated) = best.expect("at least one trial");
        chosen.push(pick);
        nearest = updated;
    }
    chosen
}

/// Index `i` with `sum(w[..i]) <= target < sum(w[..=i])`, skipping zero weights.
fn sample_weighted(weights: &[f64], mut target: f64) -> usize {
    let mut pick = weights.len() - 1;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && target < w {
            pick = i;
            break;
        }
        target -= w;
    }
    while weights[pick] == 0.0 {
        pick -= 1;
    }
    pick
}
