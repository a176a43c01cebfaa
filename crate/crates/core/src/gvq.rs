//! Gumbel-softmax vector quantizer.
//!
//! A linear layer maps a frame to logits `z = W^T x + b`, which are used
//! directly as unnormalized log-probabilities. Training draws relaxed
//! one-hot vectors `p = softmax((z + g) / tau)` with Gumbel noise `g` and
//! minimizes `alpha_kl * KL(p || uniform) + lambda_div * (1 - PPL / V)`,
//! where `PPL` is the perplexity of the batch-averaged `p`. The hard token
//! (argmax of `p`) is passed forward while gradients flow through `p`
//! unchanged. Inference uses the noise-free argmax of the logits.

use rand::Rng;
use rand_distr::{Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{argmax, xlogx, Scalar};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// `max(temp_min, temp_max * temp_decay^step)`.
    #[default]
    Schedule,
    /// Fixed `tau = 1`.
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub temp_max: f64,
    pub temp_min: f64,
    pub temp_decay: f64,
    pub mode: TemperatureMode,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            temp_max: 2.0,
            temp_min: 0.1,
            temp_decay: 0.999,
            mode: TemperatureMode::Schedule,
        }
    }
}

impl TemperatureSchedule {
    pub fn constant() -> Self {
        Self {
            mode: TemperatureMode::Constant,
            ..Self::default()
        }
    }

    pub fn temperature_at(&self, step: u64) -> f64 {
        match self.mode {
            TemperatureMode::Constant => 1.0,
            TemperatureMode::Schedule => {
                let exp = step.min(i32::MAX as u64) as i32;
                (self.temp_max * self.temp_decay.powi(exp)).max(self.temp_min)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedAssignment<T> {
    pub probs: Vec<T>,
    pub hard_token: usize,
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GvqLoss {
    pub kl_term: f64,
    pub diversity_term: f64,
    pub total: f64,
    pub perplexity: f64,
    pub normalized_perplexity: f64,
}

/// Standard Gumbel(0, 1) draws `-ln(-ln u)`, `u ~ U(0, 1)` open.
pub fn sample_gumbel<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

fn softmax_scaled(logits: impl Iterator<Item = f64>, tau: f64) -> Vec<f64> {
    let s: Vec<f64> = logits.map(|z| z / tau).collect();
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Relaxed sample with caller-supplied noise (set `noise` to zeros for the
/// noise-free relaxation).
pub fn gumbel_sample_with_noise<T: Scalar>(
    logits: &[T],
    tau: f64,
    noise: &[f64],
) -> Result<RelaxedAssignment<T>> {
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    if noise.len() != logits.len() {
        return Err(Error::Dimension {
            expected: logits.len(),
            found: noise.len(),
        });
    }
    let p = softmax_scaled(logits.iter().zip(noise).map(|(z, g)| z.as_f64() + g), tau);
    let hard_token = argmax(&p);
    Ok(RelaxedAssignment {
        probs: p.into_iter().map(T::of).collect(),
        hard_token,
        temperature: tau,
    })
}

pub fn gumbel_sample<T: Scalar, R: Rng>(
    logits: &[T],
    tau: f64,
    rng: &mut R,
) -> Result<RelaxedAssignment<T>> {
    let noise = sample_gumbel(rng, logits.len());
    gumbel_sample_with_noise(logits, tau, &noise)
}

/// KL-to-uniform, diversity and perplexity terms of a `B x V` batch of
/// relaxed assignments (row-major).
pub fn gvq_loss<T: Scalar>(
    batch_probs: &[T],
    vocab_size: usize,
    kl_weight: f64,
    diversity_weight: f64,
) -> Result<GvqLoss> {
    if vocab_size == 0 || batch_probs.is_empty() || !batch_probs.len().is_multiple_of(vocab_size) {
        return Err(Error::invalid(
            "batch_probs must be a non-empty B x V matrix",
        ));
    }
    let v = vocab_size as f64;
    let rows = batch_probs.len() / vocab_size;
    let mut kl = 0.0;
    let mut mean = vec![0.0f64; vocab_size];
    for (b, row) in batch_probs.chunks_exact(vocab_size).enumerate() {
        let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-5 || row.iter().any(|p| !(p.as_f64() >= 0.0)) {
            return Err(Error::invalid(format!(
                "row {b} is not on the simplex (sum {sum})"
            )));
        }
        for (m, p) in mean.iter_mut().zip(row) {
            let p = p.as_f64();
            *m += p;
            kl += xlogx(p) + p * v.ln();
        }
    }
    kl /= rows as f64;
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let entropy: f64 = -mean.iter().map(|&m| xlogx(m)).sum::<f64>();
    let perplexity = entropy.exp();
    let normalized = perplexity / v;
    let diversity = 1.0 - normalized;
    Ok(GvqLoss {
        kl_term: kl,
        diversity_term: diversity,
        total: kl_weight * kl + diversity_weight * diversity,
        perplexity,
        normalized_perplexity: normalized,
    })
}

/// Values retained from a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct GvqForward<T> {
    version: u64,
    pub temperature: f64,
    inputs: Vec<T>,
    /// `B x V` relaxed assignments, row-major.
    pub probs: Vec<f64>,
    pub hard_tokens: Vec<usize>,
}

impl<T> GvqForward<T> {
    pub fn batch_len(&self) -> usize {
        self.hard_tokens.len()
    }
}

#[derive(Clone, Debug)]
pub struct GvqModel<T> {
    vocab_size: usize,
    dim: usize,
    /// `W` (`D x V`, row-major) followed by `b` (`V`).
    params: Vec<T>,
    /// Output code vectors (`V x D`); carried for completeness, not trained.
    codebook: Vec<T>,
    pub kl_weight: f64,
    pub diversity_weight: f64,
    pub schedule: TemperatureSchedule,
    pub rng_seed: u64,
    version: u64,
}

/// Equality of the model itself; the forward-cache counter is ignored.
impl<T: PartialEq> PartialEq for GvqModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.vocab_size == other.vocab_size
            && self.dim == other.dim
            && self.params == other.params
            && self.codebook == other.codebook
            && self.kl_weight == other.kl_weight
            && self.diversity_weight == other.diversity_weight
            && self.schedule == other.schedule
            && self.rng_seed == other.rng_seed
    }
}

impl<T: Scalar> GvqModel<T> {
    /// Random initialization: `W ~ N(0, 1/D)`, `b = 0`, codes `~ N(0, 1)`.
    pub fn new(
        dim: usize,
        vocab_size: usize,
        kl_weight: f64,
        diversity_weight: f64,
        schedule: TemperatureSchedule,
        rng_seed: u64,
    ) -> Result<Self> {
        if dim == 0 || vocab_size < 2 {
            return Err(Error::invalid("GVQ needs D >= 1 and V >= 2"));
        }
        let mut rng = rng_for(rng_seed, "gvq/init");
        let scale = 1.0 / (dim as f64).sqrt();
        let mut params: Vec<T> = (0..dim * vocab_size)
            .map(|_| T::of(scale * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        params.extend(std::iter::repeat_n(T::zero(), vocab_size));
        let codebook = (0..vocab_size * dim)
            .map(|_| T::of(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self::from_parts(
            dim,
            vocab_size,
            params,
            codebook,
            kl_weight,
            diversity_weight,
            schedule,
            rng_seed,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        dim: usize,
        vocab_size: usize,
        params: Vec<T>,
        codebook: Vec<T>,
        kl_weight: f64,
        diversity_weight: f64,
        schedule: TemperatureSchedule,
        rng_seed: u64,
    ) -> Result<Self> {
        if params.len() != dim * vocab_size + vocab_size {
            return Err(Error::Dimension {
                expected: dim * vocab_size + vocab_size,
                found: params.len(),
            });
        }
        if codebook.len() != dim * vocab_size {
            return Err(Error::Dimension {
                expected: dim * vocab_size,
                found: codebook.len(),
            });
        }
        if params.iter().chain(&codebook).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GVQ parameters".into()));
        }
        Ok(Self {
            vocab_size,
            dim,
            params,
            codebook,
            kl_weight,
            diversity_weight,
            schedule,
            rng_seed,
            version: 0,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable flat parameters; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.version += 1;
        &mut self.params
    }

    pub fn weights(&self) -> &[T] {
        &self.params[..self.dim * self.vocab_size]
    }

    pub fn bias(&self) -> &[T] {
        &self.params[self.dim * self.vocab_size..]
    }

    pub fn codebook(&self) -> &[T] {
        &self.codebook
    }

    pub fn temperature_at(&self, step: u64) -> f64 {
        self.schedule.temperature_at(step)
    }

    fn logits_f64(&self, x: &[T]) -> Vec<f64> {
        let v = self.vocab_size;
        let mut z: Vec<f64> = self.bias().iter().map(|b| b.as_f64()).collect();
        for (d, &xd) in x.iter().enumerate() {
            let xd = xd.as_f64();
            for (zj, w) in z.iter_mut().zip(&self.params[d * v..(d + 1) * v]) {
                *zj += xd * w.as_f64();
            }
        }
        z
    }

    fn check_dim(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("GVQ input frame".into()));
        }
        Ok(())
    }

    /// `W^T x + b`.
    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_dim(x)?;
        Ok(self.logits_f64(x).into_iter().map(T::of).collect())
    }

    /// Deterministic inference token: argmax of the logits, lowest index on ties.
    pub fn infer_token(&self, x: &[T]) -> Result<usize> {
        self.check_dim(x)?;
        Ok(argmax(&self.logits_f64(x)))
    }

    /// Relaxed assignments for a batch of frames with the given `B x V` noise.
    pub fn forward(
        &self,
        frames: &[&[T]],
        noise: &[f64],
        temperature: f64,
    ) -> Result<GvqForward<T>> {
        if frames.is_empty() {
            return Err(Error::invalid("empty GVQ batch"));
        }
        if noise.len() != frames.len() * self.vocab_size {
            return Err(Error::Dimension {
                expected: frames.len() * self.vocab_size,
                found: noise.len(),
            });
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        let mut inputs = Vec::with_capacity(frames.len() * self.dim);
        let mut probs = Vec::with_capacity(noise.len());
        let mut hard_tokens = Vec::with_capacity(frames.len());
        for (x, g) in frames.iter().zip(noise.chunks_exact(self.vocab_size)) {
            self.check_dim(x)?;
            inputs.extend_from_slice(x);
            let z = self.logits_f64(x);
            let p = softmax_scaled(z.iter().zip(g).map(|(z, g)| z + g), temperature);
            hard_tokens.push(argmax(&p));
            probs.extend(p);
        }
        Ok(GvqForward {
            version: self.version,
            temperature,
            inputs,
            probs,
            hard_tokens,
        })
    }

    pub fn loss(&self, fwd: &GvqForward<T>) -> Result<GvqLoss> {
        gvq_loss(
            &fwd.probs,
            self.vocab_size,
            self.kl_weight,
            self.diversity_weight,
        )
    }

    /// Loss and its gradient w.r.t. the flat parameters (`W` then `b`),
    /// straight through the hard discretization.
    pub fn backward(&self, fwd: &GvqForward<T>) -> Result<(GvqLoss, Vec<T>)> {
        if fwd.version != self.version {
            return Err(Error::StaleCache);
        }
        let loss = self.loss(fwd)?;
        let (v, d) = (self.vocab_size, self.dim);
        let rows = fwd.batch_len();
        let inv_b = 1.0 / rows as f64;
        let ln_v = (v as f64).ln();

        let mut mean = vec![0.0f64; v];
        for row in fwd.probs.chunks_exact(v) {
            for (m, p) in mean.iter_mut().zip(row) {
                *m += p * inv_b;
            }
        }
        // dL/dpbar_i = lambda * (PPL / V) * (ln pbar_i + 1), spread as 1/B per row.
        let div_coef = self.diversity_weight * loss.normalized_perplexity;
        let div_grad: Vec<f64> = mean
            .iter()
            .map(|&m| {
                if m > 0.0 {
                    div_coef * (m.ln() + 1.0) * inv_b
                } else {
                    0.0
                }
            })
            .collect();

        let mut grad = vec![0.0f64; d * v + v];
        let mut g_row = vec![0.0f64; v];
        for (b, row) in fwd.probs.chunks_exact(v).enumerate() {
            let mut weighted = 0.0;
            for i in 0..v {
                let p = row[i];
                g_row[i] = if p > 0.0 {
                    self.kl_weight * inv_b * (p.ln() + ln_v + 1.0) + div_grad[i]
                } else {
                    0.0
                };
                weighted += p * g_row[i];
            }
            let x = &fwd.inputs[b * d..(b + 1) * d];
            for j in 0..v {
                let dz = row[j] * (g_row[j] - weighted) / fwd.temperature;
                if dz == 0.0 {
                    continue;
                }
                for (k, &xk) in x.iter().enumerate() {
                    grad[k * v + j] += xk.as_f64() * dz;
                }
                grad[d * v + j] += dz;
            }
        }
        Ok((loss, grad.into_iter().map(T::of).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{finite_diff_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_model(d: usize, v: usize) -> GvqModel<f64> {
        GvqModel::from_parts(
            d,
            v,
            vec![0.0; d * v + v],
            vec![0.0; d * v],
            1.0,
            0.1,
            TemperatureSchedule::default(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn logits_examples() {
        let m = zero_model(3, 4);
        assert_eq!(m.logits(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0; 4]);

        let v = 4;
        let mut params = vec![0.0; v * v + v];
        for i in 0..v {
            params[i * v + i] = 1.0;
        }
        let m = GvqModel::from_parts(
            v,
            v,
            params,
            vec![0.0; v * v],
            1.0,
            0.0,
            TemperatureSchedule::default(),
            0,
        )
        .unwrap();
        let z = m.logits(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(z, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(m.infer_token(&[0.0, 0.0, 1.0, 0.0]).unwrap(), 2);
        assert!(m.logits(&[1.0]).is_err());
    }

    #[test]
    fn logits_match_dot_product_oracle() {
        let m: GvqModel<f64> =
            GvqModel::new(5, 7, 1.0, 0.1, TemperatureSchedule::default(), 42).unwrap();
        let x = [0.3, -1.0, 2.0, 0.5, -0.25];
        let z = m.logits(&x).unwrap();
        for j in 0..7 {
            let mut s = m.bias()[j];
            for k in 0..5 {
                s += m.weights()[k * 7 + j] * x[k];
            }
            assert!((z[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_free_sample_recovers_distribution() {
        let pi = [0.5f64, 0.3, 0.2];
        let logits: Vec<f64> = pi.iter().map(|p| p.ln()).collect();
        let r = gumbel_sample_with_noise(&logits, 1.0, &[0.0; 3]).unwrap();
        for (a, b) in r.probs.iter().zip(&pi) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(r.hard_token, 0);
    }

    #[test]
    fn zero_temperature_limit_is_one_hot() {
        let logits = [0.1f64, 0.4, 0.3];
        let g = [0.5, 0.0, 0.2];
        let r = gumbel_sample_with_noise(&logits, 1e-4, &g).unwrap();
        assert_eq!(r.hard_token, 0);
        assert!((r.probs[0] - 1.0).abs() < 1e-9);
        assert!(gumbel_sample_with_noise(&logits, 0.0, &g).is_err());
        assert!(gumbel_sample_with_noise(&[f64::NAN, 0.0, 0.0], 1.0, &g).is_err());
    }

    #[test]
    fn gumbel_max_frequencies() {
        let logits: Vec<f64> = [0.7f64, 0.2, 0.1].iter().map(|p| p.ln()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[gumbel_sample(&logits, 1.0, &mut rng).unwrap().hard_token] += 1;
        }
        for (c, p) in counts.iter().zip([0.7, 0.2, 0.1]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn samples_lie_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let logits: Vec<f32> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
            let tau = rng.random_range(0.05..3.0);
            let r = gumbel_sample(&logits, tau, &mut rng).unwrap();
            let s: f64 = r.probs.iter().map(|&p| p as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(r.probs.iter().all(|&p| p >= 0.0));
            assert_eq!(r.hard_token, argmax(&r.probs));
        }
    }

    #[test]
    fn loss_examples() {
        let v = 50;
        let uniform = vec![1.0 / v as f64; 3 * v];
        let l = gvq_loss(&uniform, v, 1.0, 1.0).unwrap();
        assert!(l.kl_term.abs() < 1e-12);
        assert!((l.perplexity - 50.0).abs() < 1e-9);
        assert!(l.diversity_term.abs() < 1e-12);
        assert!(l.total.abs() < 1e-12);

        let mut one_hot = vec![0.0; 2 * v];
        one_hot[0] = 1.0;
        one_hot[v] = 1.0;
        let l = gvq_loss(&one_hot, v, 1.0, 1.0).unwrap();
        assert!((l.kl_term - 50f64.ln()).abs() < 1e-12);
        assert_eq!(l.perplexity, 1.0);
        assert!((l.diversity_term - 0.98).abs() < 1e-12);

        let two = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let l = gvq_loss(&two, 4, 1.0, 1.0).unwrap();
        assert!((l.kl_term - 4f64.ln()).abs() < 1e-12);
        assert!((l.perplexity - 2.0).abs() < 1e-12);
        assert!((l.diversity_term - 0.5).abs() < 1e-12);

        assert!(gvq_loss(&[0.5, 0.4], 2, 1.0, 1.0).is_err());
    }

    #[test]
    fn temperature_schedule() {
        let s = TemperatureSchedule::default();
        assert_eq!(s.temperature_at(0), 2.0);
        assert!((s.temperature_at(1) - 1.998).abs() < 1e-12);
        assert_eq!(s.temperature_at(1_000_000), 0.1);
        assert_eq!(s.temperature_at(u64::MAX), 0.1);
        let mut prev = f64::INFINITY;
        for step in (0..10_000).step_by(7) {
            let t = s.temperature_at(step);
            assert!(t <= prev && (0.1..=2.0).contains(&t));
            prev = t;
        }
        assert_eq!(TemperatureSchedule::constant().temperature_at(123), 1.0);
    }

    #[test]
    fn infer_token_ties_and_determinism() {
        let v = 8;
        let d = 1;
        let mut params = vec![0.0; d * v + v];
        params[d * v + 7] = 1.0;
        let m = GvqModel::from_parts(
            d,
            v,
            params.clone(),
            vec![0.0; d * v],
            1.0,
            0.0,
            TemperatureSchedule::default(),
            0,
        )
        .unwrap();
        assert_eq!(m.infer_token(&[0.3]).unwrap(), 7);
        params[d * v + 7] = 0.0;
        params[d * v + 2] = 1.0;
        params[d * v + 5] = 1.0;
        let m = GvqModel::from_parts(
            d,
            v,
            params,
            vec![0.0; d * v],
            1.0,
            0.0,
            TemperatureSchedule::default(),
            0,
        )
        .unwrap();
        assert_eq!(m.infer_token(&[0.3]).unwrap(), 2);
        assert_eq!(
            m.infer_token(&[0.3]).unwrap(),
            m.infer_token(&[0.3]).unwrap()
        );
    }

    fn random_case(seed: u64) -> (GvqModel<f64>, Vec<Vec<f64>>, Vec<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v, b) = (4, 6, 5);
        let mut m: GvqModel<f64> = GvqModel::new(
            d,
            v,
            rng.random_range(0.5..2.0),
            rng.random_range(0.0..0.5),
            TemperatureSchedule::default(),
            seed,
        )
        .unwrap();
        for p in m.params_mut() {
            *p += rng.random_range(-0.5..0.5);
        }
        let frames = (0..b)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let noise = sample_gumbel(&mut rng, b * v);
        (m, frames, noise, rng.random_range(0.5..2.0))
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..30 {
            let (m, frames, noise, tau) = random_case(seed);
            let refs: Vec<&[f64]> = frames.iter().map(|f| &f[..]).collect();
            let fwd = m.forward(&refs, &noise, tau).unwrap();
            let (_, analytic) = m.backward(&fwd).unwrap();
            let numeric = finite_diff_grad(
                |p: &[f64]| {
                    let mut probe = m.clone();
                    probe.params_mut().copy_from_slice(p);
                    let f = probe.forward(&refs, &noise, tau).unwrap();
                    probe.loss(&f).unwrap().total
                },
                m.params(),
                1e-6,
            )
            .unwrap();
            assert!(relative_error(&analytic, &numeric) < 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let (mut m, frames, noise, tau) = random_case(1);
        m.kl_weight = 0.0;
        m.diversity_weight = 0.0;
        let refs: Vec<&[f64]> = frames.iter().map(|f| &f[..]).collect();
        let fwd = m.forward(&refs, &noise, tau).unwrap();
        let (l, g) = m.backward(&fwd).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kl_gradient_vanishes_at_uniform() {
        let mut m = zero_model(3, 5);
        m.diversity_weight = 0.0;
        let x = [0.4, -0.2, 1.0];
        let fwd = m.forward(&[&x[..]], &[0.0; 5], 1.0).unwrap();
        let (l, g) = m.backward(&fwd).unwrap();
        assert!(l.kl_term.abs() < 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (mut m, frames, noise, tau) = random_case(3);
        let refs: Vec<&[f64]> = frames.iter().map(|f| &f[..]).collect();
        let fwd = m.forward(&refs, &noise, tau).unwrap();
        m.params_mut()[0] += 0.1;
        assert!(matches!(m.backward(&fwd), Err(Error::StaleCache)));
    }
}
