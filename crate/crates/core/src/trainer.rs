//! Quantizer training: one codebook shared by all layers, per-epoch
//! validation, best-epoch selection and hyperparameter grid search.
//!
//! Each batch of `B` samples contributes all `L` layers as `B * L` frame
//! sequences. Frames past a sample's effective length (padding) are never
//! seen by the quantizer.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{QuantizerKind, QuantizerModel};
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::gvq::{sample_gumbel, GvqLoss, GvqModel, TemperatureSchedule};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::seed::{rng_for, sub_seed, Provenance};
use crate::vq::{
    usage_from_counts, Codebook, CodebookInit, DEFAULT_BETA, DEFAULT_EMA_DECAY,
    DEFAULT_LAPLACE_EPS, DEFAULT_VOCAB_SIZE,
};

pub const MAX_EPOCHS: usize = 20;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const LEARNING_RATE_GRID: [f64; 3] = [1e-4, 1e-3, 1e-2];
pub const KL_WEIGHT_GRID: [f64; 4] = [0.5, 1.0, 1.5, 2.0];
pub const DIVERSITY_WEIGHT_GRID: [f64; 6] = [0.0, 0.01, 0.05, 0.1, 0.2, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqOptions {
    pub beta: f64,
    pub ema: bool,
    pub ema_decay: f64,
    pub laplace_eps: f64,
    pub init: CodebookInit,
    /// Re-seed codes that received no training frames during an epoch.
    pub reinit_dead: bool,
}

impl Default for VqOptions {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            ema: false,
            ema_decay: DEFAULT_EMA_DECAY,
            laplace_eps: DEFAULT_LAPLACE_EPS,
            init: CodebookInit::RandomFrames,
            reinit_dead: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GvqOptions {
    pub kl_weight: f64,
    pub diversity_weight: f64,
    pub temperature: TemperatureSchedule,
}

impl Default for GvqOptions {
    fn default() -> Self {
        Self {
            kl_weight: 1.0,
            diversity_weight: 0.1,
            temperature: TemperatureSchedule::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub quantizer_kind: QuantizerKind,
    pub vocab_size: usize,
    pub vq: VqOptions,
    pub gvq: GvqOptions,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            max_epochs: MAX_EPOCHS,
            learning_rate: 1e-3,
            quantizer_kind: QuantizerKind::Vq,
            vocab_size: DEFAULT_VOCAB_SIZE,
            vq: VqOptions::default(),
            gvq: GvqOptions::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.max_epochs == 0 || self.max_epochs > MAX_EPOCHS {
            return Err(Error::invalid(format!(
                "max_epochs must lie in [1, {MAX_EPOCHS}]"
            )));
        }
        if self.vocab_size < 2 || self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::invalid("vocab_size must lie in [2, 65536]"));
        }
        Ok(())
    }
}

/// A batch of sample positions (indices into the split's sample list).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub samples: Vec<usize>,
    pub layers: usize,
}

impl Batch {
    /// `(sample, layer)` pairs in sample-major order: the `B x L` sequences
    /// fed to the shared quantizer.
    pub fn layer_sequences(&self) -> Vec<(usize, usize)> {
        self.samples
            .iter()
            .flat_map(|&s| (0..self.layers).map(move |l| (s, l)))
            .collect()
    }
}

/// Shuffle `0..n_samples` with `seed` and cut it into batches; the last
/// partial batch is kept.
pub fn make_batches(
    n_samples: usize,
    n_layers: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if n_samples == 0 {
        return Err(Error::invalid("cannot batch an empty split"));
    }
    if batch_size == 0 || n_layers == 0 {
        return Err(Error::invalid(
            "batch_size and layer count must be positive",
        ));
    }
    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut rng_for(seed, "batches"));
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch {
            samples: c.to_vec(),
            layers: n_layers,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Selection criterion: mean squared quantization error for VQ, total
    /// loss for GVQ.
    pub val_criterion: f64,
    pub perplexity: f64,
    pub normalized_perplexity: f64,
    pub fraction_used: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation criterion of the freshly initialized model.
    pub initial_val_criterion: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose model was returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: QuantizerModel<T>,
    pub history: TrainHistory,
    pub config: TrainConfig,
}

type Frames<'a, T> = Vec<&'a [T]>;

/// Unpadded frames of every `(sample, layer)` sequence, in order.
fn gather<'a, T: Scalar>(corpus: &'a Corpus<T>, seqs: &[(usize, usize)]) -> Frames<'a, T> {
    let mut out = Vec::new();
    for &(s, l) in seqs {
        let sample = &corpus.samples[s];
        out.extend((0..sample.effective_frames).map(|f| sample.tensor.frame(l, f)));
    }
    out
}

fn split_sequences<T: Scalar>(corpus: &Corpus<T>, split: Split) -> Vec<(usize, usize)> {
    corpus
        .split_indices(split)
        .into_iter()
        .flat_map(|s| (0..corpus.layers()).map(move |l| (s, l)))
        .collect()
}

/// Train one quantizer and return the model from the epoch with the best
/// validation criterion.
pub fn train_quantizer<T: Scalar>(
    corpus: &Corpus<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let train = corpus.split_indices(Split::Train);
    if train.is_empty() || corpus.split_indices(Split::Val).is_empty() {
        return Err(Error::invalid(
            "training needs non-empty train and val splits",
        ));
    }
    match config.quantizer_kind {
        QuantizerKind::Vq => train_vq(corpus, config, &train),
        QuantizerKind::Gvq => train_gvq(corpus, config, &train),
    }
}

fn diverged(epoch: usize, what: impl Into<String>) -> Error {
    Error::Divergence {
        epoch,
        message: what.into(),
    }
}

struct VqEval {
    error: f64,
    perplexity: f64,
    fraction_used: f64,
}

fn eval_vq<T: Scalar>(codebook: &Codebook<T>, frames: &[&[T]]) -> Result<VqEval> {
    let nearest: Vec<(usize, f64)> = frames.par_iter().map(|x| codebook.nearest(x)).collect();
    let mut counts = vec![0u64; codebook.vocab_size()];
    let mut total = 0.0;
    for &(k, d) in &nearest {
        counts[k] += 1;
        total += d;
    }
    let usage = usage_from_counts(&counts)?;
    Ok(VqEval {
        error: total / frames.len() as f64,
        perplexity: usage.perplexity,
        fraction_used: usage.fraction_used,
    })
}

fn train_vq<T: Scalar>(
    corpus: &Corpus<T>,
    config: &TrainConfig,
    train: &[usize],
) -> Result<TrainOutcome<T>> {
    let opts = config.vq;
    let all_train = gather(corpus, &split_sequences(corpus, Split::Train));
    let val_frames = gather(corpus, &split_sequences(corpus, Split::Val));
    let mut codebook = Codebook::init_from_frames(
        &all_train,
        config.vocab_size,
        opts.init,
        &mut rng_for(config.seed, "vq/init"),
    )?;
    let (v, d) = (codebook.vocab_size(), codebook.dim());
    let mut adam = AdamState::new(v * d, AdamConfig::new(config.learning_rate))?;
    let initial = eval_vq(&codebook, &val_frames)?.error;

    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(usize, f64, Codebook<T>)> = None;
    for epoch in 1..=config.max_epochs {
        codebook.reset_usage();
        let batches = make_batches(
            train.len(),
            corpus.layers(),
            config.batch_size,
            sub_seed(config.seed, &format!("epoch/{epoch}")),
        )?;
        let mut loss_sum = 0.0;
        let mut loss_frames = 0usize;
        for batch in &batches {
            let seqs: Vec<(usize, usize)> = batch
                .layer_sequences()
                .into_iter()
                .map(|(s, l)| (train[s], l))
                .collect();
            let frames = gather(corpus, &seqs);
            if frames.is_empty() {
                continue;
            }
            let nearest: Vec<(usize, f64)> =
                frames.par_iter().map(|x| codebook.nearest(x)).collect();
            let batch_err: f64 = nearest.iter().map(|n| n.1).sum();
            if !batch_err.is_finite() {
                return Err(diverged(epoch, "non-finite VQ loss"));
            }
            loss_sum += batch_err * (1.0 + opts.beta);
            loss_frames += frames.len();
            for &(k, _) in &nearest {
                codebook.record_usage(k);
            }
            if opts.ema {
                let assignments: Vec<(&[T], usize)> = frames
                    .iter()
                    .zip(&nearest)
                    .map(|(x, n)| (*x, n.0))
                    .collect();
                codebook
                    .ema_update(&assignments, opts.ema_decay, opts.laplace_eps)
                    .map_err(|e| diverged(epoch, e.to_string()))?;
            } else {
                let inv = 1.0 / frames.len() as f64;
                let mut grad = vec![0.0f64; v * d];
                for (x, &(k, _)) in frames.iter().zip(&nearest) {
                    let c = codebook.vector(k);
                    for j in 0..d {
                        grad[k * d + j] += 2.0 * (c[j].as_f64() - x[j].as_f64()) * inv;
                    }
                }
                let grad: Vec<T> = grad.into_iter().map(T::of).collect();
                adam.step(codebook.params_mut(), &grad)
                    .map_err(|e| diverged(epoch, e.to_string()))?;
            }
        }
        if opts.reinit_dead {
            codebook.reinit_unused(
                &all_train,
                &mut rng_for(config.seed, &format!("vq/reinit/{epoch}")),
            );
        }
        let train_loss = loss_sum / loss_frames.max(1) as f64;
        let eval = eval_vq(&codebook, &val_frames)?;
        if !eval.error.is_finite() || !train_loss.is_finite() {
            return Err(diverged(epoch, "non-finite VQ validation error"));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: eval.error * (1.0 + opts.beta),
            val_criterion: eval.error,
            perplexity: eval.perplexity,
            normalized_perplexity: eval.perplexity / v as f64,
            fraction_used: eval.fraction_used,
        });
        if best.as_ref().is_none_or(|b| eval.error < b.1) {
            best = Some((epoch, eval.error, codebook.clone()));
        }
    }
    let (best_epoch, _, trained) = best.expect("at least one epoch");
    // Drop training-only state (usage, EMA accumulators).
    let model = Codebook::new(trained.vectors().to_vec(), v, d)?;
    Ok(TrainOutcome {
        model: QuantizerModel::Vq(model),
        history: TrainHistory {
            initial_val_criterion: initial,
            epochs,
            best_epoch,
        },
        config: *config,
    })
}

/// Gumbel noise for the frames of `(sample, layer)` sequences, drawn from
/// one stream per sample so it does not depend on batching.
fn noise_for<T: Scalar>(
    corpus: &Corpus<T>,
    seqs: &[(usize, usize)],
    v: usize,
    seed: u64,
    tag: &str,
) -> Vec<f64> {
    let mut out = Vec::new();
    let mut current: Option<(usize, rand_chacha::ChaCha8Rng)> = None;
    for &(s, _) in seqs {
        if current.as_ref().is_none_or(|c| c.0 != s) {
            current = Some((s, rng_for(seed, &format!("{tag}/{s}"))));
        }
        let rng = &mut current.as_mut().expect("set above").1;
        out.extend(sample_gumbel(rng, corpus.samples[s].effective_frames * v));
    }
    out
}

struct GvqEval {
    loss: GvqLoss,
    fraction_used: f64,
}

fn eval_gvq<T: Scalar>(
    model: &GvqModel<T>,
    frames: &[&[T]],
    noise: &[f64],
    temperature: f64,
) -> Result<GvqEval> {
    let fwd = model.forward(frames, noise, temperature)?;
    let loss = model.loss(&fwd)?;
    let tokens: Vec<usize> = frames
        .par_iter()
        .map(|x| model.infer_token(x))
        .collect::<Result<Vec<_>>>()?;
    let mut used = vec![false; model.vocab_size()];
    tokens.iter().for_each(|&t| used[t] = true);
    let fraction_used = used.iter().filter(|&&u| u).count() as f64 / model.vocab_size() as f64;
    Ok(GvqEval {
        loss,
        fraction_used,
    })
}

fn better_gvq(candidate: &GvqLoss, best: &GvqLoss) -> bool {
    candidate.total < best.total
        || (candidate.total == best.total
            && candidate.normalized_perplexity > best.normalized_perplexity)
}

fn train_gvq<T: Scalar>(
    corpus: &Corpus<T>,
    config: &TrainConfig,
    train: &[usize],
) -> Result<TrainOutcome<T>> {
    let opts = config.gvq;
    let mut model = GvqModel::<T>::new(
        corpus.dim(),
        config.vocab_size,
        opts.kl_weight,
        opts.diversity_weight,
        opts.temperature,
        sub_seed(config.seed, "gvq/model"),
    )?;
    let v = config.vocab_size;
    let val_seqs = split_sequences(corpus, Split::Val);
    let val_frames = gather(corpus, &val_seqs);
    let val_noise = noise_for(corpus, &val_seqs, v, config.seed, "gvq/val-noise");
    let mut adam = AdamState::new(model.params().len(), AdamConfig::new(config.learning_rate))?;
    let mut step: u64 = 0;
    let initial = eval_gvq(&model, &val_frames, &val_noise, model.temperature_at(0))?
        .loss
        .total;

    let mut epochs = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(usize, GvqLoss, GvqModel<T>)> = None;
    for epoch in 1..=config.max_epochs {
        let batches = make_batches(
            train.len(),
            corpus.layers(),
            config.batch_size,
            sub_seed(config.seed, &format!("epoch/{epoch}")),
        )?;
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for batch in &batches {
            let seqs: Vec<(usize, usize)> = batch
                .layer_sequences()
                .into_iter()
                .map(|(s, l)| (train[s], l))
                .collect();
            let frames = gather(corpus, &seqs);
            if frames.is_empty() {
                continue;
            }
            let noise = noise_for(corpus, &seqs, v, config.seed, &format!("gvq/noise/{epoch}"));
            let tau = model.temperature_at(step);
            let fwd = model.forward(&frames, &noise, tau)?;
            let (loss, grad) = model.backward(&fwd)?;
            if !loss.total.is_finite() {
                return Err(diverged(epoch, "non-finite GVQ loss"));
            }
            loss_sum += loss.total;
            steps += 1;
            adam.step(model.params_mut(), &grad)
                .map_err(|e| diverged(epoch, e.to_string()))?;
            step += 1;
        }
        let eval = eval_gvq(&model, &val_frames, &val_noise, model.temperature_at(step))?;
        if !eval.loss.total.is_finite() {
            return Err(diverged(epoch, "non-finite GVQ validation loss"));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps.max(1) as f64,
            val_loss: eval.loss.total,
            val_criterion: eval.loss.total,
            perplexity: eval.loss.perplexity,
            normalized_perplexity: eval.loss.normalized_perplexity,
            fraction_used: eval.fraction_used,
        });
        if best.as_ref().is_none_or(|b| better_gvq(&eval.loss, &b.1)) {
            best = Some((epoch, eval.loss, model.clone()));
        }
    }
    let (best_epoch, _, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: QuantizerModel::Gvq(model),
        history: TrainHistory {
            initial_val_criterion: initial,
            epochs,
            best_epoch,
        },
        config: *config,
    })
}

/// Hyperparameter axes; the grid is their cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub quantizer_kind: QuantizerKind,
    pub learning_rates: Vec<f64>,
    /// VQ only.
    pub ema: Vec<bool>,
    /// GVQ only.
    pub kl_weights: Vec<f64>,
    /// GVQ only.
    pub diversity_weights: Vec<f64>,
}

impl GridSpec {
    pub fn vq() -> Self {
        Self {
            quantizer_kind: QuantizerKind::Vq,
            learning_rates: LEARNING_RATE_GRID.to_vec(),
            ema: vec![true, false],
            kl_weights: Vec::new(),
            diversity_weights: Vec::new(),
        }
    }

    pub fn gvq() -> Self {
        Self {
            quantizer_kind: QuantizerKind::Gvq,
            learning_rates: LEARNING_RATE_GRID.to_vec(),
            ema: Vec::new(),
            kl_weights: KL_WEIGHT_GRID.to_vec(),
            diversity_weights: DIVERSITY_WEIGHT_GRID.to_vec(),
        }
    }

    pub fn for_kind(kind: QuantizerKind) -> Self {
        match kind {
            QuantizerKind::Vq => Self::vq(),
            QuantizerKind::Gvq => Self::gvq(),
        }
    }

    /// The one-point grid holding exactly `config`'s hyperparameters.
    pub fn single(config: &TrainConfig) -> Self {
        Self {
            quantizer_kind: config.quantizer_kind,
            learning_rates: vec![config.learning_rate],
            ema: vec![config.vq.ema],
            kl_weights: vec![config.gvq.kl_weight],
            diversity_weights: vec![config.gvq.diversity_weight],
        }
    }

    /// Every grid point as a full config derived from `base`, in grid order.
    pub fn points(&self, base: &TrainConfig) -> Result<Vec<TrainConfig>> {
        let mut out = Vec::new();
        let mut base = *base;
        base.quantizer_kind = self.quantizer_kind;
        match self.quantizer_kind {
            QuantizerKind::Vq => {
                for &lr in &self.learning_rates {
                    for &ema in &self.ema {
                        let mut c = base;
                        c.learning_rate = lr;
                        c.vq.ema = ema;
                        out.push(c);
                    }
                }
            }
            QuantizerKind::Gvq => {
                for &lr in &self.learning_rates {
                    for &kl in &self.kl_weights {
                        for &div in &self.diversity_weights {
                            let mut c = base;
                            c.learning_rate = lr;
                            c.gvq.kl_weight = kl;
                            c.gvq.diversity_weight = div;
                            out.push(c);
                        }
                    }
                }
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("hyperparameter grid is empty"));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridMetrics {
    pub val_criterion: f64,
    pub perplexity: f64,
    pub normalized_perplexity: f64,
    pub fraction_used: f64,
}

#[derive(Clone, Debug)]
pub struct GridResult {
    pub id: usize,
    pub config: TrainConfig,
    /// Metrics of the returned (best) epoch, or the failure message.
    pub outcome: std::result::Result<GridMetrics, String>,
}

pub struct GridSearch<T> {
    pub results: Vec<GridResult>,
    pub selected: usize,
    pub best: TrainOutcome<T>,
}

fn better_point(kind: QuantizerKind, a: &GridMetrics, b: &GridMetrics) -> bool {
    match kind {
        QuantizerKind::Vq => a.val_criterion < b.val_criterion,
        QuantizerKind::Gvq => {
            a.val_criterion < b.val_criterion
                || (a.val_criterion == b.val_criterion
                    && a.normalized_perplexity > b.normalized_perplexity)
        }
    }
}

/// Train every grid point in parallel. Failed points are recorded and the
/// search continues; it errors only when every point fails.
pub fn grid_search<T: Scalar>(
    corpus: &Corpus<T>,
    grid: &GridSpec,
    base: &TrainConfig,
) -> Result<GridSearch<T>> {
    let points = grid.points(base)?;
    let outcomes: Vec<Result<TrainOutcome<T>>> = points
        .par_iter()
        .map(|c| train_quantizer(corpus, c))
        .collect();
    let mut results = Vec::with_capacity(points.len());
    let mut selected: Option<usize> = None;
    let mut models: Vec<Option<TrainOutcome<T>>> = Vec::with_capacity(points.len());
    let mut first_error = None;
    for (id, (config, outcome)) in points.into_iter().zip(outcomes).enumerate() {
        match outcome {
            Ok(o) => {
                let b = o.history.best();
                let metrics = GridMetrics {
                    val_criterion: b.val_criterion,
                    perplexity: b.perplexity,
                    normalized_perplexity: b.normalized_perplexity,
                    fraction_used: b.fraction_used,
                };
                let take = match selected {
                    None => true,
                    Some(s) => {
                        better_point(grid.quantizer_kind, &metrics, results_metrics(&results, s))
                    }
                };
                if take {
                    selected = Some(id);
                }
                results.push(GridResult {
                    id,
                    config,
                    outcome: Ok(metrics),
                });
                models.push(Some(o));
            }
            Err(e) => {
                let message = e.to_string();
                first_error.get_or_insert(e);
                results.push(GridResult {
                    id,
                    config,
                    outcome: Err(message),
                });
                models.push(None);
            }
        }
    }
    match selected {
        Some(s) => Ok(GridSearch {
            best: models[s].take().expect("selected point succeeded"),
            results,
            selected: s,
        }),
        None => Err(first_error.expect("grid is non-empty")),
    }
}

fn results_metrics(results: &[GridResult], id: usize) -> &GridMetrics {
    results[id]
        .outcome
        .as_ref()
        .expect("selected point succeeded")
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\"").replace('\n', " "))
    } else {
        text.to_string()
    }
}

impl<T> GridSearch<T> {
    pub fn to_csv(&self, provenance: &Provenance) -> String {
        let mut out = String::from(
            "grid_id,quantizer,learning_rate,ema,beta,kl_weight,diversity_weight,val_criterion,perplexity,fraction_used,selected,status,seed,config_hash\n",
        );
        for r in &self.results {
            let c = &r.config;
            let (ema, beta, kl, div) = match c.quantizer_kind {
                QuantizerKind::Vq => (
                    c.vq.ema.to_string(),
                    num(c.vq.beta),
                    "NA".into(),
                    "NA".into(),
                ),
                QuantizerKind::Gvq => (
                    "NA".into(),
                    "NA".into(),
                    num(c.gvq.kl_weight),
                    num(c.gvq.diversity_weight),
                ),
            };
            let (crit, ppl, used, status) = match &r.outcome {
                Ok(m) => (
                    num(m.val_criterion),
                    num(m.perplexity),
                    num(m.fraction_used),
                    "ok".to_string(),
                ),
                Err(e) => (
                    "NA".into(),
                    "NA".into(),
                    "NA".into(),
                    csv_field(&format!("failed: {e}")),
                ),
            };
            let _ = writeln!(
                out,
                "{},{},{},{ema},{beta},{kl},{div},{crit},{ppl},{used},{},{status},{},{}",
                r.id,
                c.quantizer_kind.as_str(),
                num(c.learning_rate),
                r.id == self.selected,
                provenance.seed,
                provenance.config_hash
            );
        }
        out
    }
}
