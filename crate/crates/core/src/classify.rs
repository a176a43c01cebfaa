//! k-NN classification of token sequences, UAR scoring and the stats-pooled
//! linear-probe baseline.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingTensor;
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::{argmax, Scalar};
use crate::seed::rng_for;
use crate::seqdist::DistanceKind;

pub const KNN_K_GRID: [usize; 5] = [1, 3, 5, 7, 9];
const DISTANCE_WEIGHT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Uniform,
    Distance,
}

impl Weighting {
    pub const ALL: [Weighting; 2] = [Weighting::Uniform, Weighting::Distance];

    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::Distance => "distance",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Ctid,
    Clid,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Ctid, Task::Clid];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Ctid => "CTID",
            Task::Clid => "CLID",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub weighting: Weighting,
    pub task: Task,
}

/// A labelled reference sequence.
#[derive(Clone, Copy, Debug)]
pub struct Reference<'a> {
    pub tokens: &'a [u16],
    pub label: usize,
}

/// Majority vote among the `k` nearest references (ranked by distance, then
/// reference index). Vote ties go to the smaller summed neighbour distance,
/// then the lower label.
pub fn knn_vote(
    distances: &[f64],
    labels: &[usize],
    k: usize,
    weighting: Weighting,
) -> Result<usize> {
    if distances.is_empty() {
        return Err(Error::invalid("k-NN needs at least one reference"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let k = k.min(order.len());
    let n_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut weight = vec![0.0f64; n_labels];
    let mut dist_sum = vec![0.0f64; n_labels];
    let mut voted = vec![false; n_labels];
    for &i in &order[..k] {
        let d = distances[i];
        let w = match weighting {
            Weighting::Uniform => 1.0,
            Weighting::Distance => 1.0 / (d + DISTANCE_WEIGHT_EPS),
        };
        weight[labels[i]] += w;
        dist_sum[labels[i]] += d;
        voted[labels[i]] = true;
    }
    let mut best: Option<usize> = None;
    for label in (0..n_labels).filter(|&l| voted[l]) {
        best = Some(match best {
            None => label,
            Some(b) => {
                if weight[label] > weight[b]
                    || (weight[label] == weight[b] && dist_sum[label] < dist_sum[b])
                {
                    label
                } else {
                    b
                }
            }
        });
    }
    Ok(best.expect("at least one neighbour voted"))
}

pub fn knn_predict(
    query: &[u16],
    references: &[Reference<'_>],
    config: &KnnConfig,
    kind: DistanceKind,
) -> Result<usize> {
    let distances: Vec<f64> = references
        .iter()
        .map(|r| kind.distance(query, r.tokens))
        .collect();
    let labels: Vec<usize> = references.iter().map(|r| r.label).collect();
    knn_vote(&distances, &labels, config.k, config.weighting)
}

/// Distances from every query to every reference (rows = queries).
pub fn distance_table(
    queries: &[&[u16]],
    refs: &[Reference<'_>],
    kind: DistanceKind,
) -> Vec<Vec<f64>> {
    queries
        .par_iter()
        .map(|q| refs.iter().map(|r| kind.distance(q, r.tokens)).collect())
        .collect()
}

/// Unweighted average recall in percent over the classes present in `truths`.
pub fn uar(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::invalid("UAR of an empty set"));
    }
    if let Some(&l) = truths.iter().chain(predictions).find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!(
            "label {l} outside [0, {n_classes})"
        )));
    }
    let mut total = vec![0u64; n_classes];
    let mut hit = vec![0u64; n_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        total[t] += 1;
        hit[t] += u64::from(p == t);
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| total[c] > 0).collect();
    let mean: f64 = present
        .iter()
        .map(|&c| hit[c] as f64 / total[c] as f64)
        .sum::<f64>()
        / present.len() as f64;
    Ok(100.0 * mean)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnSearch {
    pub best: KnnConfig,
    pub val_uar: f64,
    /// `(k, weighting, val UAR)` for every grid point, grid order.
    pub table: Vec<(usize, Weighting, f64)>,
}

/// Evaluate the k x weighting grid on the validation set; ties favour the
/// smaller k, then uniform weighting.
pub fn knn_grid_search(
    train: &[Reference<'_>],
    val: &[Reference<'_>],
    task: Task,
    n_classes: usize,
    kind: DistanceKind,
) -> Result<KnnSearch> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid(
            "k-NN grid search needs non-empty train and val sets",
        ));
    }
    let queries: Vec<&[u16]> = val.iter().map(|r| r.tokens).collect();
    let table = distance_table(&queries, train, kind);
    let labels: Vec<usize> = train.iter().map(|r| r.label).collect();
    let truths: Vec<usize> = val.iter().map(|r| r.label).collect();
    let mut results = Vec::with_capacity(KNN_K_GRID.len() * 2);
    let mut best: Option<(KnnConfig, f64)> = None;
    for k in KNN_K_GRID {
        for weighting in Weighting::ALL {
            let preds = table
                .iter()
                .map(|d| knn_vote(d, &labels, k, weighting))
                .collect::<Result<Vec<_>>>()?;
            let score = uar(&preds, &truths, n_classes)?;
            results.push((k, weighting, score));
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((KnnConfig { k, weighting, task }, score));
            }
        }
    }
    let (best, val_uar) = best.expect("grid is non-empty");
    Ok(KnnSearch {
        best,
        val_uar,
        table: results,
    })
}

/// Predict every query with a fixed configuration.
pub fn knn_predict_all(
    queries: &[&[u16]],
    train: &[Reference<'_>],
    config: &KnnConfig,
    kind: DistanceKind,
) -> Result<Vec<usize>> {
    let labels: Vec<usize> = train.iter().map(|r| r.label).collect();
    distance_table(queries, train, kind)
        .iter()
        .map(|d| knn_vote(d, &labels, config.k, config.weighting))
        .collect()
}

/// `[mean, population std]` per dimension over the first `effective_frames`
/// frames of `layer`.
pub fn stats_pool<T: Scalar>(
    embeddings: &EmbeddingTensor<T>,
    layer: usize,
    effective_frames: usize,
) -> Result<Vec<T>> {
    if layer >= embeddings.layers() {
        return Err(Error::invalid(format!(
            "layer {layer} outside [0, {})",
            embeddings.layers()
        )));
    }
    if effective_frames == 0 || effective_frames > embeddings.frames() {
        return Err(Error::invalid(format!(
            "effective_frames {effective_frames} outside [1, {}]",
            embeddings.frames()
        )));
    }
    let d = embeddings.dim();
    let n = effective_frames as f64;
    let mut mean = vec![0.0f64; d];
    for f in 0..effective_frames {
        for (m, x) in mean.iter_mut().zip(embeddings.frame(layer, f)) {
            *m += x.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; d];
    for f in 0..effective_frames {
        for ((v, x), m) in var.iter_mut().zip(embeddings.frame(layer, f)).zip(&mean) {
            let c = x.as_f64() - m;
            *v += c * c;
        }
    }
    Ok(mean
        .iter()
        .map(|&m| T::of(m))
        .chain(var.iter().map(|&v| T::of((v / n).sqrt())))
        .collect())
}

/// Mean softmax cross-entropy of a linear layer and its gradient.
///
/// `params` holds `W` (`n_features x n_classes`, row-major) then `b`.
pub fn cross_entropy<T: Scalar>(
    params: &[T],
    features: &[&[T]],
    labels: &[usize],
    n_classes: usize,
) -> (f64, Vec<T>) {
    let c = n_classes;
    let f = params.len() / c - 1;
    debug_assert_eq!(params.len(), f * c + c);
    let mut grad = vec![0.0f64; params.len()];
    let mut loss = 0.0;
    let inv = 1.0 / features.len() as f64;
    for (x, &y) in features.iter().zip(labels) {
        let mut z: Vec<f64> = params[f * c..].iter().map(|b| b.as_f64()).collect();
        for (k, xk) in x.iter().enumerate() {
            let xk = xk.as_f64();
            for (zj, w) in z.iter_mut().zip(&params[k * c..(k + 1) * c]) {
                *zj += xk * w.as_f64();
            }
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_norm = max + sum.ln();
        loss += (log_norm - z[y]) * inv;
        for j in 0..c {
            let dz = ((z[j] - log_norm).exp() - f64::from(u8::from(j == y))) * inv;
            for (k, xk) in x.iter().enumerate() {
                grad[k * c + j] += xk.as_f64() * dz;
            }
            grad[f * c + j] += dz;
        }
    }
    (loss, grad.into_iter().map(T::of).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub layer: usize,
    pub n_features: usize,
    pub n_classes: usize,
    /// `W` then `b`, as in [`cross_entropy`].
    pub params: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub learning_rate: f64,
    pub val_uar: f64,
}

impl LinearProbe {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn predict(&self, features: &[f64]) -> usize {
        let x = self.standardize(features);
        predict_standardized(&self.params, &x, self.n_classes)
    }
}

fn predict_standardized(params: &[f64], x: &[f64], c: usize) -> usize {
    let f = x.len();
    let mut z = params[f * c..].to_vec();
    for (k, &xk) in x.iter().enumerate() {
        for (zj, w) in z.iter_mut().zip(&params[k * c..(k + 1) * c]) {
            *zj += xk * w;
        }
    }
    argmax(&z)
}

pub struct LinearTrainConfig {
    pub learning_rates: Vec<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for LinearTrainConfig {
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-4, 1e-3, 1e-2],
            batch_size: 32,
            max_epochs: 20,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on standardized features, Adam, best
/// validation-UAR epoch across the learning-rate grid.
pub fn train_linear(
    train: (&[Vec<f64>], &[usize]),
    val: (&[Vec<f64>], &[usize]),
    n_classes: usize,
    layer: usize,
    config: &LinearTrainConfig,
) -> Result<LinearProbe> {
    let (xs, ys) = train;
    let (vx, vy) = val;
    if xs.is_empty() || vx.is_empty() || xs.len() != ys.len() || vx.len() != vy.len() {
        return Err(Error::invalid(
            "linear probe needs non-empty, aligned train and val sets",
        ));
    }
    if config.learning_rates.is_empty() || config.batch_size == 0 {
        return Err(Error::invalid(
            "linear probe needs learning rates and a positive batch size",
        ));
    }
    let f = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = vec![0.0; f];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; f];
    for x in xs {
        for ((s, v), m) in std.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std: Vec<f64> = std
        .into_iter()
        .map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    let standardize = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let train_x: Vec<Vec<f64>> = xs.iter().map(|x| standardize(x)).collect();
    let val_x: Vec<Vec<f64>> = vx.iter().map(|x| standardize(x)).collect();

    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for &lr in &config.learning_rates {
        let mut params = vec![0.0f64; f * n_classes + n_classes];
        let mut adam = AdamState::new(params.len(), AdamConfig::new(lr))?;
        let mut order: Vec<usize> = (0..train_x.len()).collect();
        for epoch in 0..config.max_epochs {
            order.shuffle(&mut rng_for(
                config.seed,
                &format!("linear/{layer}/{lr}/{epoch}"),
            ));
            for chunk in order.chunks(config.batch_size) {
                let feats: Vec<&[f64]> = chunk.iter().map(|&i| &train_x[i][..]).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
                let (loss, grad) = cross_entropy(&params, &feats, &labels, n_classes);
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        message: format!("linear probe loss {loss} at lr {lr}"),
                    });
                }
                adam.step(&mut params, &grad)?;
            }
            let preds: Vec<usize> = val_x
                .iter()
                .map(|x| predict_standardized(&params, x, n_classes))
                .collect();
            let score = uar(&preds, vy, n_classes)?;
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, lr, params.clone()));
            }
        }
    }
    let (val_uar, learning_rate, params) =
        best.ok_or_else(|| Error::invalid("no training epochs"))?;
    Ok(LinearProbe {
        layer,
        n_features: f,
        n_classes,
        params,
        feature_mean: mean,
        feature_std: std,
        learning_rate,
        val_uar,
    })
}

/// Relative drop of `token_uar` below `baseline_uar`, in percent.
pub fn delta_drop(baseline_uar: f64, token_uar: f64) -> Result<f64> {
    if !(baseline_uar > 0.0) {
        return Err(Error::invalid("baseline UAR must be positive"));
    }
    Ok((baseline_uar - token_uar) / baseline_uar * 100.0)
}

pub fn chance_level(n_classes: usize) -> f64 {
    100.0 / n_classes as f64
}
