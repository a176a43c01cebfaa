//! Edit distances between token sequences and the caller x call-type
//! pairwise analysis.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, SampleRecord};
use crate::error::{Error, Result};
use crate::seed::Provenance;
use crate::tokens::{TokenFile, TokenSequence};

/// Largest sequence count for which a full matrix is materialized.
pub const MAX_MATRIX_SEQUENCES: usize = 20_000;

/// Unit-cost Levenshtein distance with two rolling rows over the shorter
/// sequence.
pub fn levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0usize; short.len() + 1];
    for (i, x) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// `d(a, b) / max(|a|, |b|)`; two empty sequences are at distance 0.
pub fn normalized_levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> f64 {
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / longest as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    #[default]
    Normalized,
    Raw,
}

impl DistanceKind {
    pub fn distance<S: PartialEq>(self, a: &[S], b: &[S]) -> f64 {
        match self {
            DistanceKind::Normalized => normalized_levenshtein(a, b),
            DistanceKind::Raw => levenshtein(a, b) as f64,
        }
    }
}

/// Dense symmetric distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    /// Binary dump: magic `b"CDST"`, `u32` version 1, `u32` n, then the
    /// strict upper triangle row by row as little-endian `f32`.
    pub fn to_dump_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 2 * self.n * self.n.saturating_sub(1));
        out.extend_from_slice(b"CDST");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        for i in 0..self.n {
            for j in i + 1..self.n {
                out.extend_from_slice(&(self.get(i, j) as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn write_dump(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_dump_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// All pairwise distances between same-layer sequences.
pub fn pairwise_matrix(sequences: &[&TokenSequence], kind: DistanceKind) -> Result<DistanceMatrix> {
    let n = sequences.len();
    if n < 2 {
        return Err(Error::invalid("pairwise_matrix needs at least 2 sequences"));
    }
    if n > MAX_MATRIX_SEQUENCES {
        return Err(Error::invalid(format!(
            "{n} sequences exceed the dense-matrix limit of {MAX_MATRIX_SEQUENCES}"
        )));
    }
    let layer = sequences[0].layer;
    if let Some(s) = sequences.iter().find(|s| s.layer != layer) {
        return Err(Error::invalid(format!(
            "mixed layers: {} and {}",
            layer, s.layer
        )));
    }
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| kind.distance(&sequences[i].tokens, &sequences[j].tokens))
                .collect()
        })
        .collect();
    let mut values = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &d) in row.iter().enumerate() {
            let j = i + 1 + off;
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, values })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairCategory {
    IntraCallerIntraCalltype,
    IntraCallerInterCalltype,
    InterCallerIntraCalltype,
    InterCallerInterCalltype,
}

impl PairCategory {
    pub const ALL: [PairCategory; 4] = [
        PairCategory::IntraCallerIntraCalltype,
        PairCategory::IntraCallerInterCalltype,
        PairCategory::InterCallerIntraCalltype,
        PairCategory::InterCallerInterCalltype,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairCategory::IntraCallerIntraCalltype => "intra_caller_intra_calltype",
            PairCategory::IntraCallerInterCalltype => "intra_caller_inter_calltype",
            PairCategory::InterCallerIntraCalltype => "inter_caller_intra_calltype",
            PairCategory::InterCallerInterCalltype => "inter_caller_inter_calltype",
        }
    }

    fn of(same_caller: bool, same_calltype: bool) -> Self {
        match (same_caller, same_calltype) {
            (true, true) => PairCategory::IntraCallerIntraCalltype,
            (true, false) => PairCategory::IntraCallerInterCalltype,
            (false, true) => PairCategory::InterCallerIntraCalltype,
            (false, false) => PairCategory::InterCallerInterCalltype,
        }
    }
}

pub fn categorize_pair(a: &SampleRecord, b: &SampleRecord) -> Result<PairCategory> {
    if a.sample_id == b.sample_id {
        return Err(Error::invalid(format!(
            "cannot categorize sample \"{}\" against itself",
            a.sample_id
        )));
    }
    Ok(PairCategory::of(
        a.caller_label == b.caller_label,
        a.calltype_label == b.calltype_label,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CategoryStats {
    pub count: u64,
    /// `None` when the category has no pairs.
    pub mean: Option<f64>,
    /// Population standard deviation.
    pub std: Option<f64>,
}

#[derive(Clone, Copy, Default)]
struct Acc {
    count: u64,
    sum: f64,
    sum_sq: f64,
}

impl Acc {
    fn merge(&mut self, o: &Acc) {
        self.count += o.count;
        self.sum += o.sum;
        self.sum_sq += o.sum_sq;
    }

    fn stats(&self) -> CategoryStats {
        if self.count == 0 {
            return CategoryStats::default();
        }
        let n = self.count as f64;
        let mean = self.sum / n;
        let var = (self.sum_sq / n - mean * mean).max(0.0);
        CategoryStats {
            count: self.count,
            mean: Some(mean),
            std: Some(var.sqrt()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    /// Indexed by [`PairCategory::index`].
    pub categories: [CategoryStats; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceReport {
    pub kind: DistanceKind,
    pub layers: Vec<LayerReport>,
}

impl DistanceReport {
    pub fn to_csv(&self, provenance: &Provenance) -> String {
        let mut out = String::from("layer,category,count,mean,std,distance,seed,config_hash\n");
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let kind = match self.kind {
            DistanceKind::Normalized => "normalized",
            DistanceKind::Raw => "raw",
        };
        for l in &self.layers {
            for c in PairCategory::ALL {
                let s = &l.categories[c.index()];
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    l.layer,
                    c.as_str(),
                    s.count,
                    fmt(s.mean),
                    fmt(s.std),
                    kind,
                    provenance.seed,
                    provenance.config_hash
                );
            }
        }
        out
    }
}

/// Per-layer, per-category distance statistics over all unordered pairs of
/// manifest samples.
pub fn category_means(
    tokens: &TokenFile,
    manifest: &CorpusManifest,
    kind: DistanceKind,
) -> Result<DistanceReport> {
    let mut layer_ids = tokens.layers();
    layer_ids.sort_unstable();
    if layer_ids.is_empty() {
        return Err(Error::invalid("token file has no sequences"));
    }
    let records = &manifest.records;
    let layers = layer_ids
        .into_iter()
        .map(|layer| {
            let by_id: HashMap<&str, &TokenSequence> = tokens
                .layer(layer)
                .into_iter()
                .map(|s| (s.sample_id.as_str(), s))
                .collect();
            let seqs = records
                .iter()
                .map(|r| {
                    by_id.get(r.sample_id.as_str()).copied().ok_or_else(|| {
                        Error::invalid(format!(
                            "no layer-{layer} tokens for sample \"{}\"",
                            r.sample_id
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let rows: Vec<[Acc; 4]> = (0..seqs.len())
                .into_par_iter()
                .map(|i| {
                    let mut acc = [Acc::default(); 4];
                    for j in i + 1..seqs.len() {
                        let c = PairCategory::of(
                            records[i].caller_label == records[j].caller_label,
                            records[i].calltype_label == records[j].calltype_label,
                        );
                        let d = kind.distance(&seqs[i].tokens, &seqs[j].tokens);
                        let a = &mut acc[c.index()];
                        a.count += 1;
                        a.sum += d;
                        a.sum_sq += d * d;
                    }
                    acc
                })
                .collect();
            let mut total = [Acc::default(); 4];
            for row in &rows {
                for (t, r) in total.iter_mut().zip(row) {
                    t.merge(r);
                }
            }
            Ok(LayerReport {
                layer,
                categories: total.map(|a| a.stats()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistanceReport { kind, layers })
}
