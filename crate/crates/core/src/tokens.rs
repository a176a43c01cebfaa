//! Token sequence generation, padding trim and the JSON-lines token file.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusManifest, EmbeddingTensor};
use crate::error::{Error, Result};
use crate::gvq::GvqModel;
use crate::scalar::Scalar;
use crate::vq::Codebook;

/// Anything that maps one frame to a token index.
pub trait Quantizer<T: Scalar>: Sync {
    fn vocab_size(&self) -> usize;
    fn dim(&self) -> usize;
    fn token(&self, frame: &[T]) -> Result<usize>;
}

impl<T: Scalar> Quantizer<T> for Codebook<T> {
    fn vocab_size(&self) -> usize {
        Codebook::vocab_size(self)
    }
    fn dim(&self) -> usize {
        Codebook::dim(self)
    }
    fn token(&self, frame: &[T]) -> Result<usize> {
        self.quantize_frame(frame).map(|(t, _)| t)
    }
}

impl<T: Scalar> Quantizer<T> for GvqModel<T> {
    fn vocab_size(&self) -> usize {
        GvqModel::vocab_size(self)
    }
    fn dim(&self) -> usize {
        GvqModel::dim(self)
    }
    fn token(&self, frame: &[T]) -> Result<usize> {
        self.infer_token(frame)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub sample_id: String,
    pub layer: usize,
    pub tokens: Vec<u16>,
    pub effective_length: usize,
}

/// One sequence per layer, frame order preserved.
pub fn tokenize_sample<T: Scalar, Q: Quantizer<T> + ?Sized>(
    sample_id: &str,
    embeddings: &EmbeddingTensor<T>,
    quantizer: &Q,
) -> Result<Vec<TokenSequence>> {
    if embeddings.dim() != quantizer.dim() {
        return Err(Error::Dimension {
            expected: quantizer.dim(),
            found: embeddings.dim(),
        });
    }
    if quantizer.vocab_size() > u16::MAX as usize + 1 {
        return Err(Error::invalid("vocabulary does not fit 16-bit tokens"));
    }
    (0..embeddings.layers())
        .map(|layer| {
            let tokens = (0..embeddings.frames())
                .map(|n| {
                    quantizer
                        .token(embeddings.frame(layer, n))
                        .map(|t| t as u16)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TokenSequence {
                sample_id: sample_id.to_string(),
                layer,
                effective_length: tokens.len(),
                tokens,
            })
        })
        .collect()
}

/// Tokenize every sample of a corpus (in manifest order), trimmed to each
/// sample's effective frame count. `layers` selects a subset, `None` = all.
pub fn tokenize_corpus<T: Scalar, Q: Quantizer<T> + ?Sized>(
    corpus: &Corpus<T>,
    quantizer: &Q,
    layers: Option<&[usize]>,
) -> Result<Vec<TokenSequence>> {
    if let Some(sel) = layers {
        if let Some(&l) = sel.iter().find(|&&l| l >= corpus.layers()) {
            return Err(Error::invalid(format!(
                "layer {l} outside [0, {})",
                corpus.layers()
            )));
        }
    }
    let per_sample = corpus
        .samples
        .par_iter()
        .map(|s| {
            let seqs = tokenize_sample(&s.record.sample_id, &s.tensor, quantizer)?;
            seqs.into_iter()
                .filter(|q| layers.is_none_or(|sel| sel.contains(&q.layer)))
                .map(|q| {
                    let eff = s.effective_frames.min(q.tokens.len());
                    trim(&q, eff)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

/// Non-padding frame count of a sample from a repeat-padded batch.
///
/// The batch downsampling factor is `longest_raw / padded_frames`; the sample
/// keeps `round(raw_length / factor)` frames (ties to even), clamped to
/// `[1, padded_frames]`.
pub fn effective_frames(
    raw_length: u64,
    longest_raw_in_batch: u64,
    padded_frame_count: usize,
) -> Result<usize> {
    if raw_length == 0 || longest_raw_in_batch == 0 || padded_frame_count == 0 {
        return Err(Error::invalid("effective_frames inputs must be positive"));
    }
    if raw_length > longest_raw_in_batch {
        return Err(Error::invalid(format!(
            "raw length {raw_length} exceeds batch maximum {longest_raw_in_batch}"
        )));
    }
    // raw / (longest / padded) == raw * padded / longest, exact for realistic sizes.
    let frames = (raw_length as f64 * padded_frame_count as f64) / longest_raw_in_batch as f64;
    let rounded = frames.round_ties_even() as usize;
    Ok(rounded.clamp(1, padded_frame_count))
}

/// Keep the first `effective` tokens.
pub fn trim(sequence: &TokenSequence, effective: usize) -> Result<TokenSequence> {
    if effective == 0 || effective > sequence.tokens.len() {
        return Err(Error::invalid(format!(
            "trim length {effective} outside [1, {}]",
            sequence.tokens.len()
        )));
    }
    Ok(TokenSequence {
        sample_id: sequence.sample_id.clone(),
        layer: sequence.layer,
        tokens: sequence.tokens[..effective].to_vec(),
        effective_length: effective,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenHeader {
    #[serde(rename = "V")]
    pub vocab_size: usize,
    #[serde(rename = "L")]
    pub num_layers: usize,
    pub layers: Vec<usize>,
    pub checkpoint_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TokenLine {
    sample_id: String,
    layer: usize,
    tokens: Vec<u16>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenFile {
    pub header: Option<TokenHeader>,
    pub sequences: Vec<TokenSequence>,
}

impl TokenFile {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        if let Some(h) = &self.header {
            out.push_str(&serde_json::to_string(h).expect("header serializes"));
            out.push('\n');
        }
        for s in &self.sequences {
            let line = TokenLine {
                sample_id: s.sample_id.clone(),
                layer: s.layer,
                tokens: s.tokens.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut file = TokenFile::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| Error::format(path, format!("line {lineno}: {m}"));
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            if value.get("V").is_some() {
                if file.header.is_some() || !file.sequences.is_empty() {
                    return Err(bad("header must be the first line".into()));
                }
                file.header = Some(serde_json::from_value(value).map_err(|e| bad(e.to_string()))?);
                continue;
            }
            let rec: TokenLine = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            if let Some(h) = &file.header {
                if let Some(&t) = rec.tokens.iter().find(|&&t| t as usize >= h.vocab_size) {
                    return Err(bad(format!(
                        "token {t} >= vocabulary size {}",
                        h.vocab_size
                    )));
                }
                if rec.layer >= h.num_layers {
                    return Err(bad(format!("layer {} >= L = {}", rec.layer, h.num_layers)));
                }
            }
            file.sequences.push(TokenSequence {
                sample_id: rec.sample_id,
                layer: rec.layer,
                effective_length: rec.tokens.len(),
                tokens: rec.tokens,
            });
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Distinct layers in order of first appearance.
    pub fn layers(&self) -> Vec<usize> {
        let mut seen = Vec::new();
        for s in &self.sequences {
            if !seen.contains(&s.layer) {
                seen.push(s.layer);
            }
        }
        seen
    }

    /// Sequences of one layer, in file order.
    pub fn layer(&self, layer: usize) -> Vec<&TokenSequence> {
        self.sequences.iter().filter(|s| s.layer == layer).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderingReport {
    pub passed: bool,
    pub checked: usize,
    pub failure: Option<String>,
}

impl fmt::Display for OrderingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            None => write!(f, "ordering: pass ({} samples)", self.checked),
            Some(m) => write!(f, "ordering: fail: {m}"),
        }
    }
}

/// Check that the token file lists samples exactly in manifest order.
pub fn verify_ordering(manifest: &CorpusManifest, tokens: &TokenFile) -> OrderingReport {
    let mut order: Vec<&str> = Vec::new();
    for s in &tokens.sequences {
        if order.last() != Some(&s.sample_id.as_str()) {
            order.push(&s.sample_id);
        }
    }
    let fail = |m: String| OrderingReport {
        passed: false,
        checked: manifest.records.len(),
        failure: Some(m),
    };
    let mut seen = HashSet::new();
    for id in &order {
        if !seen.insert(*id) {
            return fail(format!("sample \"{id}\" appears in non-contiguous blocks"));
        }
    }
    let present: HashSet<&str> = order.iter().copied().collect();
    for (i, rec) in manifest.records.iter().enumerate() {
        let expected = rec.sample_id.as_str();
        match order.get(i) {
            Some(&found) if found == expected => {}
            _ if !present.contains(expected) => {
                return fail(format!("index {i}: missing sample \"{expected}\""));
            }
            Some(&found) => {
                return fail(format!(
                    "index {i}: expected \"{expected}\", found \"{found}\""
                ));
            }
            None => unreachable!("present sample must have a position"),
        }
    }
    if order.len() > manifest.records.len() {
        return fail(format!(
            "index {}: unexpected sample \"{}\" not in manifest",
            manifest.records.len(),
            order[manifest.records.len()]
        ));
    }
    OrderingReport {
        passed: true,
        checked: manifest.records.len(),
        failure: None,
    }
}
