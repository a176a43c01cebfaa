//! Data model, on-disk formats and the synthetic corpus generator.
//!
//! A corpus is a JSON manifest plus one `CEMB` embedding file per sample.
//! `CEMB` layout (all little-endian): magic `b"CEMB"`, `u32` version (1),
//! `u32` L, `u32` N, `u32` D, then `L*N*D` IEEE-754 `f32` values in
//! layer-major, frame, dim order.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;
use crate::tokens::effective_frames;

pub const CEMB_MAGIC: &[u8; 4] = b"CEMB";
pub const CEMB_VERSION: u32 = 1;
const CEMB_HEADER_LEN: usize = 20;

/// Audio samples per encoder frame assumed by the synthetic generator
/// (20 ms hop at 16 kHz).
pub const SAMPLES_PER_FRAME: u64 = 320;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub embedding_path: String,
    pub raw_length: u64,
    pub calltype_label: usize,
    pub caller_label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub dataset_name: String,
    pub n_calltype: usize,
    pub n_caller: usize,
    pub records: Vec<SampleRecord>,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_calltype == 0 {
            return Err(Error::Manifest("n_calltype must be positive".into()));
        }
        if self.n_caller == 0 {
            return Err(Error::Manifest("n_caller must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for (index, rec) in self.records.iter().enumerate() {
            let fail = |message: String| Err(Error::Record { index, message });
            if rec.sample_id.is_empty() {
                return fail("sample_id must be non-empty".into());
            }
            if !seen.insert(rec.sample_id.as_str()) {
                return fail(format!("duplicate sample_id \"{}\"", rec.sample_id));
            }
            if rec.raw_length == 0 {
                return fail("raw_length must be positive".into());
            }
            if rec.calltype_label >= self.n_calltype {
                return fail(format!(
                    "calltype_label {} outside [0, {})",
                    rec.calltype_label, self.n_calltype
                ));
            }
            if rec.caller_label >= self.n_caller {
                return fail(format!(
                    "caller_label {} outside [0, {})",
                    rec.caller_label, self.n_caller
                ));
            }
        }
        for split in Split::ALL {
            if !self.records.iter().any(|r| r.split == split) {
                return Err(Error::Manifest(format!(
                    "split \"{}\" is empty",
                    split.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Read and validate a manifest. Record order is preserved as on disk.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text).map_err(|e| match e {
        Error::Json(j) => Error::format(path, j.to_string()),
        other => other,
    })
}

pub fn parse_manifest(text: &str) -> Result<CorpusManifest> {
    #[derive(Deserialize)]
    struct Raw {
        dataset_name: String,
        n_calltype: usize,
        n_caller: usize,
        records: Vec<serde_json::Value>,
    }
    let raw: Raw = serde_json::from_str(text)?;
    let records = raw
        .records
        .into_iter()
        .enumerate()
        .map(|(index, v)| {
            serde_json::from_value::<SampleRecord>(v).map_err(|e| Error::Record {
                index,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest {
        dataset_name: raw.dataset_name,
        n_calltype: raw.n_calltype,
        n_caller: raw.n_caller,
        records,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Frame embeddings of one sample, `layers x frames x dim`, layer-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTensor<T = f32> {
    layers: usize,
    frames: usize,
    dim: usize,
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingTensor<T> {
    pub fn new(layers: usize, frames: usize, dim: usize, values: Vec<T>) -> Result<Self> {
        if layers == 0 || frames == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got ({layers}, {frames}, {dim})"
            )));
        }
        let expected = layers * frames * dim;
        if values.len() != expected {
            return Err(Error::Dimension {
                expected,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tensor value at flat index {i} (layer {}, frame {}, dim {})",
                i / (frames * dim),
                (i / dim) % frames,
                i % dim
            )));
        }
        Ok(Self {
            layers,
            frames,
            dim,
            values,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn frame(&self, layer: usize, frame: usize) -> &[T] {
        let start = (layer * self.frames + frame) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// All frames of one layer as a contiguous `frames x dim` block.
    pub fn layer(&self, layer: usize) -> &[T] {
        let n = self.frames * self.dim;
        &self.values[layer * n..(layer + 1) * n]
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingTensor<U> {
        EmbeddingTensor {
            layers: self.layers,
            frames: self.frames,
            dim: self.dim,
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn to_cemb_bytes(&self) -> Vec<u8> {
        encode_cemb(
            [self.layers, self.frames, self.dim],
            self.values.iter().map(|v| v.as_f32()),
        )
    }
}

impl EmbeddingTensor<f32> {
    pub fn from_cemb_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let ([l, n, d], values) = decode_cemb(bytes, path)?;
        Self::new(l, n, d, values).map_err(|e| match e {
            Error::NonFinite(m) => Error::format(path, format!("non-finite payload: {m}")),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_cemb_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_cemb_bytes(&bytes, path)
    }
}

pub(crate) fn encode_cemb(dims: [usize; 3], values: impl Iterator<Item = f32>) -> Vec<u8> {
    let count = dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(CEMB_HEADER_LEN + 4 * count);
    out.extend_from_slice(CEMB_MAGIC);
    out.extend_from_slice(&CEMB_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode one CEMB block; the byte slice must hold exactly one block.
pub(crate) fn decode_cemb(bytes: &[u8], path: &Path) -> Result<([usize; 3], Vec<f32>)> {
    let (dims, values, used) = decode_cemb_prefix(bytes, path)?;
    if used != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", bytes.len() - used),
        ));
    }
    Ok((dims, values))
}

/// Decode a CEMB block at the start of `bytes`, returning the consumed length.
pub(crate) fn decode_cemb_prefix(
    bytes: &[u8],
    path: &Path,
) -> Result<([usize; 3], Vec<f32>, usize)> {
    if bytes.len() < CEMB_HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != CEMB_MAGIC {
        return Err(Error::format(path, "bad magic (expected \"CEMB\")"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != CEMB_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let dims = [word(8) as usize, word(12) as usize, word(16) as usize];
    let count = dims.iter().product::<usize>();
    let needed = CEMB_HEADER_LEN + 4 * count;
    if bytes.len() < needed {
        return Err(Error::format(
            path,
            format!(
                "truncated payload: expected {} bytes, found {}",
                4 * count,
                bytes.len() - CEMB_HEADER_LEN
            ),
        ));
    }
    let values = bytes[CEMB_HEADER_LEN..needed]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, values, needed))
}

pub fn load_embeddings(record: &SampleRecord, root: &Path) -> Result<EmbeddingTensor<f32>> {
    EmbeddingTensor::read(&root.join(&record.embedding_path))
}

/// How embedding files relate to the true duration of each sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PaddingMode {
    /// Every stored frame is real signal.
    #[default]
    Unpadded,
    /// Files were extracted in consecutive manifest-order batches of
    /// `batch_size`, each repeat-padded to the longest member.
    Batched { batch_size: usize },
}

/// Number of non-padding frames per record, in manifest order.
pub fn effective_lengths<T: Scalar>(
    records: &[SampleRecord],
    tensors: &[EmbeddingTensor<T>],
    padding: PaddingMode,
) -> Result<Vec<usize>> {
    match padding {
        PaddingMode::Unpadded => Ok(tensors.iter().map(|t| t.frames()).collect()),
        PaddingMode::Batched { batch_size } => {
            if batch_size == 0 {
                return Err(Error::invalid("padding batch_size must be positive"));
            }
            let mut out = Vec::with_capacity(records.len());
            for (recs, tens) in records.chunks(batch_size).zip(tensors.chunks(batch_size)) {
                let longest = recs.iter().map(|r| r.raw_length).max().unwrap_or(1);
                let padded = tens.iter().map(|t| t.frames()).max().unwrap_or(1);
                for (r, t) in recs.iter().zip(tens) {
                    let eff = effective_frames(r.raw_length, longest, padded)?;
                    out.push(eff.min(t.frames()));
                }
            }
            Ok(out)
        }
    }
}

pub struct Sample<T> {
    pub record: SampleRecord,
    pub tensor: EmbeddingTensor<T>,
    pub effective_frames: usize,
}

/// A manifest with all embeddings resident in memory.
pub struct Corpus<T = f32> {
    pub manifest: CorpusManifest,
    pub samples: Vec<Sample<T>>,
    layers: usize,
    dim: usize,
}

impl<T: Scalar> Corpus<T> {
    pub fn from_parts(
        manifest: CorpusManifest,
        tensors: Vec<EmbeddingTensor<T>>,
        padding: PaddingMode,
    ) -> Result<Self> {
        manifest.validate()?;
        if tensors.len() != manifest.records.len() {
            return Err(Error::Manifest(format!(
                "{} records but {} tensors",
                manifest.records.len(),
                tensors.len()
            )));
        }
        let layers = tensors[0].layers();
        let dim = tensors[0].dim();
        for (index, t) in tensors.iter().enumerate() {
            if t.dim() != dim || t.layers() != layers {
                return Err(Error::Record {
                    index,
                    message: format!(
                        "embedding shape (L={}, D={}) differs from corpus (L={layers}, D={dim})",
                        t.layers(),
                        t.dim()
                    ),
                });
            }
        }
        let eff = effective_lengths(&manifest.records, &tensors, padding)?;
        let samples = manifest
            .records
            .iter()
            .cloned()
            .zip(tensors)
            .zip(eff)
            .map(|((record, tensor), effective_frames)| Sample {
                record,
                tensor,
                effective_frames,
            })
            .collect();
        Ok(Self {
            manifest,
            samples,
            layers,
            dim,
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest.split_indices(split)
    }
}

impl Corpus<f32> {
    pub fn load(root: &Path, manifest_path: &Path, padding: PaddingMode) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let tensors = manifest
            .records
            .par_iter()
            .map(|r| load_embeddings(r, root))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, tensors, padding)
    }
}

fn default_dataset_name() -> String {
    "synthetic".into()
}
fn default_unit_scale() -> f64 {
    1.0
}
fn default_layer_perturbation() -> f64 {
    0.1
}
fn default_split_fractions() -> [f64; 2] {
    [0.6, 0.2]
}

/// Parameters of the synthetic corpus generator.
///
/// Each call-type owns a fixed ordered template of unit centers (and unit
/// durations); each caller owns a fixed offset vector. A sample realizes its
/// call-type template shifted by its caller's offset plus Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    #[serde(default = "default_dataset_name")]
    pub dataset_name: String,
    pub n_calltype: usize,
    pub n_caller: usize,
    pub samples_per_pair: usize,
    /// Inclusive range for the number of units in a call-type template.
    pub units_per_call: [usize; 2],
    /// Inclusive range for the number of frames per unit.
    pub frames_per_unit: [usize; 2],
    pub layers: usize,
    pub dim: usize,
    #[serde(default = "default_unit_scale")]
    pub unit_scale: f64,
    pub caller_offset_scale: f64,
    pub noise_scale: f64,
    #[serde(default = "default_layer_perturbation")]
    pub layer_perturbation: f64,
    /// Train and val fractions within every (call-type, caller) pair; the
    /// remainder goes to test.
    #[serde(default = "default_split_fractions")]
    pub split_fractions: [f64; 2],
    /// When set, files are repeat-padded in manifest-order batches of this size.
    #[serde(default)]
    pub extraction_batch: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dataset_name: default_dataset_name(),
            n_calltype: 4,
            n_caller: 4,
            samples_per_pair: 50,
            units_per_call: [3, 5],
            frames_per_unit: [4, 10],
            layers: 3,
            dim: 16,
            unit_scale: default_unit_scale(),
            caller_offset_scale: 0.5,
            noise_scale: 0.3,
            layer_perturbation: default_layer_perturbation(),
            split_fractions: default_split_fractions(),
            extraction_batch: None,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_calltype", self.n_calltype),
            ("n_caller", self.n_caller),
            ("samples_per_pair", self.samples_per_pair),
            ("layers", self.layers),
            ("dim", self.dim),
            ("units_per_call min", self.units_per_call[0]),
            ("frames_per_unit min", self.frames_per_unit[0]),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, r) in [
            ("units_per_call", self.units_per_call),
            ("frames_per_unit", self.frames_per_unit),
        ] {
            if r[0] > r[1] {
                return Err(Error::invalid(format!(
                    "{name} range [{}, {}] is empty",
                    r[0], r[1]
                )));
            }
        }
        for (name, v) in [
            ("unit_scale", self.unit_scale),
            ("caller_offset_scale", self.caller_offset_scale),
            ("noise_scale", self.noise_scale),
            ("layer_perturbation", self.layer_perturbation),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        let [tr, va] = self.split_fractions;
        if !(tr > 0.0 && va > 0.0 && tr + va < 1.0) {
            return Err(Error::invalid(
                "split_fractions must be positive and sum below 1",
            ));
        }
        if self.samples_per_pair < 3 {
            return Err(Error::invalid(
                "samples_per_pair must be >= 3 to fill every split",
            ));
        }
        if self.extraction_batch == Some(0) {
            return Err(Error::invalid("extraction_batch must be positive"));
        }
        Ok(())
    }
}

pub struct SyntheticCorpus {
    pub manifest: CorpusManifest,
    pub tensors: Vec<EmbeddingTensor<f32>>,
}

impl SyntheticCorpus {
    /// Write manifest (as `manifest.json`) and embedding files under `root`.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        for (rec, t) in self.manifest.records.iter().zip(&self.tensors) {
            let path = root.join(&rec.embedding_path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            t.write(&path)?;
        }
        let manifest_path = root.join("manifest.json");
        self.manifest.save(&manifest_path)?;
        Ok(manifest_path)
    }
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

struct Unit {
    center: Vec<f64>,
    frames: usize,
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let d = config.dim;
    let seed = config.seed;

    let mut rng = rng_for(seed, "synth/templates");
    let templates: Vec<Vec<Unit>> = (0..config.n_calltype)
        .map(|_| {
            let n_units = rng.random_range(config.units_per_call[0]..=config.units_per_call[1]);
            (0..n_units)
                .map(|_| Unit {
                    center: gaussian_vec(&mut rng, d, config.unit_scale),
                    frames: rng.random_range(config.frames_per_unit[0]..=config.frames_per_unit[1]),
                })
                .collect()
        })
        .collect();

    let mut rng = rng_for(seed, "synth/callers");
    let caller_offsets: Vec<Vec<f64>> = (0..config.n_caller)
        .map(|_| gaussian_vec(&mut rng, d, config.caller_offset_scale))
        .collect();

    let mut rng = rng_for(seed, "synth/layers");
    let layer_offsets: Vec<Vec<f64>> = (0..config.layers)
        .map(|_| gaussian_vec(&mut rng, d, config.layer_perturbation * config.unit_scale))
        .collect();

    // (calltype, caller, split) per sample; splits assigned within each pair.
    let mut rng = rng_for(seed, "synth/splits");
    let n = config.samples_per_pair;
    let n_train = ((config.split_fractions[0] * n as f64).round() as usize).clamp(1, n - 2);
    let n_val = ((config.split_fractions[1] * n as f64).round() as usize).clamp(1, n - 1 - n_train);
    let mut plan = Vec::with_capacity(config.n_calltype * config.n_caller * n);
    for ct in 0..config.n_calltype {
        for cl in 0..config.n_caller {
            let mut splits: Vec<Split> = (0..n)
                .map(|i| {
                    if i < n_train {
                        Split::Train
                    } else if i < n_train + n_val {
                        Split::Val
                    } else {
                        Split::Test
                    }
                })
                .collect();
            splits.shuffle(&mut rng);
            plan.extend(splits.into_iter().map(|s| (ct, cl, s)));
        }
    }
    plan.shuffle(&mut rng);

    let mut records = Vec::with_capacity(plan.len());
    let mut tensors = Vec::with_capacity(plan.len());
    for (index, &(ct, cl, split)) in plan.iter().enumerate() {
        let mut rng = rng_for(seed, &format!("synth/sample/{index}"));
        let template = &templates[ct];
        let frames: usize = template.iter().map(|u| u.frames).sum();
        let mut base = Vec::with_capacity(frames * d);
        for unit in template {
            for _ in 0..unit.frames {
                for k in 0..d {
                    let noise = config.noise_scale * rng.sample::<f64, _>(StandardNormal);
                    base.push(unit.center[k] + caller_offsets[cl][k] + noise);
                }
            }
        }
        let mut values = Vec::with_capacity(config.layers * frames * d);
        for (l, offset) in layer_offsets.iter().enumerate() {
            let extra = config.noise_scale * 0.25 * l as f64;
            for (j, &b) in base.iter().enumerate() {
                let jitter = if extra > 0.0 {
                    extra * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                values.push((b + offset[j % d] + jitter) as f32);
            }
        }
        let id = format!("syn-{index:05}");
        records.push(SampleRecord {
            embedding_path: format!("emb/{id}.cemb"),
            sample_id: id,
            raw_length: frames as u64 * SAMPLES_PER_FRAME,
            calltype_label: ct,
            caller_label: cl,
            split,
        });
        tensors.push(EmbeddingTensor::new(config.layers, frames, d, values)?);
    }

    if let Some(batch) = config.extraction_batch {
        for chunk in tensors.chunks_mut(batch) {
            let longest = chunk.iter().map(|t| t.frames()).max().unwrap_or(1);
            for t in chunk.iter_mut() {
                *t = repeat_pad(t, longest);
            }
        }
    }

    let manifest = CorpusManifest {
        dataset_name: config.dataset_name.clone(),
        n_calltype: config.n_calltype,
        n_caller: config.n_caller,
        records,
    };
    manifest.validate()?;
    Ok(SyntheticCorpus { manifest, tensors })
}

/// Repeat frames cyclically until `frames` are present in every layer.
fn repeat_pad(t: &EmbeddingTensor<f32>, frames: usize) -> EmbeddingTensor<f32> {
    if t.frames() == frames {
        return t.clone();
    }
    let mut values = Vec::with_capacity(t.layers() * frames * t.dim());
    for l in 0..t.layers() {
        for n in 0..frames {
            values.extend_from_slice(t.frame(l, n % t.frames()));
        }
    }
    EmbeddingTensor {
        layers: t.layers(),
        frames,
        dim: t.dim(),
        values,
    }
}
