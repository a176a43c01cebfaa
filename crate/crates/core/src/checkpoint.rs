//! Quantizer checkpoints: one JSON header line followed by `CEMB` blocks.
//!
//! VQ stores a single `1 x V x D` block (the codebook). GVQ stores `W`
//! (`1 x D x V`), `b` (`1 x 1 x V`) and the output codebook (`1 x V x D`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{decode_cemb_prefix, encode_cemb};
use crate::error::{Error, Result};
use crate::gvq::{GvqModel, TemperatureSchedule};
use crate::scalar::Scalar;
use crate::seed::content_hash;
use crate::tokens::Quantizer;
use crate::vq::Codebook;

const FORMAT: &str = "calltok-checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    Vq,
    Gvq,
}

impl QuantizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantizerKind::Vq => "vq",
            QuantizerKind::Gvq => "gvq",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: QuantizerKind,
    #[serde(rename = "V")]
    vocab_size: usize,
    #[serde(rename = "D")]
    dim: usize,
    config_hash: String,
    seed: u64,
    payloads: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gvq: Option<GvqHeader>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct GvqHeader {
    kl_weight: f64,
    diversity_weight: f64,
    schedule: TemperatureSchedule,
    rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantizerModel<T> {
    Vq(Codebook<T>),
    Gvq(GvqModel<T>),
}

impl<T: Scalar> QuantizerModel<T> {
    pub fn kind(&self) -> QuantizerKind {
        match self {
            QuantizerModel::Vq(_) => QuantizerKind::Vq,
            QuantizerModel::Gvq(_) => QuantizerKind::Gvq,
        }
    }

    pub fn cast<U: Scalar>(&self) -> QuantizerModel<U> {
        let c = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        match self {
            QuantizerModel::Vq(cb) => QuantizerModel::Vq(
                Codebook::new(c(cb.vectors()), cb.vocab_size(), cb.dim()).expect("valid codebook"),
            ),
            QuantizerModel::Gvq(m) => QuantizerModel::Gvq(
                GvqModel::from_parts(
                    m.dim(),
                    m.vocab_size(),
                    c(m.params()),
                    c(m.codebook()),
                    m.kl_weight,
                    m.diversity_weight,
                    m.schedule,
                    m.rng_seed,
                )
                .expect("valid GVQ model"),
            ),
        }
    }
}

impl<T: Scalar> Quantizer<T> for QuantizerModel<T> {
    fn vocab_size(&self) -> usize {
        match self {
            QuantizerModel::Vq(q) => q.vocab_size(),
            QuantizerModel::Gvq(q) => q.vocab_size(),
        }
    }
    fn dim(&self) -> usize {
        match self {
            QuantizerModel::Vq(q) => q.dim(),
            QuantizerModel::Gvq(q) => q.dim(),
        }
    }
    fn token(&self, frame: &[T]) -> Result<usize> {
        match self {
            QuantizerModel::Vq(q) => Quantizer::token(q, frame),
            QuantizerModel::Gvq(q) => Quantizer::token(q, frame),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: QuantizerModel<T>,
    pub config_hash: String,
    pub seed: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let f32s = |v: &[T]| v.iter().map(|x| x.as_f32()).collect::<Vec<f32>>();
        let (v, d, payloads, gvq, blocks) = match &self.model {
            QuantizerModel::Vq(cb) => (
                cb.vocab_size(),
                cb.dim(),
                vec!["codebook".to_string()],
                None,
                vec![([1, cb.vocab_size(), cb.dim()], f32s(cb.vectors()))],
            ),
            QuantizerModel::Gvq(m) => (
                m.vocab_size(),
                m.dim(),
                vec!["weights".into(), "bias".into(), "codebook".into()],
                Some(GvqHeader {
                    kl_weight: m.kl_weight,
                    diversity_weight: m.diversity_weight,
                    schedule: m.schedule,
                    rng_seed: m.rng_seed,
                }),
                vec![
                    ([1, m.dim(), m.vocab_size()], f32s(m.weights())),
                    ([1, 1, m.vocab_size()], f32s(m.bias())),
                    ([1, m.vocab_size(), m.dim()], f32s(m.codebook())),
                ],
            ),
        };
        let header = Header {
            format: FORMAT.into(),
            version: 1,
            kind: self.model.kind(),
            vocab_size: v,
            dim: d,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            payloads,
            gvq,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for (dims, values) in blocks {
            out.extend(encode_cemb(dims, values.into_iter()));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(content_hash(&bytes))
    }
}

impl Checkpoint<f32> {
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "missing checkpoint header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::format(path, format!("checkpoint header: {e}")))?;
        if header.format != FORMAT || header.version != 1 {
            return Err(Error::format(path, "not a version-1 calltok checkpoint"));
        }
        let (v, d) = (header.vocab_size, header.dim);
        let mut rest = &bytes[nl + 1..];
        let mut take = |expected: [usize; 3]| -> Result<Vec<f32>> {
            let (dims, values, used) = decode_cemb_prefix(rest, path)?;
            if dims != expected {
                return Err(Error::format(
                    path,
                    format!("payload shape {dims:?}, expected {expected:?}"),
                ));
            }
            rest = &rest[used..];
            Ok(values)
        };
        let model = match header.kind {
            QuantizerKind::Vq => QuantizerModel::Vq(Codebook::new(take([1, v, d])?, v, d)?),
            QuantizerKind::Gvq => {
                let g = header
                    .gvq
                    .clone()
                    .ok_or_else(|| Error::format(path, "GVQ checkpoint without gvq header"))?;
                let mut params = take([1, d, v])?;
                params.extend(take([1, 1, v])?);
                let codebook = take([1, v, d])?;
                QuantizerModel::Gvq(GvqModel::from_parts(
                    d,
                    v,
                    params,
                    codebook,
                    g.kl_weight,
                    g.diversity_weight,
                    g.schedule,
                    g.rng_seed,
                )?)
            }
        };
        if !rest.is_empty() {
            return Err(Error::format(
                path,
                "trailing bytes after checkpoint payloads",
            ));
        }
        Ok(Self {
            model,
            config_hash: header.config_hash,
            seed: header.seed,
        })
    }

    /// Load a checkpoint, returning it with the hex SHA-256 of the file.
    pub fn read(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes, path)?, content_hash(&bytes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vq_round_trip() {
        let cb = Codebook::new(vec![0.5f32, 1.0, -2.0, 3.25, 0.0, 1e-3], 3, 2).unwrap();
        let ck = Checkpoint {
            model: QuantizerModel::Vq(cb),
            config_hash: "h".into(),
            seed: 9,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("c")).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn gvq_round_trip() {
        let m: GvqModel<f32> =
            GvqModel::new(4, 5, 1.5, 0.2, TemperatureSchedule::constant(), 3).unwrap();
        let ck = Checkpoint {
            model: QuantizerModel::Gvq(m),
            config_hash: "h".into(),
            seed: 1,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("c")).unwrap();
        assert_eq!(back, ck);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2], Path::new("c")).is_err());
    }
}
