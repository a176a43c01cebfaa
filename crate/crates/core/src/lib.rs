//! Discrete tokenization of animal-vocalization embeddings.
//!
//! Frozen encoder embeddings (`L` layers x `N` frames x `D` dims per call)
//! are quantized by a codebook shared across layers, either a classic vector
//! quantizer ([`vq`]) or a Gumbel-softmax quantizer ([`gvq`]). The resulting
//! token sequences are compared with Levenshtein distance ([`seqdist`]) and
//! classified by k-NN against a stats-pooled linear baseline ([`classify`]).
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.
//!
//! ```
//! use calltok::corpus::{generate_synthetic, Corpus, PaddingMode, SynthConfig};
//! use calltok::{tokens, trainer, TrainConfig};
//!
//! let synth = generate_synthetic(&SynthConfig { samples_per_pair: 3, ..Default::default() })?;
//! let corpus = Corpus::from_parts(synth.manifest, synth.tensors, PaddingMode::Unpadded)?;
//! let outcome = trainer::train_quantizer(&corpus, &TrainConfig { max_epochs: 1, ..Default::default() })?;
//! let sequences = tokens::tokenize_corpus(&corpus, &outcome.model, None)?;
//! assert_eq!(sequences.len(), corpus.manifest.records.len() * corpus.layers());
//! # Ok::<(), calltok::Error>(())
//! ```

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod classify;
pub mod corpus;
pub mod error;
pub mod gvq;
pub mod optim;
pub mod scalar;
pub mod seed;
pub mod seqdist;
pub mod tokens;
pub mod trainer;
pub mod vq;

pub use checkpoint::{Checkpoint, QuantizerKind, QuantizerModel};
pub use corpus::{
    Corpus, CorpusManifest, EmbeddingTensor, PaddingMode, SampleRecord, Split, SynthConfig,
};
pub use error::{Error, Result};
pub use gvq::{GvqModel, TemperatureMode, TemperatureSchedule};
pub use optim::{AdamConfig, AdamState};
pub use scalar::Scalar;
pub use seed::Provenance;
pub use seqdist::DistanceKind;
pub use tokens::{Quantizer, TokenFile, TokenSequence};
pub use trainer::{GridSpec, TrainConfig, TrainHistory};
pub use vq::{Codebook, CodebookInit};

pub type Codebook32 = Codebook<f32>;
pub type Codebook64 = Codebook<f64>;
pub type GvqModel32 = GvqModel<f32>;
pub type GvqModel64 = GvqModel<f64>;
pub type EmbeddingTensor32 = EmbeddingTensor<f32>;
pub type EmbeddingTensor64 = EmbeddingTensor<f64>;
pub type Corpus32 = Corpus<f32>;
pub type Checkpoint32 = Checkpoint<f32>;
