//! Offline handwriting line recognition with a deep bidirectional LSTM trained
//! under the CTC objective.
//!
//! The pipeline runs from online ink to text:
//!
//! 1. [`ink`]: cubic Bézier stroke rendering into [`LineImage`]s and synthetic corpora.
//! 2. [`preprocess`]: RLSA-based baseline/slant correction and height normalization.
//! 3. [`features`]: sliding Hann-windowed frames, PCA and standardization.
//! 4. [`net`]: the BLSTM stack, BPTT gradients and momentum SGD training.
//! 5. [`ctc`]: CTC loss/gradients and best-path decoding.
//! 6. [`lm`] and [`wfst`]: Good-Turing/Katz n-gram models compiled into
//!    H∘L∘G / H∘G search graphs for Viterbi beam decoding.
//! 7. [`eval`] and [`experiment`]: CER/WER scoring and the comparison harness.

pub mod binio;
pub mod ctc;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod ink;
pub mod lm;
pub mod net;
pub mod pipeline;
pub mod preprocess;
pub mod textgen;
pub mod wfst;

pub use error::{Error, Result};
pub use features::{FeaturePipeline, FeatureSequence};
pub use ink::{InkLine, InkStroke, LineImage, Point};
pub use net::{DblstmModel, LabelAlphabet, PosteriorSequence, Topology, TrainConfig};
pub use wfst::Wfst;
