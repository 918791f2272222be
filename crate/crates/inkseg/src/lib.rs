//! Character segmentation for on-line handwriting.
//!
//! Assigns each sampling point of a stylus trajectory to a character of a
//! known transcription, comparing four methods: weighted k-means clustering,
//! character-boundary prediction with a bidirectional recurrent or
//! self-attention backbone, and an encoder–decoder transformer whose decoder
//! queries are the transcription's characters.
//!
//! Supporting machinery: a small float64 reverse-mode autodiff tensor, an
//! AdamW + warmup/inverse-square-root training loop with EMA weights, a
//! synthetic handwriting generator with exact labels, an iterative
//! ground-truth approximation driven by a pluggable likelihood scorer, mIoU
//! evaluation, InkML/JSON-lines ingestion, and SVG rendering.
//!
//! See the crate `examples/` directory for one runnable example per
//! capability, or the `inkseg` binary for the file-based pipeline.

pub mod boundary;
pub mod charquery;
pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod groundtruth;
pub mod ink;
pub mod inkml;
pub mod jsonl;
pub mod kmeans;
pub mod nn;
pub mod svg;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use ink::{Ink, LabeledSample, Point, Segmentation, Stroke, Transcription};
