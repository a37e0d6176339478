//! Core library for a CNN-based daily market direction predictor.
//!
//! The pipeline: engineered feature matrices are windowed into 60x82 samples,
//! a base CNN is grown layer by layer over a pool of markets, and the trained
//! base predictor is adapted to unseen markets by partial or complete
//! fine-tuning. Everything is f64 and deterministic under a fixed seed.
//!
//! Module map:
//! - [`tensor`]: dense row-major arrays and activations
//! - [`layers`]: convolution, max-pooling and dense layers with backprop
//! - [`model`]: architecture assembly, subCNN growth, weight transfer, serialization
//! - [`optim`]: binary cross-entropy, SGD and Adam updates
//! - [`training`]: supervised training, layer-wise growth, fine-tuning, end-to-end driver
//! - [`features`]: the 82 engineered feature columns, labeling, normalization, windowing
//! - [`dataio`]: CSV ingestion, calendar alignment, time-gapped splits
//! - [`eval`]: macro-averaged F-measure, per-instrument reports, best-count tally
//! - [`synth`]: deterministic synthetic market generator for tests and demos

pub mod dataio;
pub mod eval;
pub mod features;
pub mod layers;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod training;

pub use tensor::Tensor;
