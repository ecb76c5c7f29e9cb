//! End-to-end convolutional classifiers for 1-second, 8 kHz raw audio.
//!
//! The pipeline runs from WAV ingestion ([`audio`]) through manifests and
//! task definitions ([`dataset`]) to the two network variants ([`nn`]),
//! their optimizer ([`optim`]) and the training/evaluation loop
//! ([`trainer`]). [`synth`] generates labeled corpora with known structure
//! so that every stage can be exercised without private recordings.

pub mod audio;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use nn::{HeadKind, LayerSpec, Model, ModelConfig, Variant};
pub use tensor::{Scalar, Tensor};
