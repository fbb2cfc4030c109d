//! Synthetic bag generation and dataset files.

pub mod io;
pub mod synth;

pub use io::{dataset_fingerprint, load_features, save_dataset};
pub use synth::{generate, SynthSpec, SEPARABLE_DEFAULT};

/// Generated datasets carry segments and per-clip key instances.
pub type SynthDataset = crate::mil::Dataset;
