//! Distribution-aware coverage-guided testing for feed-forward image
//! classifiers.
//!
//! The engine mutates seed images, tracks neuron coverage (NC / KMNC), scores
//! every generated case with an out-of-distribution detector, and separates
//! the resulting errors into in-distribution and out-of-distribution sets so
//! that retraining on each can be compared.

pub mod corpus;
pub mod coverage;
pub mod error;
pub mod fuzzer;
pub mod model_io;
pub mod mutation;
pub mod nn;
pub mod ood;
pub mod profiler;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model_io::{load_dataset, load_model, save_model, Dataset};
pub use nn::{ActivationTrace, Network};
pub use tensor::Tensor;
