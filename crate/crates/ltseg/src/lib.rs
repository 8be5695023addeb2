//! Long-tailed semantic-segmentation loss laboratory.
//!
//! A self-contained CPU stack for studying pixel-wise losses on class
//! imbalanced segmentation: a small f64 tensor engine, eight loss kernels
//! with hand-written analytic gradients, a convolutional reference model,
//! a synthetic shape dataset, segmentation metrics, a deterministic trainer,
//! and an allocation-counting benchmark. The `ltseg` binary exposes all of
//! it as subcommands.

pub mod alloc;
pub mod bench;
pub mod curve;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod ptnsr;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
