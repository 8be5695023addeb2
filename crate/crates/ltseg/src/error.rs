use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, losses, the model, dataset I/O, and training.
#[derive(Debug)]
pub enum Error {
    /// A constructor received data whose length does not match the shape.
    DataLength { expected: usize, got: usize },
    /// Two tensors that must agree in shape do not.
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    /// A tensor had the wrong rank or dimension for the requested op.
    BadShape { expected: String, got: Vec<usize> },
    /// A non-finite value was found where finite input is required.
    NonFinite {
        what: &'static str,
        index: usize,
        coords: Vec<usize>,
        value: f64,
    },
    /// A class id was out of range.
    ClassOutOfRange { id: usize, num_classes: usize, position: usize },
    /// A mask column was not one-hot.
    NotOneHot { batch: usize, row: usize, col: usize },
    /// A hyperparameter failed validation.
    BadHyper { name: &'static str, reason: String },
    /// A class never occurs in the training split, so frequency-based
    /// weighting is undefined for it.
    ClassAbsent { class: usize },
    /// PTNSR container parse failure.
    Ptnsr { reason: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// JSON (de)serialization failure for configs and manifests.
    Json(String),
    /// Synthetic-shape request cannot fit in the image.
    InfeasibleShape { class: usize, area: usize, height: usize, width: usize },
    /// A dataset split was empty or missing.
    EmptySplit { split: String },
    /// Gradient blew up to a non-finite value in the named layer.
    NonFiniteGradient { layer: usize },
    /// Loss became non-finite during training.
    NonFiniteLoss { step: usize, kind: String },
    /// Model checkpoint does not match the expected layer shapes.
    CheckpointMismatch { reason: String },
    /// A backward pass was given a cache from an older forward pass.
    StaleCache { cache_version: u64, net_version: u64 },
    /// Config validation failure.
    BadConfig { reason: String },
    /// The single-threaded benchmark was entered twice.
    BenchBusy,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            Error::ShapeMismatch { left, right } => {
                write!(f, "shape mismatch: {left:?} vs {right:?}")
            }
            Error::BadShape { expected, got } => {
                write!(f, "expected shape {expected}, got {got:?}")
            }
            Error::NonFinite { what, index, coords, value } => {
                write!(f, "non-finite {what} {value} at flat index {index} (coords {coords:?})")
            }
            Error::ClassOutOfRange { id, num_classes, position } => {
                write!(f, "class id {id} >= {num_classes} at pixel {position}")
            }
            Error::NotOneHot { batch, row, col } => {
                write!(f, "mask column at (b={batch}, h={row}, w={col}) is not one-hot")
            }
            Error::BadHyper { name, reason } => write!(f, "invalid {name}: {reason}"),
            Error::ClassAbsent { class } => {
                write!(f, "class {class} absent from training split")
            }
            Error::Ptnsr { reason } => write!(f, "PTNSR: {reason}"),
            Error::Io(e) => write!(f, "io: {e}"),
            Error::Json(e) => write!(f, "json: {e}"),
            Error::InfeasibleShape { class, area, height, width } => {
                write!(f, "shape for class {class} needs {area} px, larger than the {height}x{width} image")
            }
            Error::EmptySplit { split } => write!(f, "split '{split}' is empty"),
            Error::NonFiniteGradient { layer } => {
                write!(f, "non-finite gradient in layer {layer}")
            }
            Error::NonFiniteLoss { step, kind } => {
                write!(f, "loss {kind} became non-finite at step {step}")
            }
            Error::CheckpointMismatch { reason } => write!(f, "checkpoint mismatch: {reason}"),
            Error::StaleCache { cache_version, net_version } => {
                write!(f, "forward cache from net version {cache_version}, net is at {net_version}")
            }
            Error::BadConfig { reason } => write!(f, "bad config: {reason}"),
            Error::BenchBusy => write!(f, "benchmark already running; bench is single-threaded"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
