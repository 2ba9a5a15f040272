use thiserror::Error;

/// Errors raised by the compression toolchain.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },

    #[error("backward pass requested but the forward pass kept no cache")]
    MissingForwardCache,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{granularity} granularity is undefined for {kind} layer {layer}")]
    Granularity {
        layer: usize,
        kind: &'static str,
        granularity: &'static str,
    },

    #[error("quantization level set is empty")]
    EmptyLevels,

    #[error("ADMM round {round} failed: {source}")]
    AdmmRound {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("weight {value} at layer {layer}, index {index} is not an admissible level")]
    Unquantized { layer: usize, index: usize, value: f64 },

    #[error("class count mismatch: student has {student}, teacher has {teacher}")]
    ClassMismatch { student: usize, teacher: usize },

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("missing unit cost entry `{0}`")]
    MissingUnitCost(String),

    #[error("input vector has length {got}, tile uses {expected} rows")]
    InputLength { expected: usize, got: usize },

    #[error("layer {layer} ({kind}) has no weight matrix")]
    UnsupportedLayer { layer: usize, kind: &'static str },

    #[error("dataset: {0}")]
    Dataset(String),
}

pub type Result<T> = std::result::Result<T, Error>;
