use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: zero-norm input")]
    ZeroNorm { op: &'static str },
    #[error("index {index} out of range for universe {universe}")]
    IndexOutOfRange { index: usize, universe: usize },
    #[error("{op} requires {required:?} storage, got {actual:?}")]
    StorageOrder {
        op: &'static str,
        required: crate::tensor::StorageOrder,
        actual: crate::tensor::StorageOrder,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("layer {layer} has pending inputs for head {head}; run kv_backfill first")]
    PendingInputs { layer: usize, head: usize },
    #[error(
        "layer {layer} head {head} has no key/value at position {position}; run kv_backfill first"
    )]
    MissingKv {
        layer: usize,
        head: usize,
        position: usize,
    },
    #[error("token id {token} outside vocabulary of {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("no predictor for layer {layer} ({kind})")]
    MissingPredictor { layer: usize, kind: &'static str },
    #[error("fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("nondeterminism detected: {0}")]
    Nondeterminism(String),
    #[error("worker pool: {0}")]
    Pool(String),
    #[error("format: {0}")]
    Format(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
