use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("strategy error: {0}")]
    Strategy(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("magnitude {value} outside [{min}, {max}] for {op}")]
    Range {
        op: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("operation {0} has no magnitude")]
    NoMagnitude(&'static str),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("layer {index}: {message}")]
    Layer { index: usize, message: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
