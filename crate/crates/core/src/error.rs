use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum DroError {
    #[error("token id {id} out of range for vocabulary of size {size} (at index {index})")]
    TokenOutOfRange { id: usize, size: usize, index: usize },

    #[error("unknown glyph at byte offset {offset} in {text:?}")]
    UnknownGlyph { text: String, offset: usize },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("context of {len} tokens exceeds the policy window of {max}")]
    ContextTooLong { len: usize, max: usize },

    #[error("trace {trace}: {source}")]
    Trace {
        trace: usize,
        #[source]
        source: Box<DroError>,
    },

    #[error("reflection statistics need at least two traces")]
    TooFewTraces,

    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("argument out of range: {0}")]
    OutOfRange(String),

    #[error("no optimizable tokens in group")]
    NoOptimizableTokens,

    #[error("filter removed all tasks; relax thresholds")]
    EmptyActiveSet,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<DroError>,
    },

    #[error("line {line}: {message}")]
    Record { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl DroError {
    pub fn context(self, context: impl Into<String>) -> Self {
        DroError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, DroError>;
