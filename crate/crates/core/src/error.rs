use thiserror::Error;

/// Errors surfaced by the lab's operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid digits: {0}")]
    InvalidDigits(String),

    #[error("position {pos} out of range [1, {max}]")]
    PositionOutOfRange { pos: usize, max: usize },

    #[error("operand has {len} digits but format length is {limit}")]
    OperandTooLong { len: usize, limit: usize },

    #[error("sum needs {len} digits but format length is {limit}")]
    SumOverflow { len: usize, limit: usize },

    #[error("rejection budget of {budget} draws exhausted for target complexity {target}")]
    RejectionBudget { budget: u64, target: usize },

    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty supervision mask")]
    EmptyMask,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("vocab mismatch: {0}")]
    VocabMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("trajectory blow-up: |A_{index}| = {value:.3e} exceeds guard")]
    BlowUp { index: usize, value: f64 },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
