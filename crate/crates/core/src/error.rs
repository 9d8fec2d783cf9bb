use thiserror::Error;

/// Errors raised by the codec, channel and adaptation layers.
#[derive(Debug, Error)]
pub enum AscError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("allocation error: {0}")]
    Allocation(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("internal consistency error: {0}")]
    Consistency(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl AscError {
    /// Process exit code used by the command line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            AscError::Config(_) => 2,
            AscError::Consistency(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, AscError>;
