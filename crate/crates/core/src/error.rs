use thiserror::Error;

#[derive(Debug, Error)]
pub enum OmniError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of size {total}")]
    TokenOutOfRange { id: u32, total: u32 },
    #[error("token id {id} is a {found}, expected a {expected}")]
    TokenKind {
        id: u32,
        expected: &'static str,
        found: &'static str,
    },
    #[error("graph error: {0}")]
    Graph(String),
    #[error("scheduling error: {0}")]
    Scheduling(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("training error: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = OmniError> = std::result::Result<T, E>;

impl OmniError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        OmniError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
