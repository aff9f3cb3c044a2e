use thiserror::Error;

pub type Result<T> = std::result::Result<T, CrlError>;

#[derive(Debug, Error)]
pub enum CrlError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("KL divergence undefined: q[{index}] == 0 while p[{index}] > 0")]
    DivergenceUndefined { index: usize },

    #[error("training diverged: non-finite values in {tensor}")]
    Divergence { tensor: String },

    #[error("non-finite loss at step {step}, batch {batch} ({method})")]
    NonFiniteLoss {
        step: usize,
        batch: usize,
        method: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("benchmark too small: {0}")]
    BenchmarkTooSmall(String),

    #[error("corrupt data: {0}")]
    Corruption(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CrlError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        CrlError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by the numbers themselves rather than inputs or files.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CrlError::Divergence { .. } | CrlError::NonFiniteLoss { .. } | CrlError::DivergenceUndefined { .. }
        )
    }

    pub fn is_data(&self) -> bool {
        matches!(
            self,
            CrlError::Corruption(_)
                | CrlError::Version { .. }
                | CrlError::Io(_)
                | CrlError::BenchmarkTooSmall(_)
                | CrlError::Protocol(_)
        )
    }
}
