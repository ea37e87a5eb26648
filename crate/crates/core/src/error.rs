use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("point {index} has depth {z} at or in front of the near plane {z_min}")]
    Projection { index: usize, z: f64, z_min: f64 },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("non-finite loss {value} at stage {stage}, iteration {iteration}")]
    Divergence {
        stage: usize,
        iteration: usize,
        value: f64,
    },
    #[error("scene placement failed after {0} attempts")]
    Placement(usize),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}
