use thiserror::Error;

/// Error type shared by the solver layers.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Two fields passed to one operator live on different grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(&'static str),

    /// A field failed its construction invariants.
    #[error("invalid field: {0}")]
    InvalidField(String),

    /// Masses of two measures disagree beyond tolerance.
    #[error("mass mismatch: |{0} - {1}| exceeds tolerance")]
    MassMismatch(f64, f64),

    /// An iterative solver hit its iteration cap.
    #[error("{solver} did not converge: residual {residual:.3e} after {iterations} iterations")]
    NonConvergence {
        solver: &'static str,
        residual: f64,
        iterations: usize,
    },

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Requested scenario name is unknown.
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
