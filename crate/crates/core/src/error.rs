use thiserror::Error;

/// Errors raised by the solver and its supporting machinery.
#[derive(Debug, Error)]
pub enum Error {
    /// Input arrays or grids do not match the operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Grid shape not supported by the requested stencil.
    #[error("unsupported grid: {0}")]
    UnsupportedGrid(String),

    /// A time or index outside the stored/allowed range.
    #[error("out of range: {0}")]
    Range(String),

    /// The deformation is not admissible (orientation, injectivity).
    #[error("inadmissible deformation: {0}")]
    Admissibility(String),

    /// A solver or grid configuration that cannot produce a valid result.
    #[error("configuration error: {0}")]
    Config(String),

    /// The energy is +inf at this state (non-positive Jacobian somewhere).
    #[error("energy is infinite: min det = {min_det:e}")]
    InfiniteEnergy { min_det: f64 },

    /// The stray-field solver produced a field violating a structural bound.
    #[error("stray-field solver defect: {0}")]
    SolverDefect(String),

    /// A growth hypothesis on an energy density failed on a witness sample.
    #[error("growth audit failed: {0}")]
    GrowthAudit(String),

    /// A post-hoc verification failed.
    #[error("diagnostic failure: {0}")]
    Diagnostic(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
