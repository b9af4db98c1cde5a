use thiserror::Error;

/// Errors raised by the numerical primitives and pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite value {value} at node {index} (position {position:?})")]
    NonFinite {
        index: usize,
        position: Vec<f64>,
        value: f64,
    },

    #[error("invalid exponent p = {0}; expected p >= 1")]
    InvalidExponent(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("region contains no grid nodes")]
    EmptyRegion,

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("multiplier is not finite at frequency {0:?}")]
    NonFiniteMultiplier(Vec<f64>),

    #[error("imaginary residue {residue:e} exceeds {limit:e}")]
    ImaginaryResidue { residue: f64, limit: f64 },

    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },

    #[error("rescaled atoms leave the box; required half-widths {required:?}")]
    AtomsOutsideBox { required: Vec<f64> },

    #[error("every sampled pair touches a masked node")]
    AllMasked,

    #[error("time step {dt} exceeds the CFL cap {cap}")]
    Cfl { dt: f64, cap: f64 },

    #[error("parameter selection infeasible at stage `{stage}`: {reason}")]
    Infeasible { stage: &'static str, reason: String },

    #[error("missing U-field for datum `{0}`")]
    MissingUField(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
