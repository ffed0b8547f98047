use thiserror::Error;

/// Errors surfaced by the simulation, regression and optimization layers.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("evaluator `{evaluator}` returned {got} components, expected {expected}")]
    DimensionMismatch {
        evaluator: String,
        expected: usize,
        got: usize,
    },

    #[error("evaluator `{evaluator}` produced a non-finite value at {context}")]
    NonFiniteCoefficient { evaluator: String, context: String },

    #[error("non-finite state on path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("normal equations are rank-deficient with ridge = 0; set a ridge weight > 0")]
    RankDeficient,

    #[error("adjoint Picard iteration did not converge after {sweeps} sweeps (residuals {residuals:?})")]
    PicardNonConvergence { sweeps: usize, residuals: Vec<f64> },

    #[error(
        "change of measure is ill-conditioned: {below_floor} of {total} conditional density values below floor"
    )]
    IllConditionedDensity { below_floor: usize, total: usize },

    #[error("structural restriction violated: {0}")]
    StructuralRejection(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("corrupt noise dump: {0}")]
    CorruptDump(String),
}

pub type Result<T> = std::result::Result<T, Error>;
