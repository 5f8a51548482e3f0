use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty ensemble")]
    EmptyEnsemble,

    #[error("{context}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("particle count mismatch: {left} vs {right}")]
    ParticleCountMismatch { left: usize, right: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("explosion at t = {time}: particle {particle} left the finite range")]
    Explosion { time: f64, particle: usize },

    #[error("singular diffusion at t = {time} for particle {particle}")]
    SingularDiffusion { time: f64, particle: usize },

    #[error("anticipative direction requires constant diffusion")]
    AnticipativeDirection,

    #[error(
        "anticipative divergence not supported; restrict to models with a linear position drift"
    )]
    AnticipativeDivergence,

    #[error("controllability failure: {0}")]
    Controllability(String),

    #[error("test function has no gradient")]
    MissingGradient,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
