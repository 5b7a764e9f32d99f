use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point has non-positive camera depth {0}")]
    NonPositiveDepth(f64),
    #[error("gaussian scales must be strictly positive")]
    NonPositiveScale,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("depth map has no valid pixels")]
    EmptyDepth,
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("no matches survive the confidence and depth filters")]
    NoValidMatches,
    #[error("no depth patch lies fully inside the valid mask")]
    NoValidPatches,
    #[error("loss term {0} is not finite")]
    NonFiniteLoss(&'static str),
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("pose optimization diverged at iteration {iteration} (loss {loss})")]
    DivergedPose { iteration: usize, loss: f64 },
    #[error("render replay data does not match the backward inputs")]
    ReplayMismatch,
    #[error("invalid synthetic preset: {0}")]
    InvalidPreset(String),
    #[error("missing resource: {}", path.display())]
    MissingResource { path: PathBuf },
    #[error("malformed depth {}: {reason}", path.display())]
    MalformedDepth { path: PathBuf, reason: String },
    #[error("malformed matches {}: {reason}", path.display())]
    MalformedMatches { path: PathBuf, reason: String },
    #[error("{}:{line}: {reason}", path.display())]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("malformed PLY {}: {reason}", path.display())]
    MalformedPly { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image {}: {reason}", path.display())]
    Image { path: PathBuf, reason: String },
    #[error("trajectory alignment is degenerate (poses coincide)")]
    DegenerateAlignment,
    #[error("trajectory of length {len} is too short for delta {delta}")]
    TooShort { len: usize, delta: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingResource { path: path.into() };
        }
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code used by the CLI and the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DivergedPose { .. } => "E_DIVERGED",
            Error::NonPositiveDepth(_)
            | Error::NonPositiveScale
            | Error::NoValidMatches
            | Error::NoValidPatches
            | Error::NonFiniteLoss(_)
            | Error::NonFiniteGradient
            | Error::ReplayMismatch
            | Error::DegenerateAlignment
            | Error::TooShort { .. } => "E_NUMERIC",
            Error::Io { .. } => "E_IO",
            _ => "E_INPUT",
        }
    }
}
