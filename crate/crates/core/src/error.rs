use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate anchors: shoulder length {shoulder_len:.3e}, torso length {torso_len:.3e}")]
    AnchorDegenerate { shoulder_len: f64, torso_len: f64 },

    #[error("sequence unusable: {0}")]
    SequenceUnusable(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no face passed the detection threshold")]
    NoFaceFound,

    #[error("face analyzer unavailable: {0}")]
    AnalyzerUnavailable(String),

    #[error("face fixture missing: {}", .0.display())]
    FixtureMissing(PathBuf),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("PENCIL label update not allowed in phase {0:?}")]
    PhaseViolation(crate::losses::PencilPhase),

    #[error("gait embedder unavailable: {0}")]
    EmbedderUnavailable(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("no labeled samples to propagate from")]
    NoLabeledSamples,

    #[error("label spreading system is singular or ill-conditioned (alpha = {alpha}); retry with a smaller alpha")]
    SingularSystem { alpha: f64 },

    #[error("dataset contains a single class")]
    SingleClassDataset,

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("too few subjects: need more than {holdout}, got {got}")]
    TooFewSubjects { holdout: usize, got: usize },

    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}:{line}: expected 17 keypoints, found {found}", path.display())]
    WrongKeypointCount {
        path: PathBuf,
        line: usize,
        found: usize,
    },

    #[error("missing {what} ({}); run the {stage} stage first", path.display())]
    MissingArtifact {
        what: String,
        path: PathBuf,
        stage: &'static str,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("manifest is locked by another process ({})", .0.display())]
    ManifestLocked(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
