use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by the stage that raises them so that callers (the CLI
/// in particular) can map them onto stable exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown stage name `{0}`")]
    UnknownStage(String),
    #[error("layer `{0}` not found")]
    UnknownLayer(String),

    #[error("weights file: bad magic bytes")]
    WeightsMagic,
    #[error("weights file: unsupported format version {0}")]
    WeightsVersion(u32),
    #[error("weights file: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    WeightsCrc { stored: u32, computed: u32 },
    #[error("weights file: tensor `{name}` has shape {found:?}, network expects {expected:?}")]
    WeightsShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("weights file: tensor `{0}` missing")]
    WeightsMissingTensor(String),
    #[error("weights file: unexpected tensor `{0}`")]
    WeightsUnexpectedTensor(String),
    #[error("weights file: truncated or malformed ({0})")]
    WeightsCorrupt(String),

    #[error("malformed image name `{0}` (expected <subject>.<view>.bmp)")]
    MalformedName(String),
    #[error("unsupported BMP: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt BMP: {0}")]
    CorruptFile(String),
    #[error("image too small: {height}x{width}")]
    DegenerateImage { height: usize, width: usize },
    #[error("subjects without a label: {0:?}")]
    UnlabeledSubjects(Vec<u32>),
    #[error("cannot stratify: {0}")]
    Stratification(String),
    #[error("labels file: {0}")]
    Labels(String),

    #[error("{0} split is empty")]
    EmptySplit(String),
    #[error("training diverged: non-finite loss in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGrad(String),

    #[error("no samples to evaluate")]
    EmptyInput,
    #[error("AUC undefined: only one class present")]
    SingleClass,
    #[error("invalid score {0} (must be finite and in [0,1])")]
    InvalidScore(f64),

    #[error("PNM image: {0}")]
    Pnm(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
