use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Malformed { what: String, message: String },

    #[error("bad magic bytes in {0}")]
    BadMagic(PathBuf),

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("conversation `{conversation}`: utterance indices are not contiguous 1..N ({detail})")]
    NonContiguousUtterances { conversation: String, detail: String },

    #[error("conversation `{conversation}`, utterance {utterance}: label {label} outside 0..{n_classes}")]
    LabelOutOfRange {
        conversation: String,
        utterance: usize,
        label: usize,
        n_classes: usize,
    },

    #[error("conversation `{conversation}`: cause pair ({candidate}, {target}) violates 1 <= j <= i <= {n}")]
    InvalidCausePair {
        conversation: String,
        candidate: usize,
        target: usize,
        n: usize,
    },

    #[error("conversation `{conversation}`, utterance {utterance}: empty knowledge aspect label")]
    EmptyAspect {
        conversation: String,
        utterance: usize,
    },

    #[error("heads ({heads}) do not divide dimension {dim}")]
    HeadsDoNotDivide { heads: usize, dim: usize },

    #[error("unknown node {0}")]
    UnknownNode(String),

    #[error("unknown conversation `{0}`")]
    UnknownConversation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("task/label mismatch: {0}")]
    TaskLabels(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {loss}")]
    NonFiniteLoss { epoch: usize, step: u64, loss: f64 },

    #[error("layer {layer} out of range 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("nothing to evaluate: empty corpus or no labelled items")]
    EmptyCorpus,

    #[error("scheme `{0}` requires a neutral class id")]
    MissingNeutral(String),

    #[error("unknown F1 scheme `{0}`")]
    UnknownScheme(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    /// True for failures of the filesystem rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
