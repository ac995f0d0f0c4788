use std::path::PathBuf;

/// Error type shared across the crate.
///
/// Variants are grouped by contract: shape/numeric violations come out of the
/// tensor and training code, the manifest/store variants out of data loading,
/// and the checkpoint variants out of (de)serialization. The CLI maps these
/// onto exit codes, so new variants should stay within one of these families.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Diverged {
        epoch: usize,
        step: usize,
        what: String,
    },

    #[error("non-finite gradient for parameter `{0}`; training aborted")]
    NonFiniteGradient(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("attention mask has no valid positions")]
    AllMasked,

    #[error("label {label} out of range for {num_classes} classes ({context})")]
    LabelRange {
        label: usize,
        num_classes: usize,
        context: String,
    },

    #[error("conversation `{conversation}`: order_index values must be 0..len-1 without gaps or duplicates ({detail})")]
    ConversationOrder {
        conversation: String,
        detail: String,
    },

    #[error("duplicate utterance id `{0}` in manifest")]
    DuplicateUtterance(String),

    #[error("manifest line {line}: {detail}")]
    ManifestParse { line: usize, detail: String },

    #[error("missing embedding file {path} (referenced by utterance `{utterance}`)")]
    MissingEmbeddingFile { utterance: String, path: PathBuf },

    #[error("embedding file {path}: bad magic")]
    BadMagic { path: PathBuf },

    #[error("embedding file {path}: unsupported version {version}")]
    BadVersion { path: PathBuf, version: u32 },

    #[error("embedding file {path}: truncated payload, expected {expected} bytes, got {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("checkpoint {path}: content hash mismatch (file corrupt)")]
    CheckpointCorrupt { path: PathBuf },

    #[error("checkpoint stage/modality mismatch: have {have}, requested {requested}")]
    StageMismatch { have: String, requested: String },

    #[error("embedding store missing for stage {stage} {modality}: {path} (run `extract` first)")]
    MissingStore {
        stage: u8,
        modality: String,
        path: PathBuf,
    },

    #[error("utterance `{0}` not found in embedding store")]
    StoreLookup(String),

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("refusing to overwrite existing output `{0}` (choose a fresh directory)")]
    WouldOverwrite(PathBuf),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
