use std::path::PathBuf;

/// Errors produced anywhere in the explainer engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("vocabulary line {line}: {reason}")]
    MalformedVocab { line: usize, reason: String },
    #[error("vocabulary line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("vocabulary line {line}: id {id} assigned to more than one token")]
    DuplicateId { line: usize, id: u32 },
    #[error("merges line {line}: {reason}")]
    MalformedMerge { line: usize, reason: String },
    #[error("merges line {line}: symbol {symbol:?} is not constructible from the byte alphabet and earlier merges")]
    UnresolvableMerge { line: usize, symbol: String },
    #[error("vocabulary has no entry for special token {0:?}")]
    MissingSpecialToken(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("token id {0} is not in the vocabulary")]
    UnknownTokenId(u32),

    #[error("no tensor for prompt key {0:?} in the tensor pack")]
    MissingTensor(String),
    #[error("no replay tensor for prompt {prompt_key:?}, step {step}, branch {branch}")]
    MissingReplay {
        prompt_key: String,
        step: usize,
        branch: String,
    },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("vector is not unit length (norm {norm})")]
    NotUnitNorm { norm: f64 },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite latent produced at inference step {step}")]
    NonFiniteLatent { step: usize },
    #[error("layout diverged (NaN) at epoch {epoch}")]
    LayoutDiverged { epoch: usize },

    #[error("channel mismatch: decoder expects {expected} channels, latent has {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("upscale target {target_w}x{target_h} is smaller than source {source_w}x{source_h}")]
    Downscale {
        source_w: usize,
        source_h: usize,
        target_w: usize,
        target_h: usize,
    },
    #[error("png: {0}")]
    Png(String),

    #[error("tensor file: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("tensor file: {0}")]
    TensorFormat(String),
    #[error("tensor file: shape {shape:?} needs {expected} values, found {found}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("unsupported bundle version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },
    #[error("bundle schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("prompt {prompt_key:?}, stage {stage}")]
    Stage {
        prompt_key: String,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn at_stage(self, prompt_key: &str, stage: &'static str) -> Error {
        Error::Stage {
            prompt_key: prompt_key.to_string(),
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
