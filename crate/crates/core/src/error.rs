use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown preset `{0}` (expected rg2b, rg9b or desk)")]
    UnknownPreset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{0}")]
    Domain(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dialogue error at byte {offset}: {msg}")]
    Dialogue { offset: usize, msg: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("truncated data at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },

    #[error("malformed data at byte offset {offset}: {msg}")]
    Malformed { offset: usize, msg: String },

    #[error("tensor `{name}` does not match config: expected {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("config hash mismatch: blob has {found:#018x}, config hashes to {expected:#018x}")]
    ConfigHash { expected: u64, found: u64 },

    #[error("dtype mismatch: config wants {config}, runtime uses {runtime}")]
    Dtype {
        config: &'static str,
        runtime: &'static str,
    },

    #[error("batch requests must share one config")]
    MixedConfigs,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
