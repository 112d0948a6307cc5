use thiserror::Error;

/// Errors surfaced by graph construction, model I/O and plan execution.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {context}")]
    Truncated { context: String },

    #[error("manifest mismatch: {context}")]
    ManifestMismatch { context: String },

    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("dtype mismatch: {context}")]
    DtypeMismatch { context: String },

    #[error("invalid block config: {0}")]
    InvalidBlock(String),

    #[error("invalid mixer spec: {0}")]
    InvalidMixer(String),

    #[error("invalid precision flags: {0}")]
    InvalidPrecision(String),

    #[error("unknown pass name: {0}")]
    UnknownPass(String),

    #[error("cycle detected in graph")]
    Cycle,

    #[error("graph failed validation: {0} violation(s), first: {1}")]
    Invalid(usize, String),

    #[error("value out of {{-1,+1}} domain: {0}")]
    NotBinary(f32),

    #[error("graph is not compiled; run the pass pipeline and quantization first")]
    NotCompiled,

    #[error("graph is already quantized; {0}")]
    AlreadyQuantized(String),

    #[error("unsupported word size {0} (must be in 1..=64)")]
    BadWordSize(u8),
}

pub type Result<T> = std::result::Result<T, Error>;
