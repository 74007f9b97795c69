use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad raster magic {found:?}, expected \"AMAP0001\"")]
    BadMagic { found: [u8; 8] },

    #[error("truncated raster: header declares {expected} bytes of payload, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("raster dimensions {width}x{height}x{channels} overflow addressable size")]
    SizeOverflow {
        width: u32,
        height: u32,
        channels: u32,
    },

    #[error("raster value at index {index} is not finite")]
    NonFinite { index: usize },

    #[error("raster data length {found} does not match {width}x{height}x{channels}")]
    DataLength {
        width: u32,
        height: u32,
        channels: u32,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("manifest line {line}: {message}")]
    ManifestLine { line: usize, message: String },

    #[error("duplicate image path in manifest: {0}")]
    DuplicatePath(String),

    #[error("invalid manifest entry {path}: {message}")]
    InvalidEntry { path: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("attention map sums to zero")]
    EmptyDistribution,

    #[error("unsupported channel count {0}")]
    UnsupportedChannels(u32),

    #[error("scene placement failed: {0}")]
    Placement(String),

    #[error("raster not found: {0}")]
    MissingRaster(String),

    #[error("png encoding failed: {0}")]
    Png(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
