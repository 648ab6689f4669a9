//! On-disk representation of images, tensors, dataset manifests and run
//! directories. Every other module reads and writes through this one.

mod image_io;
mod manifest;
mod runstore;
mod tensor;

pub use image_io::{load_image, resize_image, save_image, Image};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use runstore::{RunManifest, RunStore};
pub use tensor::{load_tensor, save_tensor, TensorRecord};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt sidecar {path}: {reason}")]
    CorruptSidecar { path: String, reason: String },
    #[error("shape/payload mismatch: shape {shape:?} needs {expected} bytes, payload has {actual}")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("checksum failure for {name}: expected {expected}, got {actual}")]
    ChecksumFailure {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: String, reason: String },
    #[error("image at {path} has {channels} channels, expected 3-channel RGB")]
    NonRgbImage { path: String, channels: usize },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("artifact {0} missing from run manifest")]
    MissingArtifact(String),
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Hex SHA-256 of a byte slice; the checksum used throughout manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        write!(s, "{b:02x}").unwrap();
    }
    s
}
