//! On-disk formats: the GRDS gradient container and the corpus manifest.

mod grds;
mod manifest;

pub use grds::{
    read_grds, write_grds, write_grds_tagged, Dtype, GrdsFile, GrdsReader, GrdsWriter,
    HEADER_FIXED_LEN, MAGIC, VERSION,
};
pub use manifest::{
    cross_check, read_manifest, write_manifest, CrossCheck, Manifest, ManifestEntry, Subset,
};

use thiserror::Error;

use crate::gradient::Projection;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {found:?}, expected \"GRDS\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported GRDS version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("unknown header flags {0:#04x}")]
    UnknownFlags(u8),
    #[error("file truncated at byte offset {offset}")]
    TruncatedFile { offset: u64 },
    #[error("unexpected trailing bytes at offset {offset}")]
    TrailingBytes { offset: u64 },
    #[error("invalid UTF-8 string at byte offset {offset}")]
    BadUtf8 { offset: u64 },
    #[error("sample {sample_id}: non-finite value in layer {layer} projection {projection}")]
    NonFinitePayload {
        sample_id: String,
        layer: usize,
        projection: Projection,
    },
    #[error("sample {sample_id}: value in layer {layer} projection {projection} overflows f32")]
    NotRepresentable {
        sample_id: String,
        layer: usize,
        projection: Projection,
    },
    #[error("sample {sample_id}: projection shapes {found:?} differ from {expected:?}")]
    HeterogeneousShapes {
        sample_id: String,
        expected: Vec<(usize, usize)>,
        found: Vec<(usize, usize)>,
    },
    #[error("sample {sample_id}: {found} layers, file declares {expected}")]
    LayerCountMismatch {
        sample_id: String,
        expected: usize,
        found: usize,
    },
    #[error("matrix header at offset {offset}: expected (layer, projection) {expected:?}, found {found:?}")]
    UnexpectedMatrix {
        offset: u64,
        expected: (usize, u8),
        found: (usize, u8),
    },
    #[error("matrix at offset {offset} has a zero dimension")]
    EmptyMatrix { offset: u64 },
    #[error("sample {sample_id}: {reason}")]
    InvalidBundle { sample_id: String, reason: String },
    #[error("no bundles to write")]
    NoBundles,
    #[error("{0} exceeds the format limit")]
    TooLarge(&'static str),
    #[error("params section: {0}")]
    Params(String),
    #[error("manifest format error: {0}")]
    Manifest(String),
}
