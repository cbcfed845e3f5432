//! Volumes, case manifests, k-slice windows, batch assembly and a synthetic
//! phantom generator.

mod manifest;
mod synth;
mod volume;
mod window;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use manifest::{load_manifest, save_manifest, Grade, Manifest, VolumeCase};
pub use synth::{make_synthetic, SynthConfig};
pub use volume::{load_volume, save_volume, volume_header, Volume, HEADER_BYTES, MAGIC, VERSION};
pub use window::{
    assemble_batch, normalize_min_max, resize_bilinear, test_window, train_windows, BatchInputs,
    Dataset, InputKind, PreparedCase, SliceWindow, WindowConfig, DEFAULT_K,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic {found:?}, expected \"INNV\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported INNV version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated at byte offset {offset}: needed {needed} bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: String,
    },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("{path}: {source}")]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<DataError>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path}: {detail}")]
    ManifestParse { path: PathBuf, detail: String },
    #[error("case {case:?}: {detail}")]
    Case { case: String, detail: String },
    #[error("invalid window config: {0}")]
    Config(String),
    #[error("case {case:?}: slice range [{lo}, {hi}] holds fewer than k = {k} slices")]
    RangeTooShort {
        case: String,
        lo: usize,
        hi: usize,
        k: usize,
    },
    #[error("case {case:?}: modality {modality:?} missing")]
    MissingModality { case: String, modality: String },
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn in_file(self, path: &Path) -> Self {
        match self {
            e @ (DataError::Io { .. } | DataError::InFile { .. }) => e,
            e => DataError::InFile {
                path: path.to_path_buf(),
                source: Box::new(e),
            },
        }
    }

    fn case(case: &str, detail: impl Into<String>) -> Self {
        DataError::Case {
            case: case.to_string(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;
