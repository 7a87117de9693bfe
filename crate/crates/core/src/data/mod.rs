//! Synthetic multi-annotator datasets, patching and on-disk formats.

mod io;
mod patches;
mod synth;

use std::path::PathBuf;

use thiserror::Error;

pub use io::{
    load_dataset, read_volume, save_dataset, write_atomic, write_mask, write_volume_f32, DatasetManifest, Volume, VolumeFile,
};
pub use patches::{
    extract_patches, extract_slices, extract_volume_patches, patch_dataset, patch_positions, stack_slices, stitch_overlap_average, Patch, PatchSpec,
};
pub use synth::{
    generate_dataset, truncated_normal, AnnotatedVolume, Dataset, JitterSpec, Splits, Structure, SyntheticSpec,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("voxel {0:?} is not covered by any patch")]
    Uncovered(Vec<usize>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Multi-index of flat offset `i`.
pub(crate) fn unravel(mut i: usize, shape: &[usize]) -> Vec<usize> {
    let mut out = vec![0; shape.len()];
    for d in (0..shape.len()).rev() {
        out[d] = i % shape[d];
        i /= shape[d];
    }
    out
}
