//! Distribution-level agreement metrics for sets of segmentations.

mod ged;
mod kalpha;
mod report;
mod wilcoxon;

use thiserror::Error;

use crate::seg::BinaryMask;

pub use ged::{ged_distance, ged_squared, ged_squared_with, iou};
pub use kalpha::{krippendorff_alpha, roi_union, AlphaRegion, KAlpha};
pub use report::{evaluate_image, pairwise_wilcoxon, ImageRecord, Metric, MetricsReport, PairwiseTest, Summary};
pub use wilcoxon::{wilcoxon_exact, wilcoxon_normal, wilcoxon_signed_rank, WilcoxonResult, EXACT_MAX_N};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("need at least {needed} masks, got {got}")]
    TooFewMasks { needed: usize, got: usize },
    #[error("region of interest is empty")]
    EmptyRoi,
    #[error("test undefined: {0}")]
    UndefinedTest(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Annotation,
    Prediction,
}

/// Equally shaped masks from one source.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    masks: Vec<BinaryMask>,
    pub provenance: Provenance,
}

impl MaskSet {
    pub fn new(masks: Vec<BinaryMask>, provenance: Provenance) -> Result<Self, MetricsError> {
        let first = masks.first().ok_or(MetricsError::TooFewMasks { needed: 1, got: 0 })?;
        if let Some(bad) = masks.iter().find(|m| m.shape() != first.shape()) {
            return Err(MetricsError::ShapeMismatch(first.shape().to_vec(), bad.shape().to_vec()));
        }
        Ok(Self { masks, provenance })
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.masks[0].shape()
    }
}
