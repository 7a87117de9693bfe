//! From probability maps and logits to binary segmentations.

use thiserror::Error;

use crate::engine::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum SegError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate histogram: map has no two separable values")]
    DegenerateHistogram,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
}

/// Per-voxel foreground probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self, SegError> {
        if shape.iter().product::<usize>() != values.len() || values.is_empty() {
            return Err(SegError::InvalidArgument(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SegError::InvalidArgument("probabilities must lie in [0, 1]".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: Vec<usize>, values: Vec<u8>) -> Result<Self, SegError> {
        if shape.iter().product::<usize>() != values.len() || values.is_empty() {
            return Err(SegError::InvalidArgument(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(SegError::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

pub const DEFAULT_BINS: usize = 256;

/// Otsu threshold over `[0, 1]` with `bins` histogram bins.
pub fn otsu_threshold(p: &ProbabilityMap, bins: usize) -> Result<f64, SegError> {
    otsu_threshold_in(p.values(), bins, 0.0, 1.0)
}

/// Otsu threshold for values in `[lo, hi]`. The candidates are the interior
/// bin edges; a value equal to an edge falls in the upper class. Among
/// edges of maximal between-class variance the lower median is returned,
/// which centres the threshold in the gap between two clusters.
pub fn otsu_threshold_in(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<f64, SegError> {
    if bins < 2 {
        return Err(SegError::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    if !(hi > lo) || values.is_empty() {
        return Err(SegError::InvalidArgument(format!("empty range [{lo}, {hi}] or no values")));
    }
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![0usize; bins];
    for &v in values {
        if !(lo..=hi).contains(&v) {
            return Err(SegError::InvalidArgument(format!("value {v} outside [{lo}, {hi}]")));
        }
        hist[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let total = values.len() as f64;
    let centre = |k: usize| lo + (k as f64 + 0.5) * width;
    let mean_all: f64 = hist.iter().enumerate().map(|(k, &c)| c as f64 * centre(k)).sum::<f64>() / total;

    let mut scores = Vec::with_capacity(bins - 1);
    let (mut w0, mut sum0) = (0.0, 0.0);
    for k in 1..bins {
        w0 += hist[k - 1] as f64;
        sum0 += hist[k - 1] as f64 * centre(k - 1);
        let w1 = total - w0;
        let score = if w0 == 0.0 || w1 == 0.0 {
            0.0
        } else {
            let m0 = sum0 / w0;
            let m1 = (mean_all * total - sum0) / w1;
            w0 * w1 * (m0 - m1) * (m0 - m1) / (total * total)
        };
        scores.push(score);
    }
    let best = scores.iter().copied().fold(0.0, f64::max);
    if best <= 0.0 {
        return Err(SegError::DegenerateHistogram);
    }
    let winners: Vec<usize> = (1..bins).filter(|&k| scores[k - 1] >= best * (1.0 - 1e-12)).collect();
    let k = winners[(winners.len() - 1) / 2];
    Ok(lo + k as f64 * width)
}

/// `s = 1` where `p ≥ τ`.
pub fn binarize(p: &ProbabilityMap, tau: f64) -> Result<BinaryMask, SegError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(SegError::InvalidArgument(format!("threshold {tau} outside (0, 1)")));
    }
    Ok(BinaryMask {
        shape: p.shape.clone(),
        values: p.values.iter().map(|&v| (v >= tau) as u8).collect(),
    })
}

/// Binarize at the Otsu threshold of the map itself, or at 0.5 when all
/// values share one histogram bin.
pub fn otsu_binarize(p: &ProbabilityMap) -> Result<BinaryMask, SegError> {
    let tau = match otsu_threshold(p, DEFAULT_BINS) {
        Ok(t) => t,
        Err(SegError::DegenerateHistogram) => 0.5,
        Err(e) => return Err(e),
    };
    binarize(p, tau)
}

/// Label 1 where `η₁ > η₀`; `eta` is `[2, spatial...]` (a leading batch axis
/// of 1 is accepted).
pub fn argmax_labels(eta: &Tensor) -> Result<BinaryMask, SegError> {
    let shape = eta.shape();
    let spatial: Vec<usize> = match shape {
        [1, 2, rest @ ..] if !rest.is_empty() => rest.to_vec(),
        [2, rest @ ..] if !rest.is_empty() => rest.to_vec(),
        _ => return Err(SegError::InvalidArgument(format!("expected two logit channels, got shape {shape:?}"))),
    };
    let n: usize = spatial.iter().product();
    let (e0, e1) = eta.data().split_at(n);
    Ok(BinaryMask {
        shape: spatial,
        values: e0.iter().zip(e1).map(|(a, b)| (b > a) as u8).collect(),
    })
}

/// Voxelwise mean of a set of masks.
pub fn rate_of_occurrence(masks: &[BinaryMask]) -> Result<ProbabilityMap, SegError> {
    let first = masks
        .first()
        .ok_or_else(|| SegError::InvalidArgument("no masks".into()))?;
    let mut acc = vec![0usize; first.values.len()];
    for m in masks {
        if m.shape != first.shape {
            return Err(SegError::ShapeMismatch(first.shape.clone(), m.shape.clone()));
        }
        for (a, &v) in acc.iter_mut().zip(&m.values) {
            *a += v as usize;
        }
    }
    let n = masks.len() as f64;
    Ok(ProbabilityMap {
        shape: first.shape.clone(),
        values: acc.into_iter().map(|c| c as f64 / n).collect(),
    })
}
