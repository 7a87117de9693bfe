use super::{MaskSet, MetricsError};
use crate::seg::BinaryMask;

/// Intersection over union; two empty masks score 1.
pub fn iou(s: &BinaryMask, y: &BinaryMask) -> Result<f64, MetricsError> {
    if s.shape() != y.shape() {
        return Err(MetricsError::ShapeMismatch(s.shape().to_vec(), y.shape().to_vec()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in s.values().iter().zip(y.values()) {
        inter += (a & b) as usize;
        union += (a | b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `1 − IoU`.
pub fn ged_distance(s: &BinaryMask, y: &BinaryMask) -> Result<f64, MetricsError> {
    Ok(1.0 - iou(s, y)?)
}

fn mean_within(set: &MaskSet) -> Result<f64, MetricsError> {
    let m = set.masks();
    if m.len() < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..m.len() {
        for j in i + 1..m.len() {
            total += 2.0 * ged_distance(&m[i], &m[j])?;
        }
    }
    Ok(total / (m.len() * (m.len() - 1)) as f64)
}

/// Squared generalized energy distance
/// `2E[d(s, y)] − E[d(s, s′)] − E[d(y, y′)]`: all cross pairs, ordered
/// distinct pairs within each set. When both arguments hold the same mask
/// sequence the cross term also skips matching indices, so a set is at
/// distance exactly 0 from itself.
pub fn ged_squared(s: &MaskSet, y: &MaskSet) -> Result<f64, MetricsError> {
    ged_squared_with(s, y, false)
}

/// [`ged_squared`]; with `allow_singletons` a set of one mask contributes a
/// zero within-set term instead of being rejected.
pub fn ged_squared_with(s: &MaskSet, y: &MaskSet, allow_singletons: bool) -> Result<f64, MetricsError> {
    let needed = if allow_singletons { 1 } else { 2 };
    for set in [s, y] {
        if set.len() < needed {
            return Err(MetricsError::TooFewMasks { needed, got: set.len() });
        }
    }
    if s.shape() != y.shape() {
        return Err(MetricsError::ShapeMismatch(s.shape().to_vec(), y.shape().to_vec()));
    }
    if s.masks() == y.masks() {
        return Ok(0.0);
    }
    let mut cross = 0.0;
    for a in s.masks() {
        for b in y.masks() {
            cross += ged_distance(a, b)?;
        }
    }
    cross /= (s.len() * y.len()) as f64;
    Ok(2.0 * cross - mean_within(s)? - mean_within(y)?)
}
