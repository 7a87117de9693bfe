use super::{MaskSet, MetricsError};
use crate::seg::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaRegion {
    All,
    /// Voxels marked foreground by at least one mask.
    Roi,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KAlpha {
    /// In `[−1, 1]`.
    pub value: f64,
    /// Set when every rating carries the same label, so the expected
    /// disagreement is zero and the value is 1 by convention.
    pub degenerate: bool,
}

impl KAlpha {
    pub fn percent(&self) -> f64 {
        100.0 * self.value
    }
}

/// Voxelwise OR.
pub fn roi_union(set: &MaskSet) -> BinaryMask {
    let first = &set.masks()[0];
    let mut out = first.values().to_vec();
    for m in &set.masks()[1..] {
        for (o, &v) in out.iter_mut().zip(m.values()) {
            *o |= v;
        }
    }
    BinaryMask::new(first.shape().to_vec(), out).expect("union of binary masks is binary")
}

/// Nominal Krippendorff's α for binary labels, every voxel rated by every
/// mask. With the coincidence matrix this reduces to
/// `1 − (n − 1)·o₀₁ / (n₀·n₁)`.
pub fn krippendorff_alpha(set: &MaskSet, region: AlphaRegion) -> Result<KAlpha, MetricsError> {
    let m = set.len();
    if m < 2 {
        return Err(MetricsError::TooFewMasks { needed: 2, got: m });
    }
    let roi = match region {
        AlphaRegion::All => None,
        AlphaRegion::Roi => {
            let u = roi_union(set);
            if u.count() == 0 {
                return Err(MetricsError::EmptyRoi);
            }
            Some(u)
        }
    };
    let voxels = set.masks()[0].values().len();
    let (mut o01, mut n1, mut units) = (0.0, 0.0, 0usize);
    for v in 0..voxels {
        if roi.as_ref().is_some_and(|r| r.values()[v] == 0) {
            continue;
        }
        let ones = set.masks().iter().filter(|mask| mask.values()[v] == 1).count() as f64;
        let zeros = m as f64 - ones;
        o01 += ones * zeros / (m as f64 - 1.0);
        n1 += ones;
        units += 1;
    }
    let n = (units * m) as f64;
    let n0 = n - n1;
    if n0 == 0.0 || n1 == 0.0 {
        return Ok(KAlpha {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(KAlpha {
        value: 1.0 - (n - 1.0) * o01 / (n0 * n1),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::super::Provenance;
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(rows: &[&[u8]]) -> MaskSet {
        MaskSet::new(
            rows.iter().map(|r| BinaryMask::new(vec![r.len()], r.to_vec()).unwrap()).collect(),
            Provenance::Annotation,
        )
        .unwrap()
    }

    /// Coincidence matrices from explicit pairs, then `1 − D_o / D_e`.
    fn oracle(rows: &[Vec<u8>]) -> f64 {
        let m = rows.len();
        let mut o = [[0.0f64; 2]; 2];
        for v in 0..rows[0].len() {
            for a in 0..m {
                for b in 0..m {
                    if a != b {
                        o[rows[a][v] as usize][rows[b][v] as usize] += 1.0 / (m as f64 - 1.0);
                    }
                }
            }
        }
        let nc = [o[0][0] + o[0][1], o[1][0] + o[1][1]];
        let n = nc[0] + nc[1];
        let d_o = (o[0][1] + o[1][0]) / n;
        let d_e = (nc[0] * nc[1] + nc[1] * nc[0]) / (n * (n - 1.0));
        1.0 - d_o / d_e
    }

    #[test]
    fn perfect_agreement() {
        let s = set(&[&[1, 0, 1], &[1, 0, 1], &[1, 0, 1]]);
        let a = krippendorff_alpha(&s, AlphaRegion::All).unwrap();
        assert_eq!(a, KAlpha { value: 1.0, degenerate: false });
    }

    #[test]
    fn two_raters_opposed() {
        let s = set(&[&[1, 0], &[0, 1]]);
        let a = krippendorff_alpha(&s, AlphaRegion::All).unwrap();
        assert!((a.value - oracle(&[vec![1, 0], vec![0, 1]])).abs() < 1e-12);
        assert!((a.value + 0.5).abs() < 1e-12);
        assert!((a.percent() + 50.0).abs() < 1e-9);
    }

    #[test]
    fn matches_oracle_on_random_ratings() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let rows: Vec<Vec<u8>> = (0..4).map(|_| (0..30).map(|_| rng.random_range(0..2)).collect()).collect();
            let s = MaskSet::new(
                rows.iter().map(|r| BinaryMask::new(vec![30], r.clone()).unwrap()).collect(),
                Provenance::Prediction,
            )
            .unwrap();
            let a = krippendorff_alpha(&s, AlphaRegion::All).unwrap();
            assert!((a.value - oracle(&rows)).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_and_empty_roi() {
        let s = set(&[&[0, 0], &[0, 0]]);
        assert!(krippendorff_alpha(&s, AlphaRegion::All).unwrap().degenerate);
        assert_eq!(krippendorff_alpha(&s, AlphaRegion::Roi), Err(MetricsError::EmptyRoi));
        assert!(matches!(
            krippendorff_alpha(&set(&[&[1, 0]]), AlphaRegion::All),
            Err(MetricsError::TooFewMasks { .. })
        ));
    }

    #[test]
    fn invariant_under_voxel_permutation_and_label_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rows: Vec<Vec<u8>> = (0..3).map(|_| (0..40).map(|_| rng.random_range(0..2)).collect()).collect();
        let mk = |rows: &[Vec<u8>]| {
            MaskSet::new(
                rows.iter().map(|r| BinaryMask::new(vec![r.len()], r.clone()).unwrap()).collect(),
                Provenance::Annotation,
            )
            .unwrap()
        };
        let base = krippendorff_alpha(&mk(&rows), AlphaRegion::All).unwrap().value;
        let mut perm: Vec<usize> = (0..40).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<Vec<u8>> = rows.iter().map(|r| perm.iter().map(|&i| r[i]).collect()).collect();
        let swapped: Vec<Vec<u8>> = rows.iter().map(|r| r.iter().map(|v| 1 - v).collect()).collect();
        assert!((krippendorff_alpha(&mk(&permuted), AlphaRegion::All).unwrap().value - base).abs() < 1e-12);
        assert!((krippendorff_alpha(&mk(&swapped), AlphaRegion::All).unwrap().value - base).abs() < 1e-12);
    }

    #[test]
    fn roi_lowers_alpha_when_disagreement_is_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            // Background voxels everyone agrees on, plus a noisy foreground patch.
            let rows: Vec<Vec<u8>> = (0..4)
                .map(|_| (0..60).map(|v| if v < 20 { rng.random_range(0..2) } else { 0 }).collect())
                .collect();
            let s = MaskSet::new(
                rows.iter().map(|r| BinaryMask::new(vec![60], r.clone()).unwrap()).collect(),
                Provenance::Annotation,
            )
            .unwrap();
            let all = krippendorff_alpha(&s, AlphaRegion::All).unwrap().value;
            let roi = krippendorff_alpha(&s, AlphaRegion::Roi).unwrap().value;
            assert!(roi <= all + 1e-12, "{roi} > {all}");
        }
    }

    #[test]
    fn union_examples() {
        let one = set(&[&[1, 0, 1]]);
        assert_eq!(roi_union(&one).values(), &[1, 0, 1]);
        assert_eq!(roi_union(&set(&[&[1, 0, 1], &[0, 1, 0]])).values(), &[1, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<u8>> = (0..5).map(|_| (0..20).map(|_| rng.random_range(0..2)).collect()).collect();
        let refs: Vec<&[u8]> = rows.iter().map(|r| r.as_slice()).collect();
        let u = roi_union(&set(&refs));
        for v in 0..20 {
            assert_eq!(u.values()[v], rows.iter().any(|r| r[v] == 1) as u8);
        }
    }
}
