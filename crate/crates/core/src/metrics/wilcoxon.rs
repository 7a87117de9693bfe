use statrs::distribution::{ContinuousCDF, Normal};

use super::MetricsError;

/// Largest sample size handled by the exact null distribution.
pub const EXACT_MAX_N: usize = 25;

const MIN_N: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Non-zero differences used.
    pub n: usize,
    /// Two-sided p-value.
    pub p_value: f64,
    pub exact: bool,
}

/// Non-zero differences with average ranks of their magnitudes, doubled so
/// that tied ranks stay integral.
fn doubled_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<u64>, Vec<bool>, Vec<usize>), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::InvalidArgument(format!("samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let mut d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::InvalidArgument("non-finite difference".into()));
    }
    if d.len() < MIN_N {
        return Err(MetricsError::UndefinedTest(format!(
            "{} non-zero differences, need at least {MIN_N}",
            d.len()
        )));
    }
    d.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = d.len();
    let mut ranks = vec![0u64; n];
    let mut ties = vec![];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged, times two.
        let r = (i + j + 2) as u64;
        ranks[i..=j].fill(r);
        ties.push(j - i + 1);
        i = j + 1;
    }
    let positive = d.iter().map(|v| *v > 0.0).collect();
    Ok((ranks, positive, ties))
}

/// Exact two-sided signed-rank test; the null distribution of the doubled
/// statistic is counted over all `2ⁿ` sign patterns by dynamic programming.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    let (ranks, positive, _) = doubled_ranks(a, b)?;
    let total: u64 = ranks.iter().sum();
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in &ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let w2: u64 = ranks.iter().zip(&positive).filter(|(_, p)| **p).map(|(r, _)| *r).sum();
    let all = 2f64.powi(ranks.len() as i32);
    let lower: f64 = counts[..=w2 as usize].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2 as usize..].iter().sum::<f64>() / all;
    Ok(WilcoxonResult {
        w_plus: w2 as f64 / 2.0,
        n: ranks.len(),
        p_value: (2.0 * lower.min(upper)).min(1.0),
        exact: true,
    })
}

/// Normal approximation with continuity and tie corrections.
pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    let (ranks, positive, ties) = doubled_ranks(a, b)?;
    let n = ranks.len() as f64;
    let w: f64 = ranks.iter().zip(&positive).filter(|(_, p)| **p).map(|(r, _)| *r as f64 / 2.0).sum();
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return Err(MetricsError::UndefinedTest("zero variance".into()));
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::standard();
    Ok(WilcoxonResult {
        w_plus: w,
        n: ranks.len(),
        p_value: (2.0 * (1.0 - normal.cdf(z))).min(1.0),
        exact: false,
    })
}

/// Two-sided paired test: exact up to [`EXACT_MAX_N`] non-zero differences,
/// normal approximation beyond. Zero differences are dropped.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, MetricsError> {
    let (ranks, _, _) = doubled_ranks(a, b)?;
    if ranks.len() <= EXACT_MAX_N {
        wilcoxon_exact(a, b)
    } else {
        wilcoxon_normal(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Two-sided p by listing every sign pattern.
    fn brute_force(d: &[f64]) -> f64 {
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.sort_by(|&i, &j| d[i].abs().total_cmp(&d[j].abs()));
        let mut rank = vec![0.0; d.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
                j += 1;
            }
            for k in i..=j {
                rank[idx[k]] = (i + j + 2) as f64 / 2.0;
            }
            i = j + 1;
        }
        let w: f64 = (0..d.len()).filter(|&i| d[i] > 0.0).map(|i| rank[i]).sum();
        let n = d.len();
        let (mut lo, mut hi) = (0usize, 0usize);
        for mask in 0..1u64 << n {
            let s: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| rank[i]).sum();
            if s <= w + 1e-9 {
                lo += 1;
            }
            if s >= w - 1e-9 {
                hi += 1;
            }
        }
        (2.0 * lo.min(hi) as f64 / (1u64 << n) as f64).min(1.0)
    }

    #[test]
    fn constant_shift() {
        let b = [1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
        let a: Vec<f64> = b.iter().map(|v| v + 0.3).collect();
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(r.exact);
        assert!((r.p_value - 0.03125).abs() < 1e-15);
    }

    #[test]
    fn degenerate_cases() {
        let b = [1.0, 2.0, 3.0, 4.0, 5.0];
        let mut a = b;
        assert!(matches!(wilcoxon_signed_rank(&a, &b), Err(MetricsError::UndefinedTest(_))));
        a[2] += 1.0;
        assert!(matches!(wilcoxon_signed_rank(&a, &b), Err(MetricsError::UndefinedTest(_))));
        assert!(wilcoxon_signed_rank(&a[..4], &b).is_err());
    }

    #[test]
    fn symmetric_differences() {
        let d = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
        let zeros = [0.0; 6];
        let r = wilcoxon_signed_rank(&d, &zeros).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.w_plus, 10.5);
    }

    #[test]
    fn exact_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 5..=12 {
            for _ in 0..5 {
                // Rounded values make ties likely.
                let d: Vec<f64> = (0..n).map(|_| (rng.random_range(-3.0..3.0f64) * 2.0).round() / 2.0 + 0.25).collect();
                let zeros = vec![0.0; n];
                let r = wilcoxon_exact(&d, &zeros).unwrap();
                assert!((r.p_value - brute_force(&d)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normal_approximation_agrees_at_25() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let shift = rng.random_range(-0.5..0.5);
            let d: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
            let zeros = vec![0.0; 25];
            let e = wilcoxon_exact(&d, &zeros).unwrap().p_value;
            let a = wilcoxon_normal(&d, &zeros).unwrap().p_value;
            assert!((e - a).abs() < 0.02, "{e} vs {a}");
        }
        let d: Vec<f64> = (1..=30).map(|v| v as f64).collect();
        assert!(!wilcoxon_signed_rank(&d, &vec![0.0; 30]).unwrap().exact);
    }
}
