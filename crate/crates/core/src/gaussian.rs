//! Gaussian helpers: diagonal KL, moment estimation, PSD square roots, the
//! Fréchet distance between Gaussians and reparameterized sampling.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
}

/// Bound applied to `log σ` before exponentiation.
pub const LOG_SIGMA_CLAMP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self, GaussianError> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(GaussianError::InvalidArgument(format!(
                "mu has {} entries, sigma {}",
                mu.len(),
                sigma.len()
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) || sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(GaussianError::InvalidArgument("non-finite mean or non-positive sigma".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn from_log_sigma(mu: Vec<f64>, log_sigma: &[f64]) -> Result<Self, GaussianError> {
        let sigma = log_sigma.iter().map(|l| l.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP).exp()).collect();
        Self::new(mu, sigma)
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn check_dims(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<(), GaussianError> {
    if q.dim() != p.dim() {
        return Err(GaussianError::InvalidArgument(format!("dimensions differ: {} vs {}", q.dim(), p.dim())));
    }
    Ok(())
}

/// `KL(q ‖ p)` for diagonal Gaussians.
pub fn kl_diag(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64, GaussianError> {
    check_dims(q, p)?;
    Ok((0..q.dim())
        .map(|d| {
            let (mq, sq, mp, sp) = (q.mu[d], q.sigma[d], p.mu[d], p.sigma[d]);
            (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// Partial derivatives of [`kl_diag`] with respect to each parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct KlGrad {
    pub mu_q: Vec<f64>,
    pub sigma_q: Vec<f64>,
    pub mu_p: Vec<f64>,
    pub sigma_p: Vec<f64>,
}

pub fn kl_diag_grad(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<KlGrad, GaussianError> {
    check_dims(q, p)?;
    let n = q.dim();
    let mut g = KlGrad {
        mu_q: vec![0.0; n],
        sigma_q: vec![0.0; n],
        mu_p: vec![0.0; n],
        sigma_p: vec![0.0; n],
    };
    for d in 0..n {
        let (mq, sq, mp, sp) = (q.mu[d], q.sigma[d], p.mu[d], p.sigma[d]);
        let diff = mq - mp;
        g.mu_q[d] = diff / (sp * sp);
        g.mu_p[d] = -diff / (sp * sp);
        g.sigma_q[d] = -1.0 / sq + sq / (sp * sp);
        g.sigma_p[d] = 1.0 / sp - (sq * sq + diff * diff) / (sp * sp * sp);
    }
    Ok(g)
}

/// `z = μ + σ ⊙ ε` with `ε ~ N(0, I)`; returns `(z, ε)`.
pub fn sample_diag<R: Rng + ?Sized>(g: &DiagonalGaussian, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = (0..g.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let z = g.mu.iter().zip(&g.sigma).zip(&eps).map(|((m, s), e)| m + s * e).collect();
    (z, eps)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mu: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, GaussianError> {
        let v = mu.len();
        if cov.nrows() != v || cov.ncols() != v {
            return Err(GaussianError::InvalidArgument(format!(
                "mean has {v} entries but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        check_symmetric(&cov, 1e-10)?;
        Ok(Self { mu, cov })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Adds `delta` to the covariance diagonal.
    pub fn shrunk(mut self, delta: f64) -> Self {
        for k in 0..self.dim() {
            self.cov[(k, k)] += delta;
        }
        self
    }
}

fn check_symmetric(s: &DMatrix<f64>, tol: f64) -> Result<(), GaussianError> {
    if s.nrows() != s.ncols() {
        return Err(GaussianError::InvalidArgument(format!("{}x{} matrix is not square", s.nrows(), s.ncols())));
    }
    let scale = 1.0 + s.amax();
    let asym = (s - s.transpose()).amax();
    if asym > tol * scale {
        return Err(GaussianError::InvalidArgument(format!("matrix asymmetric by {asym:.3e}")));
    }
    Ok(())
}

/// Row mean and unbiased covariance of an `M × v` sample matrix.
pub fn empirical_moments(samples: &DMatrix<f64>) -> Result<GaussianMoments, GaussianError> {
    let m = samples.nrows();
    if m < 2 {
        return Err(GaussianError::InsufficientSamples(m));
    }
    let mu = samples.row_mean().transpose();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (m as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianMoments { mu, cov })
}

/// Principal square root of a symmetric PSD matrix; negative eigenvalues
/// are clamped to zero.
pub fn matrix_sqrt_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>, GaussianError> {
    check_symmetric(s, 1e-6)?;
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&roots) * q.transpose())
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)`, clamped at 0.
pub fn frechet_distance(m1: &GaussianMoments, m2: &GaussianMoments) -> Result<f64, GaussianError> {
    if m1.dim() != m2.dim() {
        return Err(GaussianError::InvalidArgument(format!("dimensions differ: {} vs {}", m1.dim(), m2.dim())));
    }
    let mean_term = (&m1.mu - &m2.mu).norm_squared();
    let r1 = matrix_sqrt_psd(&m1.cov)?;
    let inner = &r1 * &m2.cov * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = matrix_sqrt_psd(&inner)?.trace();
    Ok((mean_term + m1.cov.trace() + m2.cov.trace() - 2.0 * cross).max(0.0))
}

/// Gradient of [`frechet_distance`] with respect to `m1.mu`.
pub fn frechet_grad_mu(m1: &GaussianMoments, m2: &GaussianMoments) -> Result<DVector<f64>, GaussianError> {
    if m1.dim() != m2.dim() {
        return Err(GaussianError::InvalidArgument(format!("dimensions differ: {} vs {}", m1.dim(), m2.dim())));
    }
    Ok((&m1.mu - &m2.mu) * 2.0)
}

/// Diagonal shrinkage used when the sample count does not exceed the
/// feature dimension.
pub const COV_SHRINKAGE: f64 = 1e-6;

/// Moments of a sample matrix, shrunk when rank deficiency is certain.
pub fn moments_for_distance(samples: &DMatrix<f64>) -> Result<GaussianMoments, GaussianError> {
    let m = empirical_moments(samples)?;
    Ok(if samples.nrows() <= samples.ncols() { m.shrunk(COV_SHRINKAGE) } else { m })
}

/// Fréchet distance between the Gaussians fitted to two sample sets.
pub fn frechet_from_samples(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64, GaussianError> {
    frechet_distance(&moments_for_distance(a)?, &moments_for_distance(b)?)
}

/// Diagonal-covariance Fréchet distance `‖μ_a − μ_b‖² + Σ (s_a − s_b)²` with
/// `s = √(var + δ)`, and its gradient with respect to every entry of `a`.
/// This is what the Fréchet training loss differentiates.
pub fn frechet_diag_with_grad(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>), GaussianError> {
    if a.ncols() != b.ncols() {
        return Err(GaussianError::InvalidArgument(format!("dimensions differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let (ma, mb) = (a.nrows(), b.nrows());
    if ma < 2 || mb < 2 {
        return Err(GaussianError::InsufficientSamples(ma.min(mb)));
    }
    let stats = |x: &DMatrix<f64>| {
        let mu = x.row_mean();
        let n = x.nrows() as f64;
        let var: Vec<f64> = (0..x.ncols())
            .map(|d| x.column(d).iter().map(|v| (v - mu[d]).powi(2)).sum::<f64>() / (n - 1.0))
            .collect();
        (mu, var)
    };
    let (mu_a, var_a) = stats(a);
    let (mu_b, var_b) = stats(b);
    let mut value = 0.0;
    let mut grad = DMatrix::zeros(ma, a.ncols());
    for d in 0..a.ncols() {
        let sa = (var_a[d] + COV_SHRINKAGE).sqrt();
        let sb = (var_b[d] + COV_SHRINKAGE).sqrt();
        let dm = mu_a[d] - mu_b[d];
        value += dm * dm + (sa - sb) * (sa - sb);
        for m in 0..ma {
            grad[(m, d)] = 2.0 * dm / ma as f64 + (sa - sb) / sa * 2.0 * (a[(m, d)] - mu_a[d]) / (ma as f64 - 1.0);
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g1(mu: f64, sigma: f64) -> DiagonalGaussian {
        DiagonalGaussian::new(vec![mu], vec![sigma]).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_diag(&g1(0.3, 1.2), &g1(0.3, 1.2)).unwrap(), 0.0);
        assert!((kl_diag(&g1(1.0, 1.0), &g1(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_diag(&g1(0.0, 2.0), &g1(0.0, 1.0)).unwrap();
        assert!((v - (2.0 - 0.5 - 2f64.ln())).abs() < 1e-12);
        assert!((v - 0.80685).abs() < 1e-5);
        assert!(kl_diag(&g1(0.0, 1.0), &DiagonalGaussian::standard(2)).is_err());
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| {
                DiagonalGaussian::new(
                    (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
                    (0..3).map(|_| rng.random_range(0.1..3.0)).collect(),
                )
                .unwrap()
            };
            let (q, p) = (mk(&mut rng), mk(&mut rng));
            assert!(kl_diag(&q, &p).unwrap() > 0.0);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let q = DiagonalGaussian::new(vec![0.4, -1.0], vec![0.7, 1.9]).unwrap();
        let p = DiagonalGaussian::new(vec![-0.2, 0.5], vec![1.3, 0.6]).unwrap();
        let g = kl_diag_grad(&q, &p).unwrap();
        let h = 1e-6;
        for d in 0..2 {
            let fd = |f: &dyn Fn(&mut DiagonalGaussian, &mut DiagonalGaussian, f64)| {
                let (mut q1, mut p1, mut q2, mut p2) = (q.clone(), p.clone(), q.clone(), p.clone());
                f(&mut q1, &mut p1, h);
                f(&mut q2, &mut p2, -h);
                (kl_diag(&q1, &p1).unwrap() - kl_diag(&q2, &p2).unwrap()) / (2.0 * h)
            };
            assert!((fd(&|q, _, e| q.mu[d] += e) - g.mu_q[d]).abs() < 1e-4);
            assert!((fd(&|_, p, e| p.mu[d] += e) - g.mu_p[d]).abs() < 1e-4);
            assert!((fd(&|q, _, e| q.sigma[d] += e) - g.sigma_q[d]).abs() < 1e-4);
            assert!((fd(&|_, p, e| p.sigma[d] += e) - g.sigma_p[d]).abs() < 1e-4);
        }
    }

    #[test]
    fn log_sigma_is_clamped() {
        let g = DiagonalGaussian::from_log_sigma(vec![0.0, 0.0], &[50.0, -50.0]).unwrap();
        assert_eq!(g.sigma, vec![10f64.exp(), (-10f64).exp()]);
        assert!(DiagonalGaussian::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn moments_examples() {
        let same = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let m = empirical_moments(&same).unwrap();
        assert_eq!(m.cov, DMatrix::zeros(2, 2));
        let two = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let m = empirical_moments(&two).unwrap();
        assert_eq!(m.mu[0], 1.0);
        assert_eq!(m.cov[(0, 0)], 2.0);
        assert!(matches!(
            empirical_moments(&DMatrix::zeros(1, 3)),
            Err(GaussianError::InsufficientSamples(1))
        ));
    }

    #[test]
    fn moments_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = DiagonalGaussian::new(vec![1.0, -2.0], vec![0.5, 2.0]).unwrap();
        let n = 10_000;
        let mut s = DMatrix::zeros(n, 2);
        for i in 0..n {
            let (z, _) = sample_diag(&g, &mut rng);
            s[(i, 0)] = z[0];
            s[(i, 1)] = z[1];
        }
        let m = empirical_moments(&s).unwrap();
        assert!((m.mu[0] - 1.0).abs() < 0.05 && (m.mu[1] + 2.0).abs() < 0.1);
        assert!((m.cov[(0, 0)] - 0.25).abs() < 0.05 * 0.25);
        assert!((m.cov[(1, 1)] - 4.0).abs() < 0.05 * 4.0);
        assert!(m.cov[(0, 1)].abs() < 0.05);
    }

    #[test]
    fn sqrt_examples() {
        let i = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&i).unwrap() - &i).amax() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0]));
        let r = matrix_sqrt_psd(&d).unwrap();
        assert!((r - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).amax() < 1e-14);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matrix_sqrt_psd(&asym).is_err());
    }

    #[test]
    fn sqrt_reconstructs_ill_conditioned() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for cond in [1.0f64, 1e3, 1e6] {
            let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
            let q = a.qr().q();
            let eig = DVector::from_fn(6, |k, _| cond.powf(-(k as f64) / 5.0));
            let s = &q * DMatrix::from_diagonal(&eig) * q.transpose();
            let s = (&s + s.transpose()) * 0.5;
            let r = matrix_sqrt_psd(&s).unwrap();
            assert!((&r * &r - &s).norm() <= 1e-8 * (1.0 + s.norm()));
        }
        let a = DMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let s = a.transpose() * a;
        let r = matrix_sqrt_psd(&s).unwrap();
        assert!((&r * &r - &s).norm() <= 1e-8 * (1.0 + s.norm()));
    }

    fn moments(mu: &[f64], cov: &[f64]) -> GaussianMoments {
        let v = mu.len();
        GaussianMoments::new(DVector::from_row_slice(mu), DMatrix::from_row_slice(v, v, cov)).unwrap()
    }

    #[test]
    fn frechet_examples() {
        let a = moments(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        let b = moments(&[3.0, 4.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-12);
        let c = moments(&[0.0], &[1.0]);
        let d = moments(&[0.0], &[9.0]);
        assert!((frechet_distance(&c, &d).unwrap() - 4.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &c).is_err());
    }

    #[test]
    fn frechet_symmetric_and_commuting_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x = DMatrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
            let y = DMatrix::from_fn(8, 3, |_, _| rng.random_range(-1.0..1.0));
            let (mx, my) = (empirical_moments(&x).unwrap(), empirical_moments(&y).unwrap());
            let (d1, d2) = (frechet_distance(&mx, &my).unwrap(), frechet_distance(&my, &mx).unwrap());
            assert!((d1 - d2).abs() < 1e-9 * (1.0 + d1));
        }
        let s1 = [0.5, 2.0, 1.5];
        let s2 = [1.0, 0.3, 4.0];
        let diag = |s: &[f64]| DMatrix::from_diagonal(&DVector::from_iterator(3, s.iter().map(|v| v * v)));
        let m1 = GaussianMoments::new(DVector::from_vec(vec![1.0, 0.0, 2.0]), diag(&s1)).unwrap();
        let m2 = GaussianMoments::new(DVector::from_vec(vec![0.0, 1.0, 2.0]), diag(&s2)).unwrap();
        let expect = 2.0 + s1.iter().zip(&s2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        assert!((frechet_distance(&m1, &m2).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn frechet_mu_gradient_matches_finite_differences() {
        let m1 = moments(&[0.3, -0.4], &[1.0, 0.2, 0.2, 0.5]);
        let m2 = moments(&[1.0, 0.1], &[0.7, -0.1, -0.1, 1.2]);
        let g = frechet_grad_mu(&m1, &m2).unwrap();
        let h = 1e-6;
        for d in 0..2 {
            let (mut p, mut m) = (m1.clone(), m1.clone());
            p.mu[d] += h;
            m.mu[d] -= h;
            let fd = (frechet_distance(&p, &m2).unwrap() - frechet_distance(&m, &m2).unwrap()) / (2.0 * h);
            assert!((fd - g[d]).abs() < 1e-4, "{fd} vs {}", g[d]);
        }
    }

    #[test]
    fn shrinkage_applies_when_rank_deficient() {
        let x = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 2.0, 1.0, 1.0, 0.0]);
        let m = moments_for_distance(&x).unwrap();
        let raw = empirical_moments(&x).unwrap();
        assert!((m.cov[(1, 1)] - raw.cov[(1, 1)] - COV_SHRINKAGE).abs() < 1e-15);
        assert!(frechet_from_samples(&x, &x).unwrap() < 1e-9);
    }

    #[test]
    fn diag_surrogate_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = DMatrix::from_fn(4, 5, |_, _| rng.random_range(0.0..1.0));
        let b = DMatrix::from_fn(3, 5, |_, _| rng.random_range(0.0..1.0));
        let (v, g) = frechet_diag_with_grad(&a, &b).unwrap();
        assert!(v > 0.0);
        let h = 1e-6;
        for m in 0..4 {
            for d in 0..5 {
                let (mut p, mut q) = (a.clone(), a.clone());
                p[(m, d)] += h;
                q[(m, d)] -= h;
                let fd = (frechet_diag_with_grad(&p, &b).unwrap().0 - frechet_diag_with_grad(&q, &b).unwrap().0) / (2.0 * h);
                assert!((fd - g[(m, d)]).abs() < 1e-6);
            }
        }
        assert!(frechet_diag_with_grad(&a, &a).unwrap().0.abs() < 1e-15);
    }

    #[test]
    fn sampling_properties() {
        let g = DiagonalGaussian::new(vec![0.5, -1.0], vec![1e-300, 1e-300]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_diag(&g, &mut rng).0, vec![0.5, -1.0]);
        let g = DiagonalGaussian::new(vec![1.0], vec![2.0]).unwrap();
        let a = sample_diag(&g, &mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_diag(&g, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.0[0], 1.0 + 2.0 * a.1[0]);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_diag(&g, &mut rng).0[0]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!((mean - 1.0).abs() < 0.02 && (sd - 2.0).abs() < 0.04);
    }
}
