//! Closed forms the latent model relies on: diagonal KL and the Fréchet
//! distance between Gaussians.

use nalgebra::{DMatrix, DVector};
use pulaski::gaussian::{frechet_distance, kl_diag, DiagonalGaussian, GaussianMoments};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let q = DiagonalGaussian::new(vec![1.0], vec![0.5])?;
    let p = DiagonalGaussian::standard(1);
    println!("KL(N(1, 0.5²) ‖ N(0, 1)) = {:.5}", kl_diag(&q, &p)?);

    let a = GaussianMoments::new(DVector::from_vec(vec![0.0, 0.0]), DMatrix::identity(2, 2))?;
    let b = GaussianMoments::new(DVector::from_vec(vec![3.0, 4.0]), DMatrix::identity(2, 2))?;
    let c = GaussianMoments::new(DVector::zeros(2), DMatrix::identity(2, 2) * 4.0)?;
    println!("Fréchet, shifted means:   {:.6}", frechet_distance(&a, &b)?);
    println!("Fréchet, scaled variance: {:.6}", frechet_distance(&a, &c)?);
    Ok(())
}
