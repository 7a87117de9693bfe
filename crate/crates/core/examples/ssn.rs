//! Low-rank-plus-diagonal logit distribution of a Stochastic Segmentation
//! Network: empirical covariance of reparameterized draws vs the model's.

use pulaski::data::{generate_dataset, SyntheticSpec};
use pulaski::engine::Graph;
use pulaski::model::{image_tensor, init_params, ssn_forward, unet_forward, LowRankGaussian, ModelConfig, ModelKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_dataset(&SyntheticSpec { extents: vec![16, 16], ..SyntheticSpec::default() })?;
    let mut cfg = ModelConfig::new(ModelKind::Ssn);
    cfg.unet.depth = 2;
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2));

    let g = Graph::new();
    let b = params.bind(&g, false);
    let xt = unet_forward(&b, &cfg.unet, g.constant(image_tensor(&ds.volumes[0])), None)?;
    let dist = LowRankGaussian::from_heads(&g, ssn_forward(&b, xt)?, cfg.ssn_rank);
    println!("logit dim {} (2 classes × pixels), rank {}", dist.dim(), dist.rank());

    let cov = dist.covariance();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 4000;
    let (i, j) = (0, 1);
    let (mut si, mut sj, mut sij) = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let s = dist.sample(&mut rng);
        let (a, c) = (s[i] - dist.mu[i], s[j] - dist.mu[j]);
        si += a * a;
        sj += c * c;
        sij += a * c;
    }
    let n = n as f64;
    println!("Σ[0,0] model {:.4} empirical {:.4}", cov[(i, i)], si / n);
    println!("Σ[1,1] model {:.4} empirical {:.4}", cov[(j, j)], sj / n);
    println!("Σ[0,1] model {:.4} empirical {:.4}", cov[(i, j)], sij / n);
    Ok(())
}
