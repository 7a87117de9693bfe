use rand::{Rng, RngCore};

use super::config::{Family, ModelConfig};
use super::net::{
    draw_normal, head_logits, prior_forward, reparameterize, segmentation_probability, ssn_forward, ssn_logits,
    unet_forward,
};
use super::params::ModelParams;
use super::ModelError;
use crate::engine::{Graph, Tensor, Var};
use crate::seg::{otsu_binarize, BinaryMask, ProbabilityMap};

fn spatial(x: &Tensor) -> Result<Vec<usize>, ModelError> {
    if x.rank() < 3 || x.shape()[0] != 1 {
        return Err(ModelError::InvalidArgument(format!("expected one image shaped [1, C, S..], got {:?}", x.shape())));
    }
    Ok(x.shape()[2..].to_vec())
}

fn to_map(g: &Graph, p: Var, shape: &[usize]) -> Result<ProbabilityMap, ModelError> {
    ProbabilityMap::new(shape.to_vec(), g.value(p).into_data())
        .map_err(|e| ModelError::InvalidArgument(e.to_string()))
}

fn expect_family(cfg: &ModelConfig, want: Family, op: &str) -> Result<(), ModelError> {
    if cfg.kind.family() != want {
        return Err(ModelError::InvalidArgument(format!("{op} does not apply to a {} model", cfg.kind)));
    }
    Ok(())
}

/// `M` maps from latents drawn from the prior net `p_θ(z | x)`.
pub fn sample_from_prior<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    m: usize,
    rng: &mut R,
) -> Result<Vec<ProbabilityMap>, ModelError> {
    expect_family(cfg, Family::ProbUnet, "sample_from_prior")?;
    let shape = spatial(x)?;
    let g = Graph::new();
    let b = params.bind(&g, false);
    let xv = g.constant(x.clone());
    let xt = unet_forward(&b, &cfg.unet, xv, None)?;
    let prior = prior_forward(&b, cfg, xv)?;
    (0..m)
        .map(|_| {
            let z = reparameterize(&g, prior, &draw_normal(cfg.latent.dim, rng))?;
            to_map(&g, segmentation_probability(&g, head_logits(&b, xt, Some(z))?)?, &shape)
        })
        .collect()
}

/// `M` forward passes with spatial dropout active at `rate`.
pub fn mcdo_sample<R: RngCore>(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    rate: f64,
    m: usize,
    rng: &mut R,
) -> Result<Vec<ProbabilityMap>, ModelError> {
    expect_family(cfg, Family::Mcdo, "mcdo_sample")?;
    if !(rate > 0.0 && rate < 1.0) {
        return Err(ModelError::InvalidArgument(format!("dropout rate {rate} outside (0, 1)")));
    }
    let shape = spatial(x)?;
    let mut unet = cfg.unet.clone();
    unet.dropout_rate = rate;
    (0..m)
        .map(|_| {
            let g = Graph::new();
            let b = params.bind(&g, false);
            let xt = unet_forward(&b, &unet, g.constant(x.clone()), Some(rng as &mut dyn RngCore))?;
            to_map(&g, segmentation_probability(&g, head_logits(&b, xt, None)?)?, &shape)
        })
        .collect()
}

/// `M` logit draws from the SSN low-rank Gaussian.
pub fn ssn_sample<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    m: usize,
    rng: &mut R,
) -> Result<Vec<ProbabilityMap>, ModelError> {
    expect_family(cfg, Family::Ssn, "ssn_sample")?;
    let shape = spatial(x)?;
    let g = Graph::new();
    let b = params.bind(&g, false);
    let xt = unet_forward(&b, &cfg.unet, g.constant(x.clone()), None)?;
    let heads = ssn_forward(&b, xt)?;
    let v: usize = g.shape(heads.mu).iter().product();
    (0..m)
        .map(|_| {
            let e1 = draw_normal(cfg.ssn_rank, rng);
            let e2 = draw_normal(v, rng);
            let eta = ssn_logits(&g, heads, cfg.ssn_rank, &e1, &e2)?;
            to_map(&g, segmentation_probability(&g, eta)?, &shape)
        })
        .collect()
}

/// Sampler for any model family.
pub fn sample_maps<R: RngCore>(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    m: usize,
    rng: &mut R,
) -> Result<Vec<ProbabilityMap>, ModelError> {
    match cfg.kind.family() {
        Family::ProbUnet => sample_from_prior(cfg, params, x, m, rng),
        Family::Mcdo => mcdo_sample(cfg, params, x, cfg.unet.dropout_rate, m, rng),
        Family::Ssn => ssn_sample(cfg, params, x, m, rng),
    }
}

/// [`sample_maps`] followed by per-map Otsu binarization.
pub fn predict_masks<R: RngCore>(
    cfg: &ModelConfig,
    params: &ModelParams,
    x: &Tensor,
    m: usize,
    rng: &mut R,
) -> Result<(Vec<ProbabilityMap>, Vec<BinaryMask>), ModelError> {
    let maps = sample_maps(cfg, params, x, m, rng)?;
    let masks = maps
        .iter()
        .map(|p| otsu_binarize(p).map_err(|e| ModelError::InvalidArgument(e.to_string())))
        .collect::<Result<_, _>>()?;
    Ok((maps, masks))
}

/// Deterministic map: `z` at the prior mean, dropout off, or the SSN mean
/// logits.
pub fn most_probable_map(cfg: &ModelConfig, params: &ModelParams, x: &Tensor) -> Result<ProbabilityMap, ModelError> {
    let shape = spatial(x)?;
    let g = Graph::new();
    let b = params.bind(&g, false);
    let xv = g.constant(x.clone());
    let xt = unet_forward(&b, &cfg.unet, xv, None)?;
    let eta = match cfg.kind.family() {
        Family::ProbUnet => {
            let prior = prior_forward(&b, cfg, xv)?;
            head_logits(&b, xt, Some(prior.mu))?
        }
        Family::Mcdo => head_logits(&b, xt, None)?,
        Family::Ssn => ssn_forward(&b, xt)?.mu,
    };
    to_map(&g, segmentation_probability(&g, eta)?, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelKind;
    use crate::model::params::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(kind: ModelKind) -> (ModelConfig, ModelParams) {
        let mut c = ModelConfig::new(kind);
        c.unet.depth = 2;
        c.unet.base_channels = 4;
        let p = init_params(&c, &mut ChaCha8Rng::seed_from_u64(31));
        (c, p)
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 1, 8, 8], (0..64).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    fn spread(maps: &[ProbabilityMap]) -> f64 {
        let mut worst: f64 = 0.0;
        for a in maps {
            for b in maps {
                let d = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).sum::<f64>();
                worst = worst.max(d);
            }
        }
        worst
    }

    #[test]
    fn prior_samples_are_reproducible_open_unit_maps() {
        let (c, p) = tiny(ModelKind::PulaskiHausdorff);
        let x = image(1);
        let a = sample_from_prior(&c, &p, &x, 10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_from_prior(&c, &p, &x, 10, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(a.iter().flat_map(|m| m.values()).all(|&v| v > 0.0 && v < 1.0));
        assert!(spread(&a) > 0.0);
    }

    #[test]
    fn collapsed_prior_gives_the_most_probable_map() {
        let (c, mut p) = tiny(ModelKind::ProbunetCe);
        // log σ bias at the clamp floor and no weight on it: σ = e^-10.
        let w = p.get_mut("prior.out.w").unwrap();
        let fin = w.shape()[1];
        for v in &mut w.data_mut()[3 * fin..] {
            *v = 0.0;
        }
        for v in &mut p.get_mut("prior.out.b").unwrap().data_mut()[3..] {
            *v = -50.0;
        }
        let x = image(2);
        let maps = sample_from_prior(&c, &p, &x, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mp = most_probable_map(&c, &p, &x).unwrap();
        for m in &maps {
            for (a, b) in m.values().iter().zip(mp.values()) {
                assert!((a - b).abs() < 1e-3);
            }
        }
        assert_eq!(mp, most_probable_map(&c, &p, &x).unwrap());
    }

    #[test]
    fn mcdo_passes_vary_and_repeat_by_seed() {
        let (c, p) = tiny(ModelKind::Mcdo);
        let x = image(3);
        let a = mcdo_sample(&c, &p, &x, 0.3, 10, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let b = mcdo_sample(&c, &p, &x, 0.3, 10, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a, b);
        assert!(spread(&a) > 0.0);
        assert!(mcdo_sample(&c, &p, &x, 0.0, 2, &mut ChaCha8Rng::seed_from_u64(8)).is_err());
        assert!(sample_from_prior(&c, &p, &x, 1, &mut ChaCha8Rng::seed_from_u64(8)).is_err());
    }

    #[test]
    fn tiny_dropout_rate_keeps_passes_identical() {
        let (c, p) = tiny(ModelKind::Mcdo);
        let maps = mcdo_sample(&c, &p, &image(4), 1e-12, 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(spread(&maps), 0.0);
    }

    #[test]
    fn ssn_samples_vary() {
        let (c, p) = tiny(ModelKind::Ssn);
        let maps = sample_maps(&c, &p, &image(5), 3, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert!(spread(&maps) > 0.0);
        assert_eq!(maps[0].shape(), &[8, 8]);
    }
}
