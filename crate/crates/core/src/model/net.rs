use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::config::{ModelConfig, UNetConfig};
use super::params::Bound;
use super::ModelError;
use crate::engine::{spatial_dropout, Graph, Tensor, Var};
use crate::gaussian::{DiagonalGaussian, LOG_SIGMA_CLAMP};

/// Floor added to the softplus of the SSN variance head.
pub const SSN_SIGMA_FLOOR: f64 = 1e-4;

fn conv(b: &Bound, name: &str, x: Var) -> Result<Var, ModelError> {
    let g = b.graph();
    Ok(g.conv(x, b.var(&format!("{name}.w"))?, Some(b.var(&format!("{name}.b"))?))?)
}

fn block(b: &Bound, prefix: &str, x: Var, rate: f64, drop: &mut Option<&mut dyn RngCore>) -> Result<Var, ModelError> {
    let g = b.graph();
    let h = g.relu(conv(b, &format!("{prefix}.conv_a"), x)?)?;
    let h = g.relu(conv(b, &format!("{prefix}.conv_b"), h)?)?;
    Ok(match drop {
        Some(rng) => spatial_dropout(g, h, rate, &mut **rng, true)?,
        None => h,
    })
}

fn spatial_of(g: &Graph, x: Var) -> Vec<usize> {
    g.shape(x)[2..].to_vec()
}

/// Backbone feature map `x̃ = f_U(x)`: `[N, C_in, S..] -> [N, base, S..]`.
/// Spatial dropout follows every conv block when `dropout` carries a
/// generator and `cfg.dropout_rate > 0`.
pub fn unet_forward(b: &Bound, cfg: &UNetConfig, x: Var, mut dropout: Option<&mut dyn RngCore>) -> Result<Var, ModelError> {
    let g = b.graph();
    cfg.check_extents(&spatial_of(g, x))?;
    if cfg.dropout_rate == 0.0 {
        dropout = None;
    }
    let rate = cfg.dropout_rate;
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut h = x;
    for l in 0..=cfg.depth {
        h = block(b, &format!("unet.enc{l}"), h, rate, &mut dropout)?;
        if l < cfg.depth {
            skips.push(h);
            h = g.avg_pool(h, 2)?;
        }
    }
    for l in (0..cfg.depth).rev() {
        let name = format!("unet.dec{l}.up");
        let up = g.conv_transpose(h, b.var(&format!("{name}.w"))?, Some(b.var(&format!("{name}.b"))?))?;
        let cat = g.concat_channels(&[skips[l], up])?;
        h = block(b, &format!("unet.dec{l}"), cat, rate, &mut dropout)?;
    }
    Ok(h)
}

/// Mean and clamped log standard deviation of a diagonal Gaussian, as
/// graph nodes of shape `[N, dim]`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub log_sigma: Var,
}

fn encoder(b: &Bound, net: &str, cfg: &ModelConfig, input: Var) -> Result<LatentVars, ModelError> {
    let g = b.graph();
    let u = &cfg.unet;
    u.check_extents(&spatial_of(g, input))?;
    let mut h = input;
    for l in 0..=u.depth {
        h = block(b, &format!("{net}.enc{l}"), h, 0.0, &mut None)?;
        if l < u.depth {
            h = g.avg_pool(h, 2)?;
        }
    }
    let pooled = g.global_avg_pool(h)?;
    let out = g.linear(pooled, b.var(&format!("{net}.out.w"))?, Some(b.var(&format!("{net}.out.b"))?))?;
    let d = cfg.latent.dim;
    let mu = g.slice_channels(out, 0, d)?;
    let raw = g.slice_channels(out, d, d)?;
    let log_sigma = g.clamp(raw, -LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)?;
    Ok(LatentVars { mu, log_sigma })
}

/// Prior net `p_θ(z | x)`.
pub fn prior_forward(b: &Bound, cfg: &ModelConfig, x: Var) -> Result<LatentVars, ModelError> {
    encoder(b, "prior", cfg, x)
}

/// Posterior net `q_φ(z | x, y)`; `y` is a `{0, 1}` mask stacked as an extra
/// input channel.
pub fn posterior_forward(b: &Bound, cfg: &ModelConfig, x: Var, y: Var) -> Result<LatentVars, ModelError> {
    let g = b.graph();
    if g.with_value(y, |t| t.data().iter().any(|&v| v != 0.0 && v != 1.0)) {
        return Err(ModelError::InvalidArgument("posterior conditioning mask must be binary".into()));
    }
    let input = g.concat_channels(&[x, y])?;
    encoder(b, "posterior", cfg, input)
}

/// Current value of a latent node pair (first batch entry).
pub fn latent_value(g: &Graph, lv: LatentVars) -> Result<DiagonalGaussian, ModelError> {
    let mu = g.value(lv.mu);
    let d = g.shape(lv.mu)[1];
    let ls = g.value(lv.log_sigma);
    Ok(DiagonalGaussian::from_log_sigma(mu.data()[..d].to_vec(), &ls.data()[..d])?)
}

/// `z = μ + exp(log σ) ⊙ ε` with `ε` held constant, shape `[N, dim]`.
pub fn reparameterize(g: &Graph, lv: LatentVars, eps: &[f64]) -> Result<Var, ModelError> {
    let shape = g.shape(lv.mu);
    let e = g.constant(Tensor::new(shape, eps.to_vec())?);
    let sigma = g.exp(lv.log_sigma)?;
    Ok(g.add(lv.mu, g.mul(sigma, e)?)?)
}

/// Standard-normal draws for one latent sample.
pub fn draw_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `E(z)`: repeats each latent coordinate over `spatial`, giving
/// `[N, dim, S..]` constant maps.
pub fn expand_latent(g: &Graph, z: Var, spatial: &[usize]) -> Result<Var, ModelError> {
    let zs = g.shape(z);
    let mut unit = zs.clone();
    unit.extend(std::iter::repeat_n(1, spatial.len()));
    let r = g.reshape(z, &unit)?;
    let full = [zs, spatial.to_vec()].concat();
    Ok(g.broadcast(r, &full)?)
}

/// Final 1×1 convolution over `[x̃; E(z)]` (or over `x̃` alone for heads
/// without a latent).
pub fn head_logits(b: &Bound, xt: Var, z: Option<Var>) -> Result<Var, ModelError> {
    let g = b.graph();
    let input = match z {
        Some(z) => {
            let maps = expand_latent(g, z, &spatial_of(g, xt))?;
            g.concat_channels(&[xt, maps])?
        }
        None => xt,
    };
    conv(b, "head", input)
}

/// Foreground probability `σ(η₁ − η₀)` as `[N, 1, S..]`.
pub fn segmentation_probability(g: &Graph, eta: Var) -> Result<Var, ModelError> {
    let k = g.shape(eta)[1];
    if k != 2 {
        return Err(ModelError::InvalidArgument(format!("binary head expected, logits have {k} classes")));
    }
    Ok(g.sigmoid(logit_margin(g, eta)?)?)
}

/// `η₁ − η₀`.
pub fn logit_margin(g: &Graph, eta: Var) -> Result<Var, ModelError> {
    Ok(g.sub(g.slice_channels(eta, 1, 1)?, g.slice_channels(eta, 0, 1)?)?)
}

/// The three SSN heads: mean `[N, K, S..]`, positive diagonal variance
/// `[N, K, S..]`, and covariance factor `[N, K·R, S..]` where channel
/// `k·R + r` holds column `r` of the factor for class `k`.
#[derive(Clone, Copy, Debug)]
pub struct SsnHeads {
    pub mu: Var,
    pub sigma: Var,
    pub factor: Var,
}

pub fn ssn_forward(b: &Bound, xt: Var) -> Result<SsnHeads, ModelError> {
    let g = b.graph();
    let raw = conv(b, "ssn.sigma", xt)?;
    let sigma = g.add_scalar(g.softplus(raw)?, SSN_SIGMA_FLOOR)?;
    Ok(SsnHeads {
        mu: conv(b, "ssn.mu", xt)?,
        sigma,
        factor: conv(b, "ssn.factor", xt)?,
    })
}

/// One logit draw `η = μ + P ε₁ + √σ ⊙ ε₂`; `eps1` has `rank` entries,
/// `eps2` one entry per logit.
pub fn ssn_logits(g: &Graph, heads: SsnHeads, rank: usize, eps1: &[f64], eps2: &[f64]) -> Result<Var, ModelError> {
    let shape = g.shape(heads.mu);
    let k = shape[1];
    if eps1.len() != rank || eps2.len() != shape.iter().product::<usize>() {
        return Err(ModelError::InvalidArgument("noise lengths do not match the SSN heads".into()));
    }
    let sd = shape.len() - 2;
    let mut w = vec![0.0; k * k * rank];
    for c in 0..k {
        for (r, e) in eps1.iter().enumerate() {
            w[c * k * rank + c * rank + r] = *e;
        }
    }
    let wshape = [vec![k, k * rank], vec![1; sd]].concat();
    let wv = g.constant(Tensor::new(wshape, w)?);
    let low_rank = g.conv(heads.factor, wv, None)?;
    let sqrt_sigma = g.exp(g.scale(g.log(heads.sigma)?, 0.5)?)?;
    let e2 = g.constant(Tensor::new(shape, eps2.to_vec())?);
    let diag = g.mul(sqrt_sigma, e2)?;
    Ok(g.add(g.add(heads.mu, low_rank)?, diag)?)
}

/// Flattened logit law `N(μ, PPᵀ + diag(σ))` of one image; index
/// `k·S + s` addresses class `k` at spatial offset `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankGaussian {
    pub mu: Vec<f64>,
    /// `v × R`.
    pub factor: DMatrix<f64>,
    pub sigma_diag: Vec<f64>,
}

impl LowRankGaussian {
    pub fn from_heads(g: &Graph, heads: SsnHeads, rank: usize) -> Self {
        let mu = g.value(heads.mu).into_data();
        let sigma_diag = g.value(heads.sigma).into_data();
        let f = g.value(heads.factor);
        let k = g.shape(heads.mu)[1];
        let v = mu.len();
        let s = v / k;
        let fd = f.data();
        let factor = DMatrix::from_fn(v, rank, |row, r| {
            let (c, p) = (row / s, row % s);
            fd[(c * rank + r) * s + p]
        });
        Self { mu, factor, sigma_diag }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mut c = &self.factor * self.factor.transpose();
        for (i, s) in self.sigma_diag.iter().enumerate() {
            c[(i, i)] += s;
        }
        c
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let e1 = nalgebra::DVector::from_vec(draw_normal(self.rank(), rng));
        let lr = &self.factor * e1;
        self.mu
            .iter()
            .zip(&self.sigma_diag)
            .enumerate()
            .map(|(i, (m, s))| m + lr[i] + s.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::grad_check_entries;
    use crate::gaussian::kl_diag;
    use crate::model::config::ModelKind;
    use crate::model::params::{init_params, ModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let cfg = ModelConfig::new(ModelKind::ProbunetCe);
        let p = ModelParams::constant(&cfg, 0.0);
        let g = Graph::new();
        let b = p.bind(&g, false);
        let x = g.constant(image(&[1, 1, 32, 32], 1));
        let xt = unet_forward(&b, &cfg.unet, x, None).unwrap();
        assert_eq!(g.shape(xt), vec![1, 8, 32, 32]);
        assert!(g.value(xt).data().iter().all(|&v| v == 0.0));
        let prior = latent_value(&g, prior_forward(&b, &cfg, x).unwrap()).unwrap();
        assert_eq!(prior.mu, vec![0.0; 3]);
        assert_eq!(prior.sigma, vec![1.0; 3]);
    }

    #[test]
    fn bad_extents_name_the_multiple() {
        let cfg = ModelConfig::new(ModelKind::ProbunetCe);
        let p = ModelParams::constant(&cfg, 0.0);
        let g = Graph::new();
        let b = p.bind(&g, false);
        let x = g.constant(image(&[1, 1, 12, 12], 1));
        let err = unet_forward(&b, &cfg.unet, x, None).unwrap_err().to_string();
        assert!(err.contains("multiples of 8"), "{err}");
    }

    #[test]
    fn unet_gradient_matches_differences() {
        let mut cfg = ModelConfig::new(ModelKind::Mcdo);
        cfg.unet.depth = 1;
        cfg.unet.base_channels = 2;
        cfg.unet.dropout_rate = 0.0;
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let x = image(&[1, 1, 4, 4], 2);
        let name = "unet.enc0.conv_a.w";
        let err = grad_check_entries(
            |g, w| {
                let b = p.bind_with(g, name, w)?;
                let xv = g.constant(x.clone());
                let xt = unet_forward(&b, &cfg.unet, xv, None).map_err(ModelError::into_engine)?;
                g.sum(xt)
            },
            p.get(name).unwrap(),
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn expansion_repeats_and_its_adjoint_sums() {
        let g = Graph::new();
        let z = g.param(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let e = expand_latent(&g, z, &[4, 4]).unwrap();
        let v = g.value(e);
        assert_eq!(v.shape(), &[1, 3, 4, 4]);
        assert!(v.data()[16..32].iter().all(|&x| x == -2.0));
        let grads = g.backward(g.sum(e).unwrap()).unwrap();
        assert_eq!(grads.get(z).data(), &[16.0, 16.0, 16.0]);
    }

    #[test]
    fn head_ignores_latent_only_when_its_columns_vanish() {
        let cfg = ModelConfig::new(ModelKind::ProbunetCe);
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let g = Graph::new();
        let b = p.bind(&g, false);
        let xt = g.constant(image(&[1, 8, 8, 8], 4));
        let za = g.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 2.0]).unwrap());
        let zb = g.constant(Tensor::new(vec![1, 3], vec![1.0, -1.0, 0.0]).unwrap());
        let ea = g.value(head_logits(&b, xt, Some(za)).unwrap());
        let eb = g.value(head_logits(&b, xt, Some(zb)).unwrap());
        assert_eq!(ea.shape(), &[1, 2, 8, 8]);
        assert_ne!(ea, eb);

        let mut q = p.clone();
        let w = q.get_mut("head.w").unwrap();
        for o in 0..2 {
            for c in 8..11 {
                w.data_mut()[o * 11 + c] = 0.0;
            }
        }
        let g = Graph::new();
        let b = q.bind(&g, false);
        let xt = g.constant(image(&[1, 8, 8, 8], 4));
        let za = g.constant(Tensor::new(vec![1, 3], vec![0.0, 1.0, 2.0]).unwrap());
        let zb = g.constant(Tensor::new(vec![1, 3], vec![1.0, -1.0, 0.0]).unwrap());
        assert_eq!(
            g.value(head_logits(&b, xt, Some(za)).unwrap()),
            g.value(head_logits(&b, xt, Some(zb)).unwrap())
        );
    }

    #[test]
    fn zero_head_gives_bias_everywhere() {
        let cfg = ModelConfig::new(ModelKind::Mcdo);
        let mut p = ModelParams::constant(&cfg, 0.0);
        p.get_mut("head.b").unwrap().data_mut().copy_from_slice(&[0.25, -0.5]);
        let g = Graph::new();
        let b = p.bind(&g, false);
        let eta = g.value(head_logits(&b, g.constant(image(&[1, 8, 4, 4], 1)), None).unwrap());
        assert!(eta.data()[..16].iter().all(|&v| v == 0.25));
        assert!(eta.data()[16..].iter().all(|&v| v == -0.5));
    }

    #[test]
    fn sigmoid_of_margin_matches_two_class_softmax() {
        let g = Graph::new();
        let eta = g.constant(image(&[1, 2, 4, 4], 8).map(|v| 6.0 * v));
        let p = g.value(segmentation_probability(&g, eta).unwrap());
        let s = g.value(g.softmax_channels(eta).unwrap());
        for (a, b) in p.data().iter().zip(&s.data()[16..]) {
            assert!((a - b).abs() < 1e-12);
        }
        let tie = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(g.value(segmentation_probability(&g, tie).unwrap()).data().iter().all(|&v| v == 0.5));
        let three = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
        assert!(segmentation_probability(&g, three).is_err());
    }

    #[test]
    fn posterior_rejects_soft_masks_and_kl_gradient_checks() {
        let mut cfg = ModelConfig::new(ModelKind::ProbunetCe);
        cfg.unet.depth = 1;
        cfg.unet.base_channels = 2;
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(21));
        let x = image(&[1, 1, 4, 4], 6);
        let y = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
        {
            let g = Graph::new();
            let b = p.bind(&g, false);
            let soft = g.constant(y.map(|v| 0.5 * v));
            assert!(posterior_forward(&b, &cfg, g.constant(x.clone()), soft).is_err());
        }
        for name in ["posterior.enc0.conv_a.w", "prior.out.w", "posterior.out.b"] {
            let err = grad_check_entries(
                |g, w| {
                    let b = p.bind_with(g, name, w)?;
                    let xv = g.constant(x.clone());
                    let q = posterior_forward(&b, &cfg, xv, g.constant(y.clone())).map_err(ModelError::into_engine)?;
                    let pr = prior_forward(&b, &cfg, xv).map_err(ModelError::into_engine)?;
                    crate::model::loss::kl_node(g, q, pr).map_err(ModelError::into_engine)
                },
                p.get(name).unwrap(),
                1e-6,
                None,
            )
            .unwrap();
            assert!(err < 1e-3, "{name}: {err}");
        }
        let g = Graph::new();
        let b = p.bind(&g, false);
        let xv = g.constant(x);
        let q = latent_value(&g, posterior_forward(&b, &cfg, xv, g.constant(y)).unwrap()).unwrap();
        let pr = latent_value(&g, prior_forward(&b, &cfg, xv).unwrap()).unwrap();
        assert!(kl_diag(&q, &pr).unwrap() > 0.0);
    }

    #[test]
    fn ssn_zero_heads_and_shapes() {
        let cfg = ModelConfig::new(ModelKind::Ssn);
        let p = ModelParams::constant(&cfg, 0.0);
        let g = Graph::new();
        let b = p.bind(&g, false);
        let xt = g.constant(image(&[1, 8, 4, 4], 3));
        let heads = ssn_forward(&b, xt).unwrap();
        let law = LowRankGaussian::from_heads(&g, heads, cfg.ssn_rank);
        assert_eq!(law.dim(), 32);
        assert_eq!(law.factor.shape(), (32, 10));
        assert!(law.mu.iter().all(|&v| v == 0.0));
        assert!(law.factor.iter().all(|&v| v == 0.0));
        let s0 = crate::engine::softplus(0.0) + SSN_SIGMA_FLOOR;
        assert!(law.sigma_diag.iter().all(|&v| (v - s0).abs() < 1e-15));
    }

    #[test]
    fn ssn_draws_have_the_low_rank_covariance() {
        let mut cfg = ModelConfig::new(ModelKind::Ssn);
        cfg.ssn_rank = 3;
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let g = Graph::new();
        let b = p.bind(&g, false);
        let xt = g.constant(image(&[1, 8, 2, 2], 5).map(|v| 3.0 * v));
        let heads = ssn_forward(&b, xt).unwrap();
        let law = LowRankGaussian::from_heads(&g, heads, 3);
        let v = law.dim();
        assert_eq!(v, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let e1 = draw_normal(3, &mut rng);
                let e2 = draw_normal(v, &mut rng);
                g.value(ssn_logits(&g, heads, 3, &e1, &e2).unwrap()).into_data()
            })
            .collect();
        let mean: Vec<f64> = (0..v).map(|i| draws.iter().map(|d| d[i]).sum::<f64>() / n as f64).collect();
        let want = law.covariance();
        let scale = want.diagonal().max();
        for i in 0..v {
            for j in 0..v {
                let c = draws.iter().map(|d| (d[i] - mean[i]) * (d[j] - mean[j])).sum::<f64>() / (n - 1) as f64;
                assert!((c - want[(i, j)]).abs() <= 0.1 * scale, "({i},{j}): {c} vs {}", want[(i, j)]);
            }
        }
    }
}
