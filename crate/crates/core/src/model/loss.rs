use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, RngCore};

use super::config::{FtlParams, LossKind, LossSpec, ModelConfig};
use super::net::{
    draw_normal, head_logits, logit_margin, posterior_forward, prior_forward, reparameterize, segmentation_probability,
    ssn_forward, ssn_logits, unet_forward, LatentVars,
};
use super::params::Bound;
use super::ModelError;
use crate::engine::{Graph, Tensor, Var};
use crate::gaussian::frechet_diag_with_grad;
use crate::ot::{
    hausdorff_divergence_with_grad, sinkhorn_divergence_with_grad, squared_diameter, DiscreteMeasure, SinkhornConfig,
};
use crate::seg::{BinaryMask, ProbabilityMap};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Point dimension cap for the OT measures (16×16 in 2D).
pub const OT_MAX_POINT_DIM: usize = 256;
/// Feature dimension cap for the Fréchet loss (8×8 in 2D).
pub const FRECHET_MAX_DIM: usize = 64;
/// Smoothing constant of the Tversky index.
pub const TVERSKY_SMOOTH: f64 = 1.0;

/// `[1, 1, S..]` tensor holding a mask.
pub fn mask_tensor(m: &BinaryMask) -> Tensor {
    let shape = [vec![1, 1], m.shape().to_vec()].concat();
    Tensor::new(shape, m.to_f64()).expect("mask length matches its shape")
}

fn check_same(g: &Graph, p: Var, y: &Tensor) -> Result<(), ModelError> {
    let n: usize = g.shape(p).iter().product();
    if n != y.numel() {
        return Err(ModelError::InvalidArgument(format!(
            "prediction {:?} and mask {:?} differ in size",
            g.shape(p),
            y.shape()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy of probabilities `p` against mask `y`.
pub fn cross_entropy_node(g: &Graph, p: Var, y: &Tensor) -> Result<Var, ModelError> {
    check_same(g, p, y)?;
    let shape = g.shape(p);
    let y = g.constant(y.clone().reshaped(shape.clone())?);
    let one_minus_y = g.constant(Tensor::full(&shape, 1.0));
    let one_minus_y = g.sub(one_minus_y, y)?;
    let pc = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = g.log(pc)?;
    let log_q = g.log(g.add_scalar(g.scale(pc, -1.0)?, 1.0)?)?;
    let ll = g.add(g.mul(y, log_p)?, g.mul(one_minus_y, log_q)?)?;
    Ok(g.scale(g.mean(ll)?, -1.0)?)
}

pub fn cross_entropy_loss(p: &ProbabilityMap, y: &BinaryMask) -> Result<f64, ModelError> {
    if p.shape() != y.shape() {
        return Err(ModelError::InvalidArgument(format!("shapes {:?} and {:?} differ", p.shape(), y.shape())));
    }
    let g = Graph::new();
    let pv = g.constant(Tensor::from_vec(p.values().to_vec()));
    let v = cross_entropy_node(&g, pv, &Tensor::from_vec(y.to_f64()))?;
    Ok(g.item(v))
}

/// Focal Tversky loss `(1 − TI)^γ`.
pub fn focal_tversky_node(g: &Graph, p: Var, y: &Tensor, ftl: FtlParams) -> Result<Var, ModelError> {
    check_same(g, p, y)?;
    let pv = g.value(p);
    let yd = y.data().to_vec();
    let (mut tp, mut fneg, mut fpos) = (0.0, 0.0, 0.0);
    for (&pi, &yi) in pv.data().iter().zip(&yd) {
        tp += pi * yi;
        fneg += (1.0 - pi) * yi;
        fpos += pi * (1.0 - yi);
    }
    let s = TVERSKY_SMOOTH;
    let num = tp + s;
    let den = tp + ftl.alpha * fneg + ftl.beta * fpos + s;
    let ti = num / den;
    let gap = (1.0 - ti).max(0.0);
    let value = gap.powf(ftl.gamma);
    // d loss / d TI, finite at TI = 1 for γ ≥ 1.
    let dl_dti = if gap > 0.0 { -ftl.gamma * gap.powf(ftl.gamma - 1.0) } else { 0.0 };
    let shape = pv.shape().to_vec();
    let vjp = Box::new(move |up: &Tensor| {
        let u = up.item() * dl_dti;
        let grad = yd
            .iter()
            .map(|&yi| {
                let dden = yi - ftl.alpha * yi + ftl.beta * (1.0 - yi);
                u * (yi * den - num * dden) / (den * den)
            })
            .collect();
        vec![Tensor::new(shape.clone(), grad).expect("shape preserved")]
    });
    Ok(g.custom("focal_tversky", &[p], Tensor::scalar(value), vjp)?)
}

pub fn focal_tversky_loss(p: &ProbabilityMap, y: &BinaryMask, ftl: FtlParams) -> Result<f64, ModelError> {
    if p.shape() != y.shape() {
        return Err(ModelError::InvalidArgument(format!("shapes {:?} and {:?} differ", p.shape(), y.shape())));
    }
    let g = Graph::new();
    let pv = g.constant(Tensor::from_vec(p.values().to_vec()));
    let v = focal_tversky_node(&g, pv, &Tensor::from_vec(y.to_f64()), ftl)?;
    Ok(g.item(v))
}

/// `KL(q ‖ p)` between diagonal Gaussians held as graph nodes, summed over
/// latent dimensions (and batch entries).
pub fn kl_node(g: &Graph, q: LatentVars, p: LatentVars) -> Result<Var, ModelError> {
    let var_q = g.exp(g.scale(q.log_sigma, 2.0)?)?;
    let inv_var_p = g.exp(g.scale(p.log_sigma, -2.0)?)?;
    let dm = g.sub(q.mu, p.mu)?;
    let quad = g.mul(g.add(var_q, g.mul(dm, dm)?)?, inv_var_p)?;
    let terms = g.add(g.sub(p.log_sigma, q.log_sigma)?, g.scale(quad, 0.5)?)?;
    let terms = g.add_scalar(terms, -0.5)?;
    Ok(g.sum(terms)?)
}

/// Smallest factor dividing every extent that brings the product of the
/// pooled extents to at most `max_points`.
pub fn pool_factor(extents: &[usize], max_points: usize) -> usize {
    let limit = extents.iter().copied().max().unwrap_or(1);
    (1..=limit)
        .find(|&f| extents.iter().all(|e| e % f == 0) && extents.iter().map(|e| e / f).product::<usize>() <= max_points)
        .unwrap_or(limit)
}

fn max_dim_for(kind: LossKind) -> usize {
    if kind == LossKind::Frechet {
        FRECHET_MAX_DIM
    } else {
        OT_MAX_POINT_DIM
    }
}

/// Block means of every annotation at `factor`, one flattened row each.
pub fn pooled_annotations(ys: &[BinaryMask], factor: usize) -> Result<Vec<Vec<f64>>, ModelError> {
    let g = Graph::new();
    ys.iter()
        .map(|y| {
            let v = g.constant(mask_tensor(y));
            let v = if factor > 1 { g.avg_pool(v, factor)? } else { v };
            Ok(g.value(v).into_data())
        })
        .collect()
}

/// Sinkhorn settings for the PULASki loss on one image: `ε = blur² · diam²`
/// of the pooled annotation cloud (`blur²` when all annotations coincide).
/// It depends only on the annotations, so it is a constant of the loss.
pub fn pulaski_ot_config(ys: &[BinaryMask], spec: &LossSpec, base: &SinkhornConfig) -> Result<SinkhornConfig, ModelError> {
    let shape = ys.first().ok_or(ModelError::InsufficientAnnotations(0))?.shape();
    let f = pool_factor(shape, max_dim_for(spec.kind));
    let rows = pooled_annotations(ys, f)?;
    let beta = DiscreteMeasure::from_rows(&rows)?;
    let d2 = squared_diameter(&[&beta]);
    Ok(SinkhornConfig {
        epsilon: spec.blur * spec.blur * if d2 > 0.0 { d2 } else { 1.0 },
        ..*base
    })
}

/// Distance between the uniform measure over the prediction maps and the
/// uniform measure over `targets`, as a graph node differentiable in the maps.
/// Fréchet uses the diagonal-covariance surrogate.
pub fn distance_node(
    g: &Graph,
    maps: &[Var],
    targets: &[Vec<f64>],
    kind: LossKind,
    ot: &SinkhornConfig,
) -> Result<Var, ModelError> {
    let shape = g.shape(maps[0]);
    let v: usize = shape.iter().product();
    let mut pts = Vec::with_capacity(maps.len() * v);
    for &m in maps {
        g.with_value(m, |t| pts.extend_from_slice(t.data()));
    }
    let (value, grad) = match kind {
        LossKind::Sinkhorn | LossKind::Hausdorff => {
            let a = DiscreteMeasure::uniform(pts, v)?;
            let b = DiscreteMeasure::from_rows(targets)?;
            let r = if kind == LossKind::Sinkhorn {
                sinkhorn_divergence_with_grad(&a, &b, ot)?
            } else {
                hausdorff_divergence_with_grad(&a, &b, ot)?
            };
            (r.value, r.grad_a)
        }
        LossKind::Frechet => {
            let a = DMatrix::from_row_slice(maps.len(), v, &pts);
            let flat: Vec<f64> = targets.iter().flatten().copied().collect();
            let b = DMatrix::from_row_slice(targets.len(), v, &flat);
            let (val, grad) = frechet_diag_with_grad(&a, &b)?;
            let mut rows = Vec::with_capacity(maps.len() * v);
            for m in 0..maps.len() {
                rows.extend(grad.row(m).iter());
            }
            (val, rows)
        }
        other => return Err(ModelError::InvalidArgument(format!("{other:?} is not a distributional loss"))),
    };
    let vjp = Box::new(move |up: &Tensor| {
        let u = up.item();
        grad.chunks(v)
            .map(|c| Tensor::new(shape.clone(), c.iter().map(|x| u * x).collect()).expect("shape preserved"))
            .collect()
    });
    Ok(g.custom("distribution_distance", maps, Tensor::scalar(value), vjp)?)
}

/// Scalar loss and its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub recon: Var,
    pub kl: Option<Var>,
}

fn check_image(g: &Graph, x: &Tensor) -> Result<Var, ModelError> {
    if x.rank() < 3 || x.shape()[0] != 1 {
        return Err(ModelError::InvalidArgument(format!("expected one image shaped [1, C, S..], got {:?}", x.shape())));
    }
    Ok(g.constant(x.clone()))
}

fn mean_of(g: &Graph, terms: &[Var]) -> Result<Var, ModelError> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64)?)
}

fn with_kl(g: &Graph, recon: Var, kl: Var, beta: f64) -> Result<LossParts, ModelError> {
    Ok(LossParts {
        total: g.add(recon, g.scale(kl, beta)?)?,
        recon,
        kl: Some(kl),
    })
}

/// PULASki objective for one image and its `R ≥ 2` annotations:
/// `D(α, β) + β_KL · mean_m KL(q(z | x, y_{r_m}) ‖ p(z | x))`, where α is
/// uniform over `M` predicted maps (latent `m` conditioned on annotation
/// `r_m`) and β uniform over the annotations, both pooled.
pub fn pulaski_loss<R: Rng + ?Sized>(
    b: &Bound,
    cfg: &ModelConfig,
    x: &Tensor,
    ys: &[BinaryMask],
    ot: &SinkhornConfig,
    rng: &mut R,
) -> Result<LossParts, ModelError> {
    let spec = &cfg.loss;
    if !spec.kind.is_distributional() {
        return Err(ModelError::InvalidArgument(format!("{:?} is not a PULASki loss", spec.kind)));
    }
    if ys.len() < 2 {
        return Err(ModelError::InsufficientAnnotations(ys.len()));
    }
    let g = b.graph();
    let xv = check_image(g, x)?;
    let xt = unet_forward(b, &cfg.unet, xv, None)?;
    let prior = prior_forward(b, cfg, xv)?;
    let mut posteriors: BTreeMap<usize, (LatentVars, Var)> = BTreeMap::new();
    let factor = pool_factor(ys[0].shape(), max_dim_for(spec.kind));
    let mut maps = Vec::with_capacity(spec.m_samples);
    let mut kls = Vec::with_capacity(spec.m_samples);
    for m in 0..spec.m_samples {
        let r = if spec.fixed_pairing { m % ys.len() } else { rng.random_range(0..ys.len()) };
        let (q, kl) = match posteriors.get(&r) {
            Some(&e) => e,
            None => {
                let q = posterior_forward(b, cfg, xv, g.constant(mask_tensor(&ys[r])))?;
                let e = (q, kl_node(g, q, prior)?);
                posteriors.insert(r, e);
                e
            }
        };
        let eps = draw_normal(cfg.latent.dim, rng);
        let z = reparameterize(g, q, &eps)?;
        let p = segmentation_probability(g, head_logits(b, xt, Some(z))?)?;
        maps.push(if factor > 1 { g.avg_pool(p, factor)? } else { p });
        kls.push(kl);
    }
    let targets = pooled_annotations(ys, factor)?;
    let recon = distance_node(g, &maps, &targets, spec.kind, ot)?;
    with_kl(g, recon, mean_of(g, &kls)?, spec.beta)
}

/// Probabilistic U-Net ELBO for one (image, annotation) pair: mean CE or
/// FTL over `M` posterior draws plus `β · KL`.
pub fn probunet_loss<R: Rng + ?Sized>(
    b: &Bound,
    cfg: &ModelConfig,
    x: &Tensor,
    y: &BinaryMask,
    rng: &mut R,
) -> Result<LossParts, ModelError> {
    let spec = &cfg.loss;
    if !matches!(spec.kind, LossKind::Ce | LossKind::Ftl) {
        return Err(ModelError::InvalidArgument(format!("{:?} is not a pixelwise loss", spec.kind)));
    }
    let g = b.graph();
    let xv = check_image(g, x)?;
    let yt = mask_tensor(y);
    let xt = unet_forward(b, &cfg.unet, xv, None)?;
    let prior = prior_forward(b, cfg, xv)?;
    let q = posterior_forward(b, cfg, xv, g.constant(yt.clone()))?;
    let mut recons = Vec::with_capacity(spec.m_samples);
    for _ in 0..spec.m_samples {
        let z = reparameterize(g, q, &draw_normal(cfg.latent.dim, rng))?;
        let p = segmentation_probability(g, head_logits(b, xt, Some(z))?)?;
        recons.push(match spec.kind {
            LossKind::Ce => cross_entropy_node(g, p, &yt)?,
            _ => focal_tversky_node(g, p, &yt, spec.ftl)?,
        });
    }
    let recon = mean_of(g, &recons)?;
    with_kl(g, recon, kl_node(g, q, prior)?, spec.beta)
}

/// MC-dropout training loss: cross-entropy of one pass with dropout active
/// (inactive when `rng` is `None`).
pub fn mcdo_loss(
    b: &Bound,
    cfg: &ModelConfig,
    x: &Tensor,
    y: &BinaryMask,
    rng: Option<&mut dyn RngCore>,
) -> Result<LossParts, ModelError> {
    let g = b.graph();
    let xv = check_image(g, x)?;
    let xt = unet_forward(b, &cfg.unet, xv, rng)?;
    let p = segmentation_probability(g, head_logits(b, xt, None)?)?;
    let recon = cross_entropy_node(g, p, &mask_tensor(y))?;
    Ok(LossParts { total: recon, recon, kl: None })
}

/// SSN marginal negative log-likelihood `−log (1/M) Σ_m Π_i p_{η_m}(c_i = y_i)`
/// in log-sum-exp form.
pub fn ssn_loss<R: Rng + ?Sized>(
    b: &Bound,
    cfg: &ModelConfig,
    x: &Tensor,
    y: &BinaryMask,
    m_samples: usize,
    rng: &mut R,
) -> Result<LossParts, ModelError> {
    if m_samples == 0 {
        return Err(ModelError::InvalidArgument("ssn_loss needs at least one draw".into()));
    }
    let g = b.graph();
    let xv = check_image(g, x)?;
    let xt = unet_forward(b, &cfg.unet, xv, None)?;
    let heads = ssn_forward(b, xt)?;
    let v: usize = g.shape(heads.mu).iter().product();
    // log p(c = y) = −softplus(s·(η₁ − η₀)) with s = 1 − 2y.
    let signs: Vec<f64> = y.values().iter().map(|&yi| 1.0 - 2.0 * yi as f64).collect();
    let mut lls = Vec::with_capacity(m_samples);
    for _ in 0..m_samples {
        let e1 = draw_normal(cfg.ssn_rank, rng);
        let e2 = draw_normal(v, rng);
        let eta = ssn_logits(g, heads, cfg.ssn_rank, &e1, &e2)?;
        let margin = logit_margin(g, eta)?;
        let s = g.constant(Tensor::new(g.shape(margin), signs.clone())?);
        let nll = g.sum(g.softplus(g.mul(margin, s)?)?)?;
        lls.push(g.reshape(g.scale(nll, -1.0)?, &[1, 1])?);
    }
    let stacked = g.concat_channels(&lls)?;
    let lme = g.add_scalar(g.log_sum_exp(stacked)?, -(m_samples as f64).ln())?;
    let recon = g.scale(lme, -1.0)?;
    Ok(LossParts { total: recon, recon, kl: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{kl_diag, DiagonalGaussian};
    use crate::model::config::ModelKind;
    use crate::model::net::latent_value;
    use crate::model::params::{init_params, ModelParams};
    use crate::ot::hausdorff_divergence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(shape: &[usize], bits: &[u8]) -> BinaryMask {
        BinaryMask::new(shape.to_vec(), bits.to_vec()).unwrap()
    }

    fn pmap(shape: &[usize], v: &[f64]) -> ProbabilityMap {
        ProbabilityMap::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn tiny(kind: ModelKind) -> ModelConfig {
        let mut c = ModelConfig::new(kind);
        c.unet.depth = 2;
        c.unet.base_channels = 2;
        c.unet.dropout_rate = if kind == ModelKind::Mcdo { 0.3 } else { 0.0 };
        c.loss.m_samples = 2;
        c
    }

    fn image4(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn cross_entropy_fixed_points_and_loop_oracle() {
        let y = mask(&[2, 2], &[1, 0, 1, 0]);
        assert!(cross_entropy_loss(&pmap(&[2, 2], &[1.0, 0.0, 1.0, 0.0]), &y).unwrap() < 1e-6);
        let half = cross_entropy_loss(&pmap(&[2, 2], &[0.5; 4]), &y).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        let p = [0.9, 0.2, 0.35, 0.6];
        let want = -(0.9f64.ln() + 0.8f64.ln() + 0.35f64.ln() + 0.4f64.ln()) / 4.0;
        assert!((cross_entropy_loss(&pmap(&[2, 2], &p), &y).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn focal_tversky_limits_and_dice_case() {
        let y = mask(&[2, 2], &[1, 1, 0, 0]);
        let ftl = FtlParams::default();
        assert!(focal_tversky_loss(&pmap(&[2, 2], &[1.0, 1.0, 0.0, 0.0]), &y, ftl).unwrap() < 1e-12);
        let big = mask(&[5000], &[[1u8; 2500], [0u8; 2500]].concat());
        let anti = pmap(&[5000], &[[0.0; 2500], [1.0; 2500]].concat());
        let l = focal_tversky_loss(&anti, &big, ftl).unwrap();
        assert!(l > 0.999 && l <= 1.0, "{l}");
        // γ = 1, α = β = ½ is the soft Dice loss with smoothing 1.
        let dice = FtlParams { alpha: 0.5, beta: 0.5, gamma: 1.0 };
        let p = [0.8, 0.4, 0.3, 0.1];
        let tp = 0.8 + 0.4;
        let sum_p = 0.8 + 0.4 + 0.3 + 0.1;
        let want = 1.0 - (2.0 * tp + 2.0) / (sum_p + 2.0 + 2.0);
        assert!((focal_tversky_loss(&pmap(&[2, 2], &p), &y, dice).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn kl_node_matches_closed_form() {
        let g = Graph::new();
        let lv = |mu: Vec<f64>, ls: Vec<f64>| LatentVars {
            mu: g.constant(Tensor::new(vec![1, mu.len()], mu).unwrap()),
            log_sigma: g.constant(Tensor::new(vec![1, ls.len()], ls).unwrap()),
        };
        let q = lv(vec![0.0, 1.0], vec![2f64.ln(), 0.0]);
        let p = lv(vec![0.0, 0.0], vec![0.0, 0.0]);
        let got = g.item(kl_node(&g, q, p).unwrap());
        let want = kl_diag(
            &DiagonalGaussian::new(vec![0.0, 1.0], vec![2.0, 1.0]).unwrap(),
            &DiagonalGaussian::standard(2),
        )
        .unwrap();
        assert!((got - want).abs() < 1e-12 && (want - (2.0 - 0.5 - 2f64.ln() + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn pool_factor_respects_caps() {
        assert_eq!(pool_factor(&[32, 32], 256), 2);
        assert_eq!(pool_factor(&[32, 32], 64), 4);
        assert_eq!(pool_factor(&[4, 4], 256), 1);
        assert_eq!(pool_factor(&[16, 16, 16], 256), 4);
    }

    #[test]
    fn identical_measures_leave_only_the_kl() {
        let g = Graph::new();
        let rows = vec![vec![0.0, 1.0, 0.5, 0.25], vec![1.0, 0.0, 0.5, 0.75]];
        let maps: Vec<Var> = rows.iter().map(|r| g.constant(Tensor::new(vec![1, 1, 2, 2], r.clone()).unwrap())).collect();
        let ot = SinkhornConfig::default();
        for kind in [LossKind::Sinkhorn, LossKind::Hausdorff] {
            let d = g.item(distance_node(&g, &maps, &rows, kind, &ot).unwrap());
            assert!(d.abs() <= 1e-6, "{kind:?}: {d}");
        }
    }

    #[test]
    fn beta_zero_single_sample_identical_map_is_zero() {
        let g = Graph::new();
        let row = vec![vec![0.0, 1.0, 1.0, 0.0]];
        let maps = vec![g.constant(Tensor::new(vec![1, 1, 2, 2], row[0].clone()).unwrap())];
        let d = g.item(distance_node(&g, &maps, &row, LossKind::Hausdorff, &SinkhornConfig::default()).unwrap());
        assert_eq!(d, 0.0);
    }

    #[test]
    fn pulaski_loss_is_the_sum_of_its_primitives() {
        let mut cfg = tiny(ModelKind::PulaskiHausdorff);
        cfg.loss.beta = 0.7;
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let x = image4(1);
        let ys = vec![
            mask(&[4, 4], &[0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0]),
            mask(&[4, 4], &[0, 1, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 0, 1, 1, 1]),
        ];
        let ot = pulaski_ot_config(&ys, &cfg.loss, &SinkhornConfig::default()).unwrap();
        let g = Graph::new();
        let b = p.bind(&g, false);
        let parts = pulaski_loss(&b, &cfg, &x, &ys, &ot, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();

        // Replay the same draws by hand.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Graph::new();
        let hb = p.bind(&h, false);
        let xv = h.constant(x.clone());
        let prior = latent_value(&h, prior_forward(&hb, &cfg, xv).unwrap()).unwrap();
        let xt = unet_forward(&hb, &cfg.unet, xv, None).unwrap();
        let mut rows = Vec::new();
        let mut kl = 0.0;
        for _ in 0..2 {
            let r = rng.random_range(0..2);
            let qv = posterior_forward(&hb, &cfg, xv, h.constant(mask_tensor(&ys[r]))).unwrap();
            let q = latent_value(&h, qv).unwrap();
            kl += kl_diag(&q, &prior).unwrap() / 2.0;
            let eps = draw_normal(3, &mut rng);
            let z: Vec<f64> = (0..3).map(|d| q.mu[d] + q.sigma[d] * eps[d]).collect();
            let zv = h.constant(Tensor::new(vec![1, 3], z).unwrap());
            let pm = segmentation_probability(&h, head_logits(&hb, xt, Some(zv)).unwrap()).unwrap();
            rows.push(h.value(pm).into_data());
        }
        let a = DiscreteMeasure::from_rows(&rows).unwrap();
        let bm = DiscreteMeasure::from_rows(&ys.iter().map(BinaryMask::to_f64).collect::<Vec<_>>()).unwrap();
        let d = hausdorff_divergence(&a, &bm, &ot).unwrap();
        assert!((g.item(parts.recon) - d).abs() < 1e-10);
        assert!((g.item(parts.kl.unwrap()) - kl).abs() < 1e-10);
        assert!((g.item(parts.total) - (d + 0.7 * kl)).abs() < 1e-10);
    }

    #[test]
    fn pulaski_needs_two_annotations() {
        let cfg = tiny(ModelKind::PulaskiSinkhorn);
        let p = ModelParams::constant(&cfg, 0.0);
        let g = Graph::new();
        let b = p.bind(&g, false);
        let ys = vec![mask(&[4, 4], &[0; 16])];
        let r = pulaski_loss(&b, &cfg, &image4(1), &ys, &SinkhornConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(ModelError::InsufficientAnnotations(1))));
    }

    #[test]
    fn probunet_loss_composes_ce_and_kl() {
        let mut cfg = tiny(ModelKind::ProbunetCe);
        cfg.loss.m_samples = 1;
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(8));
        let x = image4(2);
        let y = mask(&[4, 4], &[1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0]);
        let g = Graph::new();
        let b = p.bind(&g, false);
        let parts = probunet_loss(&b, &cfg, &x, &y, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Graph::new();
        let hb = p.bind(&h, false);
        let xv = h.constant(x);
        let q = latent_value(&h, posterior_forward(&hb, &cfg, xv, h.constant(mask_tensor(&y))).unwrap()).unwrap();
        let prior = latent_value(&h, prior_forward(&hb, &cfg, xv).unwrap()).unwrap();
        let eps = draw_normal(3, &mut rng);
        let z: Vec<f64> = (0..3).map(|d| q.mu[d] + q.sigma[d] * eps[d]).collect();
        let xt = unet_forward(&hb, &cfg.unet, xv, None).unwrap();
        let zv = h.constant(Tensor::new(vec![1, 3], z).unwrap());
        let pm = h.value(segmentation_probability(&h, head_logits(&hb, xt, Some(zv)).unwrap()).unwrap());
        let ce = cross_entropy_loss(&pmap(&[4, 4], pm.data()), &y).unwrap();
        let want = ce + kl_diag(&q, &prior).unwrap();
        assert!((g.item(parts.total) - want).abs() < 1e-10);
    }

    #[test]
    fn ssn_single_draw_is_pixel_sum_cross_entropy() {
        let cfg = tiny(ModelKind::Ssn);
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(12));
        let x = image4(3);
        let y = mask(&[4, 4], &[1, 0, 0, 1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 0, 0]);
        let g = Graph::new();
        let b = p.bind(&g, false);
        let got = g.item(ssn_loss(&b, &cfg, &x, &y, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap().total);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = unet_forward(&b, &cfg.unet, g.constant(x), None).unwrap();
        let heads = ssn_forward(&b, xt).unwrap();
        let e1 = draw_normal(cfg.ssn_rank, &mut rng);
        let e2 = draw_normal(32, &mut rng);
        let eta = ssn_logits(&g, heads, cfg.ssn_rank, &e1, &e2).unwrap();
        let pm = g.value(segmentation_probability(&g, eta).unwrap());
        let want: f64 = pm
            .data()
            .iter()
            .zip(y.values())
            .map(|(&p, &yi)| -if yi == 1 { p.ln() } else { (1.0 - p).ln() })
            .sum();
        assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn ssn_three_draws_match_the_direct_product() {
        let cfg = tiny(ModelKind::Ssn);
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(13));
        let x = image4(7);
        let y = mask(&[4, 4], &[0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
        let g = Graph::new();
        let b = p.bind(&g, false);
        let got = g.item(ssn_loss(&b, &cfg, &x, &y, 3, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().total);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = unet_forward(&b, &cfg.unet, g.constant(x), None).unwrap();
        let heads = ssn_forward(&b, xt).unwrap();
        let mut mean_lik = 0.0;
        for _ in 0..3 {
            let e1 = draw_normal(cfg.ssn_rank, &mut rng);
            let e2 = draw_normal(32, &mut rng);
            let pm = g.value(segmentation_probability(&g, ssn_logits(&g, heads, cfg.ssn_rank, &e1, &e2).unwrap()).unwrap());
            let lik: f64 = pm.data().iter().zip(y.values()).map(|(&p, &yi)| if yi == 1 { p } else { 1.0 - p }).product();
            mean_lik += lik / 3.0;
        }
        assert!(mean_lik > 1e-300);
        assert!((got + mean_lik.ln()).abs() < 1e-9 * got.abs().max(1.0), "{got} vs {}", -mean_lik.ln());
    }

    #[test]
    fn mcdo_loss_without_dropout_is_plain_ce() {
        let cfg = tiny(ModelKind::Mcdo);
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(14));
        let y = mask(&[4, 4], &[1; 16]);
        let g = Graph::new();
        let b = p.bind(&g, false);
        let a = g.item(mcdo_loss(&b, &cfg, &image4(1), &y, None).unwrap().total);
        let c = g.item(mcdo_loss(&b, &cfg, &image4(1), &y, None).unwrap().total);
        assert_eq!(a, c);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = g.item(mcdo_loss(&b, &cfg, &image4(1), &y, Some(&mut rng)).unwrap().total);
        assert_ne!(a, d);
    }
}
