//! An untrained Probabilistic U-Net: prior and posterior latents for one
//! image, their KL, and the spread of prior samples.

use pulaski::data::{generate_dataset, SyntheticSpec};
use pulaski::engine::Graph;
use pulaski::gaussian::kl_diag;
use pulaski::metrics::{krippendorff_alpha, AlphaRegion, MaskSet, Provenance};
use pulaski::model::{
    image_tensor, init_params, latent_value, mask_tensor, posterior_forward, predict_masks, prior_forward, ModelConfig,
    ModelKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_dataset(&SyntheticSpec::default())?;
    let vol = &ds.volumes[0];
    let cfg = ModelConfig::new(ModelKind::PulaskiSinkhorn);
    let params = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    println!("{} parameter tensors, {} weights", params.len(), params.numel());

    let x = image_tensor(vol);
    let g = Graph::new();
    let b = params.bind(&g, false);
    let xv = g.constant(x.clone());
    let prior = latent_value(&g, prior_forward(&b, &cfg, xv)?)?;
    let y = g.constant(mask_tensor(&vol.annotations[0]));
    let post = latent_value(&g, posterior_forward(&b, &cfg, xv, y)?)?;
    println!("prior μ {:.3?}", prior.mu);
    println!("KL(posterior ‖ prior) = {:.4}", kl_diag(&post, &prior)?);

    let (_, masks) = predict_masks(&cfg, &params, &x, 10, &mut ChaCha8Rng::seed_from_u64(1))?;
    let set = MaskSet::new(masks, Provenance::Prediction)?;
    println!("Kα_all over 10 prior samples: {:.2}", krippendorff_alpha(&set, AlphaRegion::All)?.percent());
    Ok(())
}
