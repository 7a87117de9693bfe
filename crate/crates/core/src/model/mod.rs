//! Probabilistic U-Net family: the backbone, prior/posterior encoders,
//! latent injection, the PULASki and baseline losses, sampling, training
//! and checkpoints.

mod checkpoint;
mod config;
mod loss;
mod net;
mod params;
mod sample;
mod train;

use thiserror::Error;

use crate::data::DataError;
use crate::engine::EngineError;
use crate::gaussian::GaussianError;
use crate::ot::OtError;

pub use checkpoint::{load_checkpoint, save_params, save_state, Checkpoint, CHECKPOINT_MAGIC};
pub use config::{
    Family, FtlParams, LatentSpec, LossKind, LossSpec, ModelConfig, ModelKind, UNetConfig, DEFAULT_MCDO_RATE,
    DEFAULT_SSN_RANK,
};
pub use loss::{
    cross_entropy_loss, cross_entropy_node, distance_node, focal_tversky_loss, focal_tversky_node, kl_node, mask_tensor,
    mcdo_loss, pool_factor, pooled_annotations, probunet_loss, pulaski_loss, pulaski_ot_config, ssn_loss, LossParts,
    FRECHET_MAX_DIM, OT_MAX_POINT_DIM, PROB_CLAMP, TVERSKY_SMOOTH,
};
pub use net::{
    draw_normal, expand_latent, head_logits, latent_value, logit_margin, posterior_forward, prior_forward,
    reparameterize, segmentation_probability, ssn_forward, ssn_logits, unet_forward, LatentVars, LowRankGaussian,
    SsnHeads, SSN_SIGMA_FLOOR,
};
pub use params::{init_params, layer_specs, Bound, LayerKind, LayerSpec, ModelParams};
pub use sample::{mcdo_sample, most_probable_map, predict_masks, sample_from_prior, sample_maps, ssn_sample};
pub use train::{foreground_fraction, image_tensor, set_prior_head_bias, train, EpochRecord, TrainConfig, TrainOutcome, TrainState, Trainer, Unit};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("distributional losses need at least 2 annotations, got {0}")]
    InsufficientAnnotations(usize),
    #[error("non-finite {loss} loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: String,
        detail: String,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

impl ModelError {
    /// Engine-level view, for closures that must return [`EngineError`]
    /// (gradient checks).
    pub fn into_engine(self) -> EngineError {
        match self {
            Self::Engine(e) => e,
            other => EngineError::InvalidArgument(other.to_string()),
        }
    }
}

impl From<ModelError> for EngineError {
    fn from(e: ModelError) -> Self {
        e.into_engine()
    }
}
