use serde::{Deserialize, Serialize};

use super::ModelError;

/// Backbone U-Net shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub spatial_dims: usize,
    /// Number of 2× downsampling steps.
    pub depth: usize,
    pub base_channels: usize,
    pub n_classes: usize,
    /// Spatial dropout after every conv block; nonzero only for MC dropout.
    pub dropout_rate: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            spatial_dims: 2,
            depth: 3,
            base_channels: 8,
            n_classes: 2,
            dropout_rate: 0.0,
        }
    }
}

impl UNetConfig {
    /// Channel count at level `l` (level `depth` is the bottleneck).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(2..=3).contains(&self.spatial_dims) {
            return Err(ModelError::InvalidArgument(format!("spatial_dims must be 2 or 3, got {}", self.spatial_dims)));
        }
        if self.depth == 0 || self.base_channels == 0 {
            return Err(ModelError::InvalidArgument("depth and base_channels must be positive".into()));
        }
        if self.n_classes != 2 {
            return Err(ModelError::InvalidArgument(format!(
                "only binary segmentation (n_classes = 2) is supported, got {}",
                self.n_classes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidArgument(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Checks that `extents` match `spatial_dims` and are divisible by `2^depth`.
    pub fn check_extents(&self, extents: &[usize]) -> Result<(), ModelError> {
        let multiple = 1usize << self.depth;
        if extents.len() != self.spatial_dims || extents.iter().any(|&e| e == 0 || e % multiple != 0) {
            return Err(ModelError::InvalidArgument(format!(
                "input extents {extents:?} must be {}-D and multiples of {multiple} (2^depth)",
                self.spatial_dims
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatentSpec {
    pub dim: usize,
}

impl Default for LatentSpec {
    fn default() -> Self {
        Self { dim: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Ce,
    Ftl,
    Sinkhorn,
    Hausdorff,
    Frechet,
    /// Marginal log-likelihood of the low-rank logit model.
    SsnNll,
}

impl LossKind {
    pub fn is_distributional(self) -> bool {
        matches!(self, Self::Sinkhorn | Self::Hausdorff | Self::Frechet)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtlParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for FtlParams {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            gamma: 4.0 / 3.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Weight of the KL regularizer.
    pub beta: f64,
    /// Latent draws (or SSN logit draws) per training unit.
    pub m_samples: usize,
    pub ftl: FtlParams,
    /// Entropic blur: ε = blur² · (squared diameter of the pooled annotations).
    pub blur: f64,
    /// Condition latent draw `m` on annotation `m mod R` instead of a
    /// uniformly drawn one.
    pub fixed_pairing: bool,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Hausdorff,
            beta: 1.0,
            m_samples: 4,
            ftl: FtlParams::default(),
            blur: crate::ot::DEFAULT_BLUR,
            fixed_pairing: false,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(ModelError::InvalidArgument(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.m_samples == 0 {
            return Err(ModelError::InvalidArgument("m_samples must be at least 1".into()));
        }
        if self.kind == LossKind::Frechet && self.m_samples < 2 {
            return Err(ModelError::InvalidArgument("the Fréchet loss needs m_samples >= 2".into()));
        }
        if !(self.blur > 0.0) {
            return Err(ModelError::InvalidArgument(format!("blur must be positive, got {}", self.blur)));
        }
        let f = self.ftl;
        if !(f.alpha >= 0.0 && f.beta >= 0.0 && f.gamma > 0.0) {
            return Err(ModelError::InvalidArgument(format!("invalid focal Tversky parameters {f:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    PulaskiSinkhorn,
    PulaskiHausdorff,
    PulaskiFrechet,
    ProbunetCe,
    ProbunetFtl,
    Mcdo,
    Ssn,
}

/// Which heads sit on top of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    /// Prior and posterior encoders plus latent injection.
    ProbUnet,
    Mcdo,
    Ssn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        Self::PulaskiSinkhorn,
        Self::PulaskiHausdorff,
        Self::PulaskiFrechet,
        Self::ProbunetCe,
        Self::ProbunetFtl,
        Self::Mcdo,
        Self::Ssn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::PulaskiSinkhorn => "pulaski-sinkhorn",
            Self::PulaskiHausdorff => "pulaski-hausdorff",
            Self::PulaskiFrechet => "pulaski-frechet",
            Self::ProbunetCe => "probunet-ce",
            Self::ProbunetFtl => "probunet-ftl",
            Self::Mcdo => "mcdo",
            Self::Ssn => "ssn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn family(self) -> Family {
        match self {
            Self::Mcdo => Family::Mcdo,
            Self::Ssn => Family::Ssn,
            _ => Family::ProbUnet,
        }
    }

    pub fn loss_kind(self) -> LossKind {
        match self {
            Self::PulaskiSinkhorn => LossKind::Sinkhorn,
            Self::PulaskiHausdorff => LossKind::Hausdorff,
            Self::PulaskiFrechet => LossKind::Frechet,
            Self::ProbunetCe | Self::Mcdo => LossKind::Ce,
            Self::ProbunetFtl => LossKind::Ftl,
            Self::Ssn => LossKind::SsnNll,
        }
    }

    /// PULASki variants consume all annotations of an image at once; the
    /// baselines see every (image, annotation) pair as its own sample.
    pub fn trains_on_images(self) -> bool {
        self.loss_kind().is_distributional()
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_SSN_RANK: usize = 10;
pub const DEFAULT_MCDO_RATE: f64 = 0.3;

/// Everything needed to build, train and sample one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub unet: UNetConfig,
    pub latent: LatentSpec,
    pub loss: LossSpec,
    pub ssn_rank: usize,
    pub in_channels: usize,
}

impl ModelConfig {
    /// Defaults for `kind`: the loss kind follows the model, MC dropout gets
    /// rate 0.3.
    pub fn new(kind: ModelKind) -> Self {
        let mut unet = UNetConfig::default();
        if kind == ModelKind::Mcdo {
            unet.dropout_rate = DEFAULT_MCDO_RATE;
        }
        Self {
            kind,
            unet,
            latent: LatentSpec::default(),
            loss: LossSpec {
                kind: kind.loss_kind(),
                ..LossSpec::default()
            },
            ssn_rank: DEFAULT_SSN_RANK,
            in_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.unet.validate()?;
        self.loss.validate()?;
        if self.loss.kind != self.kind.loss_kind() {
            return Err(ModelError::InvalidArgument(format!(
                "{} trains with the {:?} loss, config says {:?}",
                self.kind,
                self.kind.loss_kind(),
                self.loss.kind
            )));
        }
        if self.latent.dim == 0 || self.ssn_rank == 0 || self.in_channels == 0 {
            return Err(ModelError::InvalidArgument("latent dim, ssn_rank and in_channels must be positive".into()));
        }
        if self.kind == ModelKind::Mcdo && self.unet.dropout_rate <= 0.0 {
            return Err(ModelError::InvalidArgument("mcdo needs dropout_rate in (0, 1)".into()));
        }
        if self.kind != ModelKind::Mcdo && self.unet.dropout_rate != 0.0 {
            return Err(ModelError::InvalidArgument(format!("dropout_rate is only used by mcdo (got {})", self.unet.dropout_rate)));
        }
        Ok(())
    }
}
