use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::data::{PatchSpec, SyntheticSpec};
use crate::model::{FtlParams, ModelConfig, ModelKind, TrainConfig};

/// Model choice plus optional overrides of the per-kind defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub dims: usize,
    pub depth: Option<usize>,
    pub base_channels: Option<usize>,
    pub latent_dim: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub ssn_rank: Option<usize>,
    pub beta: Option<f64>,
    pub m_samples: Option<usize>,
    pub blur: Option<f64>,
    pub fixed_pairing: Option<bool>,
    pub ftl: Option<FtlParams>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::PulaskiHausdorff,
            dims: 2,
            depth: None,
            base_channels: None,
            latent_dim: None,
            dropout_rate: None,
            ssn_rank: None,
            beta: None,
            m_samples: None,
            blur: None,
            fixed_pairing: None,
            ftl: None,
        }
    }
}

impl ModelSection {
    pub fn resolve(&self) -> ModelConfig {
        let mut c = ModelConfig::new(self.kind);
        c.unet.spatial_dims = self.dims;
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.unet.depth, self.depth);
        set(&mut c.unet.base_channels, self.base_channels);
        set(&mut c.latent.dim, self.latent_dim);
        set(&mut c.ssn_rank, self.ssn_rank);
        set(&mut c.loss.m_samples, self.m_samples);
        c.unet.dropout_rate = self.dropout_rate.unwrap_or(c.unet.dropout_rate);
        c.loss.beta = self.beta.unwrap_or(c.loss.beta);
        c.loss.blur = self.blur.unwrap_or(c.loss.blur);
        c.loss.fixed_pairing = self.fixed_pairing.unwrap_or(c.loss.fixed_pairing);
        c.loss.ftl = self.ftl.unwrap_or(c.loss.ftl);
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory written by `gen`; without it the synthetic spec is
    /// generated in memory.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Train on patches and stitch patch predictions by overlap averaging.
    pub patch: Option<PatchSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub m: usize,
    /// Defaults to `<out>/checkpoint.plsk`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { m: 10, checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Method directories of `<image id>/mask_*.pvol`; defaults to the
    /// directory `sample` writes for the configured model.
    pub predictions: Vec<PathBuf>,
    pub roo_maps: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { predictions: vec![], roo_maps: true }
    }
}

/// Everything a command needs. The top-level `seed` drives initialization,
/// batching and sampling; the dataset keeps its own `data.synthetic.seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig { epochs: 50, ..TrainConfig::default() },
            sample: SampleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML, applies `key.path=value` overrides, then validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Validation(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e| CliError::Validation(format!("config: {e}")))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.resolve()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let v = |e: String| CliError::Validation(e);
        self.data.synthetic.validate().map_err(|e| v(e.to_string()))?;
        let m = self.model_config();
        m.validate().map_err(|e| v(e.to_string()))?;
        self.train.validate().map_err(|e| v(e.to_string()))?;
        if self.data.path.is_none() {
            let extents = match &self.data.patch {
                Some(p) => {
                    p.validate(&self.data.synthetic.extents).map_err(|e| v(e.to_string()))?;
                    p.extent.clone()
                }
                None => self.data.synthetic.extents.clone(),
            };
            m.unet.check_extents(&extents).map_err(|e| v(e.to_string()))?;
        }
        if self.sample.m == 0 {
            return Err(v("sample.m must be positive".into()));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.sample.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.plsk"))
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.out.join("predictions").join(self.model.kind.name())
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("override {spec:?} is not key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("override {key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
