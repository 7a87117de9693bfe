//! `PLSK1` checkpoints: the magic, a little-endian `u32` length, a UTF-8
//! JSON manifest, then every tensor as raw `f64` little-endian values in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use super::train::{EpochRecord, TrainConfig, TrainState};
use super::ModelError;
use crate::data::{write_atomic, DataError};
use crate::engine::{AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"PLSK1";

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";
const BEST: &str = "best/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainMeta {
    config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    best_val: Option<f64>,
    best_epoch: usize,
    history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainMeta>,
}

/// A loaded checkpoint. `params` are the weights to sample with (the best
/// validation snapshot for training runs); `train` is present when the file
/// can resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub train: Option<(TrainConfig, TrainState)>,
}

impl Checkpoint {
    pub fn from_params(model: &ModelConfig, params: &ModelParams) -> Self {
        Self { model: model.clone(), params: params.clone(), train: None }
    }

    pub fn from_state(model: &ModelConfig, cfg: &TrainConfig, state: &TrainState) -> Self {
        Self { model: model.clone(), params: state.best.clone(), train: Some((cfg.clone(), state.clone())) }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(String, &Tensor)> = vec![];
        let mut meta = None;
        match &self.train {
            None => named.extend(self.params.names().iter().cloned().zip(self.params.tensors())),
            Some((cfg, st)) => {
                let names = st.params.names();
                named.extend(names.iter().cloned().zip(st.params.tensors()));
                named.extend(names.iter().map(|n| format!("{ADAM_M}{n}")).zip(&st.adam.m));
                named.extend(names.iter().map(|n| format!("{ADAM_V}{n}")).zip(&st.adam.v));
                named.extend(st.best.names().iter().map(|n| format!("{BEST}{n}")).zip(st.best.tensors()));
                meta = Some(TrainMeta {
                    config: cfg.clone(),
                    epoch: st.epoch,
                    adam_step: st.adam.step,
                    best_val: st.best_val,
                    best_epoch: st.best_epoch,
                    history: st.history.clone(),
                });
            }
        }
        let manifest = Manifest {
            model: self.model.clone(),
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec(), dtype: "f64".into() })
                .collect(),
            train: meta,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let rest = bytes.strip_prefix(CHECKPOINT_MAGIC).ok_or("missing PLSK1 magic")?;
        let (len, rest) = rest.split_first_chunk::<4>().ok_or("truncated manifest length")?;
        let len = u32::from_le_bytes(*len) as usize;
        if rest.len() < len {
            return Err("truncated manifest".into());
        }
        let manifest: Manifest = serde_json::from_slice(&rest[..len]).map_err(|e| format!("manifest: {e}"))?;
        let mut payload = &rest[len..];
        let mut read = |e: &TensorEntry| -> Result<Tensor, String> {
            if e.dtype != "f64" {
                return Err(format!("tensor {}: unsupported dtype {}", e.name, e.dtype));
            }
            let n: usize = e.shape.iter().product();
            if payload.len() < 8 * n {
                return Err(format!("tensor {}: truncated payload", e.name));
            }
            let (head, tail) = payload.split_at(8 * n);
            payload = tail;
            let data = head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Tensor::new(e.shape.clone(), data).map_err(|err| format!("tensor {}: {err}", e.name))
        };
        let mut groups: [Vec<(String, Tensor)>; 4] = Default::default();
        for e in &manifest.tensors {
            let t = read(e)?;
            let (slot, name) = [ADAM_M, ADAM_V, BEST]
                .iter()
                .enumerate()
                .find_map(|(i, p)| e.name.strip_prefix(p).map(|n| (i + 1, n)))
                .unwrap_or((0, &e.name));
            groups[slot].push((name.to_string(), t));
        }
        if !payload.is_empty() {
            return Err(format!("{} trailing payload bytes", payload.len()));
        }
        let [params, m, v, best] = groups;
        let params = ModelParams::new(params).map_err(|e| e.to_string())?;
        params.check_layout(&manifest.model).map_err(|e| e.to_string())?;
        let Some(meta) = manifest.train else {
            return Ok(Self { model: manifest.model, params, train: None });
        };
        let aligned = |g: &[(String, Tensor)], what: &str| -> Result<Vec<Tensor>, String> {
            if g.len() != params.len() || g.iter().zip(params.names()).any(|((a, _), b)| a != b) {
                return Err(format!("{what} tensors do not match the parameter layout"));
            }
            Ok(g.iter().map(|(_, t)| t.clone()).collect())
        };
        let adam = AdamState { config: meta.config.adam, step: meta.adam_step, m: aligned(&m, "adam.m")?, v: aligned(&v, "adam.v")? };
        aligned(&best, "best")?;
        let best = ModelParams::new(best).map_err(|e| e.to_string())?;
        let state = TrainState {
            params,
            adam,
            epoch: meta.epoch,
            best: best.clone(),
            best_val: meta.best_val,
            best_epoch: meta.best_epoch,
            history: meta.history,
        };
        Ok(Self { model: manifest.model, params: best, train: Some((meta.config, state)) })
    }
}

pub fn save_params(path: &Path, model: &ModelConfig, params: &ModelParams) -> Result<(), ModelError> {
    Ok(write_atomic(path, &Checkpoint::from_params(model, params).to_bytes())?)
}

/// Resumable checkpoint; sampling from it uses the best snapshot.
pub fn save_state(path: &Path, model: &ModelConfig, cfg: &TrainConfig, state: &TrainState) -> Result<(), ModelError> {
    Ok(write_atomic(path, &Checkpoint::from_state(model, cfg, state).to_bytes())?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let bytes = fs::read(path).map_err(|e| DataError::Io { path: path.into(), source: e })?;
    Checkpoint::from_bytes(&bytes).map_err(|detail| DataError::Format { path: path.into(), detail }.into())
}
