use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Family, ModelConfig};
use super::loss::{mcdo_loss, probunet_loss, pulaski_loss, pulaski_ot_config, ssn_loss};
use super::params::{init_params, ModelParams};
use super::ModelError;
use crate::data::{AnnotatedVolume, Dataset};
use crate::engine::{AdamConfig, AdamState, EngineError, Graph, Tensor};
use crate::ot::SinkhornConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Units (images for PULASki, image–annotation pairs otherwise) per step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Cap on units drawn per epoch.
    pub max_units_per_epoch: usize,
    /// Solver settings for the OT losses; `epsilon` is replaced per image by
    /// the blur rule of the loss spec.
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
    /// Start the output layer at the training foreground rate instead of
    /// its uniform draw; see [`set_prior_head_bias`].
    pub prior_head_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            adam: AdamConfig::default(),
            max_units_per_epoch: 256,
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
            prior_head_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || self.max_units_per_epoch == 0 {
            return Err(ModelError::InvalidArgument("batch_size and max_units_per_epoch must be positive".into()));
        }
        let a = self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(ModelError::InvalidArgument(format!("invalid Adam settings {a:?}")));
        }
        self.sinkhorn.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub best: ModelParams,
    /// `None` until the first validation pass.
    pub best_val: Option<f64>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn initial(model: &ModelConfig, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = init_params(model, &mut rng);
        let adam = AdamState::new(params.tensors(), cfg.adam);
        Self {
            best: params.clone(),
            params,
            adam,
            epoch: 0,
            best_val: None,
            best_epoch: 0,
            history: Vec::new(),
        }
    }
}

/// Mean foreground fraction over every annotation of the training split.
pub fn foreground_fraction(data: &Dataset) -> f64 {
    let (mut fg, mut n) = (0usize, 0usize);
    for v in data.train() {
        for m in &v.annotations {
            fg += m.count();
            n += m.values().len();
        }
    }
    if n == 0 {
        0.5
    } else {
        fg as f64 / n as f64
    }
}

/// Sets the bias of the layer producing the (mean) logits so that an input
/// giving zero features predicts foreground with probability `pi`. Without
/// it the summed distance losses first push every pixel towards background
/// and Adam keeps scaling the features until the softmax saturates.
pub fn set_prior_head_bias(cfg: &ModelConfig, params: &mut ModelParams, pi: f64) {
    let pi = pi.clamp(1e-4, 1.0 - 1e-4);
    let name = if cfg.kind.family() == Family::Ssn { "ssn.mu.b" } else { "head.b" };
    let b = params.get_mut(name).expect("every model has an output layer").data_mut();
    match b.len() {
        1 => b[0] = (pi / (1.0 - pi)).ln(),
        _ => {
            b.fill(0.0);
            b[1] = (pi / (1.0 - pi)).ln();
        }
    }
}

/// One training sample: an image with all its annotations, or one
/// (image, annotation) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    Image(usize),
    Pair(usize, usize),
}

impl Unit {
    fn volume(self) -> usize {
        match self {
            Self::Image(v) | Self::Pair(v, _) => v,
        }
    }
}

/// Input tensor `[1, 1, S..]` of a volume.
pub fn image_tensor(v: &AnnotatedVolume) -> Tensor {
    let shape = [vec![1, 1], v.shape.clone()].concat();
    Tensor::new(shape, v.image.iter().map(|&x| x as f64).collect()).expect("image length matches its shape")
}

const STREAM_SHUFFLE: u64 = 1 << 62;
const STREAM_VAL: u64 = 1 << 61;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trainer over a fixed dataset; every random draw is a function of
/// `(seed, epoch, position)`, so a resumed run replays an uninterrupted one.
pub struct Trainer<'a> {
    data: &'a Dataset,
    model: ModelConfig,
    cfg: TrainConfig,
    images: Vec<Tensor>,
    ot: Vec<Option<SinkhornConfig>>,
    train_units: Vec<Unit>,
    val_units: Vec<Unit>,
    state: TrainState,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<Self, ModelError> {
        let mut state = TrainState::initial(model, cfg);
        if cfg.prior_head_bias {
            set_prior_head_bias(model, &mut state.params, foreground_fraction(data));
            state.best = state.params.clone();
        }
        Self::resume(data, model, cfg, state)
    }

    pub fn resume(data: &'a Dataset, model: &ModelConfig, cfg: &TrainConfig, state: TrainState) -> Result<Self, ModelError> {
        model.validate()?;
        cfg.validate()?;
        state.params.check_layout(model)?;
        let extents = data.volumes.first().map(|v| v.shape.clone()).unwrap_or_default();
        model.unet.check_extents(&extents)?;
        if data.splits.train.is_empty() {
            return Err(ModelError::InvalidArgument("training split is empty".into()));
        }
        let images = data.volumes.iter().map(image_tensor).collect();
        let ot = data
            .volumes
            .iter()
            .map(|v| {
                if model.kind.trains_on_images() {
                    pulaski_ot_config(&v.annotations, &model.loss, &cfg.sinkhorn).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_, _>>()?;
        let units = |idx: &[usize]| -> Vec<Unit> {
            idx.iter()
                .flat_map(|&v| {
                    if model.kind.trains_on_images() {
                        vec![Unit::Image(v)]
                    } else {
                        (0..data.volumes[v].annotations.len()).map(|r| Unit::Pair(v, r)).collect()
                    }
                })
                .collect()
        };
        Ok(Self {
            data,
            model: model.clone(),
            cfg: cfg.clone(),
            images,
            ot,
            train_units: units(&data.splits.train),
            val_units: units(&data.splits.val),
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn train_units(&self) -> &[Unit] {
        &self.train_units
    }

    /// Loss of `unit` under `params`, with gradients when `with_grad`.
    /// MC dropout is active only while training.
    pub fn unit_loss(
        &self,
        params: &ModelParams,
        unit: Unit,
        rng: &mut ChaCha8Rng,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<Tensor>>), ModelError> {
        let g = Graph::new();
        let b = params.bind(&g, with_grad);
        let vol = &self.data.volumes[unit.volume()];
        let x = &self.images[unit.volume()];
        let m = &self.model;
        let parts = match (unit, m.kind.family()) {
            (Unit::Image(v), _) => {
                let ot = self.ot[v].as_ref().expect("OT settings exist for image units");
                pulaski_loss(&b, m, x, &vol.annotations, ot, rng)?
            }
            (Unit::Pair(_, r), Family::ProbUnet) => probunet_loss(&b, m, x, &vol.annotations[r], rng)?,
            (Unit::Pair(_, r), Family::Mcdo) => {
                let drop = if with_grad { Some(rng as &mut dyn RngCore) } else { None };
                mcdo_loss(&b, m, x, &vol.annotations[r], drop)?
            }
            (Unit::Pair(_, r), Family::Ssn) => ssn_loss(&b, m, x, &vol.annotations[r], m.loss.m_samples, rng)?,
        };
        let value = g.item(parts.total);
        if !with_grad {
            return Ok((value, None));
        }
        let mut grads = g.backward(parts.total)?;
        Ok((value, Some(b.collect(&mut grads))))
    }

    /// Mean validation loss under `params` with draws fixed across epochs.
    pub fn validation_loss(&self, params: &ModelParams) -> Result<f64, ModelError> {
        if self.val_units.is_empty() {
            return Ok(0.0);
        }
        let losses: Vec<Result<f64, ModelError>> = self
            .val_units
            .par_iter()
            .enumerate()
            .map(|(i, &u)| {
                let mut rng = stream_rng(self.cfg.seed, STREAM_VAL | i as u64);
                Ok(self.unit_loss(params, u, &mut rng, false)?.0)
            })
            .collect();
        let mut sum = 0.0;
        for l in losses {
            sum += l?;
        }
        Ok(sum / self.val_units.len() as f64)
    }

    fn non_finite(&self, batch: usize, detail: impl Into<String>) -> ModelError {
        ModelError::NonFinite {
            epoch: self.state.epoch + 1,
            batch,
            loss: format!("{:?}", self.model.loss.kind),
            detail: detail.into(),
        }
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(&mut self) -> Result<EpochRecord, ModelError> {
        let epoch = self.state.epoch as u64;
        let mut order = self.train_units.clone();
        order.shuffle(&mut stream_rng(self.cfg.seed, STREAM_SHUFFLE | epoch));
        order.truncate(self.cfg.max_units_per_epoch);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let start = bi * self.cfg.batch_size;
            let params = &self.state.params;
            let results: Vec<Result<(f64, Option<Vec<Tensor>>), ModelError>> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &u)| {
                    let mut rng = stream_rng(self.cfg.seed, (epoch << 32) | (start + k) as u64);
                    self.unit_loss(params, u, &mut rng, true)
                })
                .collect();
            let mut sum: Option<Vec<Tensor>> = None;
            for (k, r) in results.into_iter().enumerate() {
                let (value, grads) = match r {
                    Err(ModelError::Engine(EngineError::NonFinite { op })) => {
                        return Err(self.non_finite(bi, format!("unit {:?}: non-finite value in {op}", batch[k])))
                    }
                    other => other?,
                };
                let grads = grads.expect("training units return gradients");
                if !value.is_finite() || grads.iter().any(|t| !t.is_finite()) {
                    return Err(self.non_finite(bi, format!("unit {:?}: loss {value}", batch[k])));
                }
                total += value;
                match sum.as_mut() {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let mut grads = sum.expect("batches are non-empty");
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(scale));
            self.state.adam.step(self.state.params.tensors_mut(), &grads)?;
        }
        let train_loss = total / order.len() as f64;
        let val_loss = self.validation_loss(&self.state.params)?;
        if !val_loss.is_finite() {
            return Err(self.non_finite(0, format!("validation loss {val_loss}")));
        }
        self.state.epoch += 1;
        let record = EpochRecord {
            epoch: self.state.epoch,
            train_loss,
            val_loss,
        };
        if self.state.best_val.is_none_or(|b| val_loss < b) {
            self.state.best_val = Some(val_loss);
            self.state.best_epoch = self.state.epoch;
            self.state.best = self.state.params.clone();
        }
        self.state.history.push(record);
        Ok(record)
    }

    /// Trains until `cfg.epochs` epochs are complete, calling `on_epoch`
    /// after each one.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&TrainState)) -> Result<(), ModelError> {
        while self.state.epoch < self.cfg.epochs {
            self.run_epoch()?;
            on_epoch(&self.state);
        }
        Ok(())
    }
}

/// Trained parameters (best validation snapshot) and the loss history.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

pub fn train(data: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome, ModelError> {
    let mut t = Trainer::new(data, model, cfg)?;
    t.run(|_| {})?;
    let s = t.into_state();
    Ok(TrainOutcome {
        params: s.best,
        best_epoch: s.best_epoch,
        history: s.history,
    })
}
