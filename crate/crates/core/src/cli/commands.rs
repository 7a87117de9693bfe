use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use super::artifacts::{
    files_under, history_csv, input_hash, metrics_csv, wilcoxon_csv, write, write_json, write_pgm_maps, RunManifest,
};
use super::config::RunConfig;
use super::CliError;
use crate::data::{
    extract_volume_patches, generate_dataset, load_dataset, patch_dataset, read_volume, save_dataset,
    stitch_overlap_average, write_mask, write_volume_f32, AnnotatedVolume, Dataset, Patch, Volume,
};
use crate::metrics::{evaluate_image, pairwise_wilcoxon, MaskSet, MetricsReport, PairwiseTest, Provenance};
use crate::model::{
    image_tensor, load_checkpoint, most_probable_map, sample_maps, save_state, EpochRecord, ModelConfig, ModelParams,
    Trainer,
};
use crate::seg::{otsu_binarize, rate_of_occurrence, BinaryMask, ProbabilityMap};

const STREAM_SAMPLE: u64 = 1 << 60;

/// The configured dataset (loaded or generated) and the input files it
/// came from.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Vec<PathBuf>), CliError> {
    match &cfg.data.path {
        Some(p) => Ok((load_dataset(p)?, vec![p.clone()])),
        None => Ok((generate_dataset(&cfg.data.synthetic)?, vec![])),
    }
}

fn manifest(
    cfg: &RunConfig,
    command: &str,
    inputs: &[PathBuf],
    history: Vec<EpochRecord>,
    results: serde_json::Value,
    outputs: Vec<PathBuf>,
    started: Instant,
) -> Result<PathBuf, CliError> {
    RunManifest {
        command: command.into(),
        config: cfg.clone(),
        input_hash: input_hash(cfg, inputs)?,
        history,
        results,
        outputs,
        wall_clock_s: started.elapsed().as_secs_f64(),
    }
    .write()
}

/// Writes the synthetic dataset to `<out>/dataset`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    let ds = generate_dataset(&cfg.data.synthetic)?;
    let dir = cfg.out.join("dataset");
    save_dataset(&dir, &ds)?;
    let results = json!({
        "volumes": ds.volumes.len(),
        "train": ds.splits.train.len(),
        "val": ds.splits.val.len(),
        "test": ds.splits.test.len(),
    });
    manifest(cfg, "gen", &[], vec![], results, vec![dir.clone()], started)?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
}

impl TrainReport {
    pub fn final_val_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.val_loss)
    }
}

fn same_model(expected: &ModelConfig, found: &ModelConfig) -> Result<(), CliError> {
    if expected != found {
        return Err(CliError::Validation(format!(
            "checkpoint model {} does not match the configured model {}",
            serde_json::to_string(found).expect("serializable"),
            serde_json::to_string(expected).expect("serializable"),
        )));
    }
    Ok(())
}

/// Trains to `train.epochs`, checkpointing after every epoch. `resume`
/// continues from a checkpoint written by an earlier run of the same
/// config (its epoch budget may differ).
pub fn cmd_train(
    cfg: &RunConfig,
    resume: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainReport, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    let model = cfg.model_config();
    let (data, mut inputs) = load_data(cfg)?;
    let data = match &cfg.data.patch {
        Some(p) => patch_dataset(&data, p)?,
        None => data,
    };
    let mut trainer = match resume {
        None => Trainer::new(&data, &model, &cfg.train)?,
        Some(path) => {
            let ck = load_checkpoint(path)?;
            same_model(&model, &ck.model)?;
            let (saved, state) = ck
                .train
                .ok_or_else(|| CliError::Validation(format!("{} holds no training state", path.display())))?;
            let mut comparable = saved.clone();
            comparable.epochs = cfg.train.epochs;
            if comparable != cfg.train {
                return Err(CliError::Validation(format!(
                    "{} was trained with different settings than the configured ones",
                    path.display()
                )));
            }
            inputs.push(path.to_path_buf());
            Trainer::resume(&data, &model, &cfg.train, state)?
        }
    };
    let checkpoint = cfg.out.join("checkpoint.plsk");
    let history_path = cfg.out.join("history.csv");
    let save = |t: &Trainer| -> Result<(), CliError> {
        save_state(&checkpoint, &model, &cfg.train, t.state())?;
        write(&history_path, history_csv(&t.state().history).as_bytes())
    };
    save(&trainer)?;
    while trainer.state().epoch < cfg.train.epochs {
        let rec = trainer.run_epoch()?;
        save(&trainer)?;
        on_epoch(&rec);
    }
    let state = trainer.into_state();
    let report = TrainReport {
        checkpoint: checkpoint.clone(),
        history: state.history.clone(),
        best_epoch: state.best_epoch,
        best_val_loss: state.best_val,
    };
    let results = json!({
        "epochs": state.epoch,
        "final_val_loss": report.final_val_loss(),
        "best_val_loss": state.best_val,
        "best_epoch": state.best_epoch,
    });
    manifest(cfg, "train", &inputs, state.history, results, vec![checkpoint, history_path], started)?;
    Ok(report)
}

/// `M` sampled probability maps and the most probable map for one image,
/// predicted patch-wise and stitched when `patch` is set.
fn predict_image(
    cfg: &RunConfig,
    model: &ModelConfig,
    params: &ModelParams,
    vol: &AnnotatedVolume,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ProbabilityMap>, ProbabilityMap), CliError> {
    let m = cfg.sample.m;
    let Some(spec) = &cfg.data.patch else {
        let x = image_tensor(vol);
        return Ok((sample_maps(model, params, &x, m, rng)?, most_probable_map(model, params, &x)?));
    };
    let mut sampled: Vec<Vec<Patch<f64>>> = vec![vec![]; m];
    let mut modal = vec![];
    for (p, position) in extract_volume_patches(vol, spec)? {
        let x = image_tensor(&p);
        let maps = sample_maps(model, params, &x, m, rng)?;
        for (k, map) in maps.into_iter().enumerate() {
            sampled[k].push(Patch { position: position.clone(), shape: p.shape.clone(), data: map.values().to_vec() });
        }
        let mp = most_probable_map(model, params, &x)?;
        modal.push(Patch { position, shape: p.shape.clone(), data: mp.values().to_vec() });
    }
    let stitch = |patches: &[Patch<f64>]| -> Result<ProbabilityMap, CliError> {
        let v = stitch_overlap_average(patches, &vol.shape)?;
        ProbabilityMap::new(vol.shape.clone(), v).map_err(|e| CliError::Numeric(e.to_string()))
    };
    let maps = sampled.iter().map(|p| stitch(p)).collect::<Result<_, _>>()?;
    Ok((maps, stitch(&modal)?))
}

fn as_f32(p: &ProbabilityMap) -> Vec<f32> {
    p.values().iter().map(|&v| v as f32).collect()
}

fn binarize(p: &ProbabilityMap) -> Result<BinaryMask, CliError> {
    otsu_binarize(p).map_err(|e| CliError::Numeric(e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleReport {
    pub dir: PathBuf,
    pub images: Vec<String>,
}

/// For every test image writes `prob_KK.pvol` / `mask_KK.pvol` for each of
/// the `M` samples and `most_probable_{prob,mask}.pvol` under
/// `<out>/predictions/<model>/<image id>/`.
pub fn cmd_sample(cfg: &RunConfig) -> Result<SampleReport, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    let model = cfg.model_config();
    let ck_path = cfg.checkpoint_path();
    let ck = load_checkpoint(&ck_path)?;
    same_model(&model, &ck.model)?;
    let (data, mut inputs) = load_data(cfg)?;
    inputs.push(ck_path);
    let dir = cfg.predictions_dir();
    let test: Vec<(usize, &AnnotatedVolume)> = data.splits.test.iter().map(|&i| (i, &data.volumes[i])).collect();
    test.par_iter()
        .map(|&(i, vol)| -> Result<(), CliError> {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(STREAM_SAMPLE | i as u64);
            let (maps, modal) = predict_image(cfg, &model, &ck.params, vol, &mut rng)?;
            let img_dir = dir.join(&vol.id);
            for (k, p) in maps.iter().enumerate() {
                write_volume_f32(&img_dir.join(format!("prob_{k:02}.pvol")), p.shape(), &as_f32(p))?;
                write_mask(&img_dir.join(format!("mask_{k:02}.pvol")), &binarize(p)?)?;
            }
            write_volume_f32(&img_dir.join("most_probable_prob.pvol"), modal.shape(), &as_f32(&modal))?;
            write_mask(&img_dir.join("most_probable_mask.pvol"), &binarize(&modal)?)?;
            Ok(())
        })
        .collect::<Result<Vec<()>, _>>()?;
    let images: Vec<String> = test.iter().map(|(_, v)| v.id.clone()).collect();
    let results = json!({ "images": images, "m": cfg.sample.m });
    manifest(cfg, "sample", &inputs, vec![], results, vec![dir.clone()], started)?;
    Ok(SampleReport { dir, images })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// The annotations scored against themselves: GED 0 and the
    /// inter-rater Kα.
    pub annotations: MetricsReport,
    pub methods: Vec<MetricsReport>,
    pub wilcoxon: Vec<PairwiseTest>,
}

fn read_masks(dir: &Path) -> Result<Vec<BinaryMask>, CliError> {
    let mut files: Vec<PathBuf> = files_under(dir)?
        .into_iter()
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("mask_") && name.ends_with(".pvol")
        })
        .collect();
    files.sort();
    files
        .iter()
        .map(|f| match read_volume(f)? {
            Volume::Mask(m) => Ok(m),
            Volume::Image { .. } => Err(CliError::Validation(format!("{} is not a mask", f.display()))),
        })
        .collect()
}

fn method_names(dirs: &[PathBuf]) -> Vec<String> {
    let mut names: Vec<String> = vec![];
    for d in dirs {
        let base = d.file_name().and_then(|n| n.to_str()).unwrap_or("method").to_string();
        let mut name = base.clone();
        let mut k = 2;
        while names.contains(&name) || name == "annotations" {
            name = format!("{base}_{k}");
            k += 1;
        }
        names.push(name);
    }
    names
}

fn write_report(dir: &Path, report: &MetricsReport) -> Result<(), CliError> {
    write(&dir.join("metrics.csv"), metrics_csv(&report.records).as_bytes())?;
    write_json(&dir.join("summary.json"), report)
}

/// Scores every method directory against the test annotations and writes
/// `<out>/eval/<method>/{metrics.csv, summary.json, roo/}` plus
/// `<out>/eval/wilcoxon.csv`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    let started = Instant::now();
    cfg.validate()?;
    let dirs = if cfg.eval.predictions.is_empty() { vec![cfg.predictions_dir()] } else { cfg.eval.predictions.clone() };
    let (data, mut inputs) = load_data(cfg)?;
    let test: Vec<&AnnotatedVolume> = data.test().collect();

    let mut missing = vec![];
    for d in &dirs {
        for v in &test {
            let p = d.join(&v.id);
            if !p.is_dir() || read_masks(&p).map_or(true, |m| m.is_empty()) {
                missing.push(p.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Validation(format!("missing predictions: {}", missing.join(", "))));
    }
    inputs.extend(dirs.iter().cloned());

    let eval_dir = cfg.out.join("eval");
    let annotated: Vec<MaskSet> = test
        .iter()
        .map(|v| MaskSet::new(v.annotations.clone(), Provenance::Annotation))
        .collect::<Result<_, _>>()?;
    let score = |name: &str, sets: &[MaskSet]| -> Result<MetricsReport, CliError> {
        let records = test
            .par_iter()
            .zip(sets)
            .zip(&annotated)
            .map(|((v, s), y)| evaluate_image(&v.id, s, y))
            .collect::<Result<Vec<_>, _>>()?;
        let report = MetricsReport::from_records(name, records)?;
        let dir = eval_dir.join(name);
        write_report(&dir, &report)?;
        if cfg.eval.roo_maps {
            for (v, s) in test.iter().zip(sets) {
                let roo = rate_of_occurrence(s.masks()).map_err(|e| CliError::Validation(e.to_string()))?;
                write_pgm_maps(&dir.join("roo"), &v.id, roo.shape(), roo.values())?;
            }
        }
        Ok(report)
    };

    let annotations = score("annotations", &annotated)?;
    let mut methods = vec![];
    for (d, name) in dirs.iter().zip(method_names(&dirs)) {
        let sets = test
            .iter()
            .map(|v| Ok(MaskSet::new(read_masks(&d.join(&v.id))?, Provenance::Prediction)?))
            .collect::<Result<Vec<_>, CliError>>()?;
        methods.push(score(&name, &sets)?);
    }
    let wilcoxon = pairwise_wilcoxon(&methods)?;
    let mut outputs = vec![eval_dir.clone()];
    if methods.len() > 1 {
        let p = eval_dir.join("wilcoxon.csv");
        write(&p, wilcoxon_csv(&wilcoxon).as_bytes())?;
        outputs.push(p);
    }
    let summary = |r: &MetricsReport| json!({ "ged": r.ged, "kalpha_all": r.kalpha_all, "kalpha_roi": r.kalpha_roi });
    let results = json!({
        "annotations": summary(&annotations),
        "methods": methods.iter().map(|r| (r.method.clone(), summary(r))).collect::<serde_json::Map<_, _>>(),
        "wilcoxon": wilcoxon,
    });
    manifest(cfg, "eval", &inputs, vec![], results, outputs, started)?;
    Ok(EvalReport { annotations, methods, wilcoxon })
}
