use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::CliError;
use crate::data::write_atomic;
use crate::metrics::{ImageRecord, PairwiseTest};
use crate::model::EpochRecord;

pub(crate) fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::Io(e.to_string()))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write(path, text.as_bytes())
}

/// Binary 8-bit PGM of values in `[0, 1]`, rows along the last axis.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// One PGM for a 2D map, one per index along the first axis for 3D.
pub fn write_pgm_maps(dir: &Path, stem: &str, shape: &[usize], values: &[f64]) -> Result<Vec<PathBuf>, CliError> {
    match shape {
        [h, w] => {
            let p = dir.join(format!("{stem}.pgm"));
            write(&p, &pgm_bytes(*w, *h, values))?;
            Ok(vec![p])
        }
        [d, h, w] => (0..*d)
            .map(|z| {
                let p = dir.join(format!("{stem}_z{z:03}.pgm"));
                write(&p, &pgm_bytes(*w, *h, &values[z * h * w..(z + 1) * h * w]))?;
                Ok(p)
            })
            .collect(),
        _ => Err(CliError::Validation(format!("cannot render a map of shape {shape:?}"))),
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        s.push_str(&format!("{},{:e},{:e}\n", r.epoch, r.train_loss, r.val_loss));
    }
    s
}

pub fn metrics_csv(records: &[ImageRecord]) -> String {
    let mut s = String::from("image_id,ged,kalpha_all,kalpha_roi\n");
    for r in records {
        let roi = r.kalpha_roi.map_or("n/a".to_string(), |v| format!("{v:e}"));
        s.push_str(&format!("{},{:e},{:e},{roi}\n", r.image_id, r.ged, r.kalpha_all));
    }
    s
}

pub fn wilcoxon_csv(tests: &[PairwiseTest]) -> String {
    let mut s = String::from("method_a,method_b,metric,p_value\n");
    for t in tests {
        let p = t.p_value.map_or("n/a".to_string(), |v| format!("{v:e}"));
        s.push_str(&format!("{},{},{},{p}\n", t.a, t.b, t.metric.name()));
    }
    s
}

/// Files under `root` in sorted path order; a file is itself.
pub(crate) fn files_under(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    let meta = fs::metadata(root).map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?;
    if meta.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = vec![];
    let mut entries: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| CliError::Io(format!("{}: {e}", root.display())))?
        .map(|e| e.map(|e| e.path()).map_err(|e| CliError::Io(format!("{}: {e}", root.display()))))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        out.extend(files_under(&p)?);
    }
    Ok(out)
}

/// SHA-256 over the resolved config and the bytes of every input file,
/// each file framed as `blob <len>\0` in the manner of git.
pub fn input_hash(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<String, CliError> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("serializable"));
    for root in inputs {
        for f in files_under(root)? {
            let bytes = fs::read(&f).map_err(|e| CliError::Io(format!("{}: {e}", f.display())))?;
            h.update(format!("blob {}\0", bytes.len()));
            h.update(&bytes);
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub input_hash: String,
    pub history: Vec<EpochRecord>,
    /// Command-specific results (final losses, metric summaries).
    pub results: serde_json::Value,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn path(out: &Path, command: &str) -> PathBuf {
        out.join(format!("manifest_{command}.json"))
    }

    pub fn write(&self) -> Result<PathBuf, CliError> {
        let p = Self::path(&self.config.out, &self.command);
        write_json(&p, self)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_has_header_and_scaled_bytes() {
        let b = pgm_bytes(2, 1, &[0.0, 1.0]);
        assert_eq!(b, [b"P5\n2 1\n255\n".as_slice(), &[0, 255]].concat());
    }

    #[test]
    fn csv_marks_missing_roi() {
        let r = ImageRecord { image_id: "img0".into(), ged: 0.5, kalpha_all: 1.0, kalpha_roi: None };
        assert_eq!(metrics_csv(&[r]), "image_id,ged,kalpha_all,kalpha_roi\nimg0,5e-1,1e0,n/a\n");
    }

    #[test]
    fn hash_depends_on_file_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.bin");
        fs::write(&f, b"one").unwrap();
        let cfg = RunConfig::default();
        let h1 = input_hash(&cfg, &[dir.path().to_path_buf()]).unwrap();
        assert_eq!(h1, input_hash(&cfg, &[dir.path().to_path_buf()]).unwrap());
        fs::write(&f, b"two").unwrap();
        assert_ne!(h1, input_hash(&cfg, &[dir.path().to_path_buf()]).unwrap());
        assert_eq!(h1.len(), 64);
    }
}
