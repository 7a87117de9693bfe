use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotatedVolume, DataError, Dataset, Splits, SyntheticSpec};
use crate::seg::BinaryMask;

const MAGIC: &[u8; 5] = b"PVOL1";
const KIND_F32: u8 = 0;
const KIND_U8: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Image { shape: Vec<usize>, data: Vec<f32> },
    Mask(BinaryMask),
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| DataError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| DataError::io(&tmp, e))?;
    f.sync_all().map_err(|e| DataError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DataError::io(path, e))
}

fn header(shape: &[usize], kind: u8) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(kind);
    out
}

pub fn write_volume_f32(path: &Path, shape: &[usize], data: &[f32]) -> Result<(), DataError> {
    if data.len() != shape.iter().product::<usize>() {
        return Err(DataError::InvalidArgument(format!("{} values for shape {shape:?}", data.len())));
    }
    let mut bytes = header(shape, KIND_F32);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<(), DataError> {
    let mut bytes = header(mask.shape(), KIND_U8);
    bytes.extend_from_slice(mask.values());
    write_atomic(path, &bytes)
}

pub fn read_volume(path: &Path) -> Result<Volume, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let bad = |detail: &str| DataError::Format {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 7 || &bytes[..5] != MAGIC {
        return Err(bad("missing PVOL1 magic"));
    }
    let dims = bytes[5] as usize;
    let head = 6 + 4 * dims + 1;
    if dims == 0 || bytes.len() < head {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = (0..dims)
        .map(|d| u32::from_le_bytes(bytes[6 + 4 * d..10 + 4 * d].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[head..];
    match bytes[head - 1] {
        KIND_F32 if payload.len() == 4 * n => Ok(Volume::Image {
            data: payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            shape,
        }),
        KIND_U8 if payload.len() == n => {
            BinaryMask::new(shape, payload.to_vec()).map(Volume::Mask).map_err(|e| bad(&e.to_string()))
        }
        KIND_F32 | KIND_U8 => Err(bad("payload length does not match extents")),
        _ => Err(bad("unknown payload kind")),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeFile {
    pub id: String,
    pub image: String,
    pub annotations: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: SyntheticSpec,
    pub volumes: Vec<VolumeFile>,
    pub splits: Splits,
}

pub const MANIFEST_NAME: &str = "dataset.json";

/// Writes every volume as PVOL1 files plus `dataset.json` under `dir`.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetManifest, DataError> {
    let mut volumes = Vec::with_capacity(ds.volumes.len());
    for v in &ds.volumes {
        let image = format!("{}_img.pvol", v.id);
        write_volume_f32(&dir.join(&image), &v.shape, &v.image)?;
        let mut annotations = vec![];
        for (r, m) in v.annotations.iter().enumerate() {
            let name = format!("{}_r{r}.pvol", v.id);
            write_mask(&dir.join(&name), m)?;
            annotations.push(name);
        }
        volumes.push(VolumeFile {
            id: v.id.clone(),
            image,
            annotations,
        });
    }
    let manifest = DatasetManifest {
        spec: ds.spec.clone(),
        volumes,
        splits: ds.splits.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_NAME), &json)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let path: PathBuf = dir.join(MANIFEST_NAME);
    let text = fs::read(&path).map_err(|e| DataError::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&text).map_err(|e| DataError::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let mut volumes = Vec::with_capacity(manifest.volumes.len());
    for vf in &manifest.volumes {
        let img_path = dir.join(&vf.image);
        let (shape, image) = match read_volume(&img_path)? {
            Volume::Image { shape, data } => (shape, data),
            Volume::Mask(_) => {
                return Err(DataError::Format {
                    path: img_path,
                    detail: "expected an image payload".into(),
                })
            }
        };
        let mut annotations = vec![];
        for a in &vf.annotations {
            let p = dir.join(a);
            match read_volume(&p)? {
                Volume::Mask(m) if m.shape() == shape.as_slice() => annotations.push(m),
                _ => {
                    return Err(DataError::Format {
                        path: p,
                        detail: format!("expected a mask of shape {shape:?}"),
                    })
                }
            }
        }
        volumes.push(AnnotatedVolume {
            id: vf.id.clone(),
            shape,
            image,
            annotations,
        });
    }
    let n = volumes.len();
    if manifest.splits.train.iter().chain(&manifest.splits.val).chain(&manifest.splits.test).any(|&i| i >= n) {
        return Err(DataError::Format {
            path,
            detail: "split index out of range".into(),
        });
    }
    Ok(Dataset {
        spec: manifest.spec,
        volumes,
        splits: manifest.splits,
    })
}
