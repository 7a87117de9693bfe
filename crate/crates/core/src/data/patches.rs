use serde::{Deserialize, Serialize};

use super::{strides, unravel, AnnotatedVolume, DataError, Dataset, Splits};
use crate::seg::BinaryMask;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub extent: Vec<usize>,
    pub stride: Vec<usize>,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            extent: vec![16, 16, 16],
            stride: vec![8, 8, 4],
        }
    }
}

impl PatchSpec {
    pub fn validate(&self, volume: &[usize]) -> Result<(), DataError> {
        if self.extent.len() != volume.len() || self.stride.len() != volume.len() {
            return Err(DataError::InvalidArgument(format!(
                "patch spec {:?}/{:?} does not match a {}-d volume",
                self.extent,
                self.stride,
                volume.len()
            )));
        }
        for d in 0..volume.len() {
            if self.extent[d] == 0 || self.extent[d] > volume[d] {
                return Err(DataError::InvalidArgument(format!(
                    "patch extent {:?} exceeds volume {volume:?}",
                    self.extent
                )));
            }
            if self.stride[d] == 0 || self.stride[d] > self.extent[d] {
                return Err(DataError::InvalidArgument(format!(
                    "stride {:?} must be positive and at most the extent {:?}",
                    self.stride, self.extent
                )));
            }
        }
        Ok(())
    }
}

/// A patch and the position of its first voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T> {
    pub position: Vec<usize>,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

fn axis_positions(dim: usize, extent: usize, stride: usize) -> Vec<usize> {
    let last = dim - extent;
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&p| p < last).collect();
    out.push(last);
    out
}

/// Patch origins on the stride grid; the last origin per axis is clamped so
/// the patch ends at the boundary.
pub fn patch_positions(volume: &[usize], spec: &PatchSpec) -> Result<Vec<Vec<usize>>, DataError> {
    spec.validate(volume)?;
    let axes: Vec<Vec<usize>> = (0..volume.len())
        .map(|d| axis_positions(volume[d], spec.extent[d], spec.stride[d]))
        .collect();
    let counts: Vec<usize> = axes.iter().map(Vec::len).collect();
    let total = counts.iter().product();
    Ok((0..total)
        .map(|i| unravel(i, &counts).iter().enumerate().map(|(d, &k)| axes[d][k]).collect())
        .collect())
}

fn copy_patch<T: Copy>(data: &[T], volume: &[usize], pos: &[usize], extent: &[usize]) -> Vec<T> {
    let vs = strides(volume);
    let n: usize = extent.iter().product();
    (0..n)
        .map(|i| {
            let local = unravel(i, extent);
            let off: usize = local.iter().zip(pos).zip(&vs).map(|((l, p), s)| (l + p) * s).sum();
            data[off]
        })
        .collect()
}

pub fn extract_patches<T: Copy>(data: &[T], volume: &[usize], spec: &PatchSpec) -> Result<Vec<Patch<T>>, DataError> {
    if data.len() != volume.iter().product::<usize>() {
        return Err(DataError::InvalidArgument(format!("{} values for volume {volume:?}", data.len())));
    }
    Ok(patch_positions(volume, spec)?
        .into_iter()
        .map(|position| Patch {
            data: copy_patch(data, volume, &position, &spec.extent),
            shape: spec.extent.clone(),
            position,
        })
        .collect())
}

/// Per-voxel mean of the covering patch values. Kept as a running mean, so
/// voxels whose contributions agree reproduce that value exactly.
pub fn stitch_overlap_average(patches: &[Patch<f64>], volume: &[usize]) -> Result<Vec<f64>, DataError> {
    let n: usize = volume.iter().product();
    let vs = strides(volume);
    let mut mean = vec![0.0; n];
    let mut count = vec![0u32; n];
    for p in patches {
        if p.position.len() != volume.len()
            || p.shape.len() != volume.len()
            || (0..volume.len()).any(|d| p.position[d] + p.shape[d] > volume[d])
            || p.data.len() != p.shape.iter().product::<usize>()
        {
            return Err(DataError::InvalidArgument(format!(
                "patch at {:?} of shape {:?} does not fit volume {volume:?}",
                p.position, p.shape
            )));
        }
        for (i, &v) in p.data.iter().enumerate() {
            let local = unravel(i, &p.shape);
            let off: usize = local.iter().zip(&p.position).zip(&vs).map(|((l, q), s)| (l + q) * s).sum();
            count[off] += 1;
            mean[off] += (v - mean[off]) / count[off] as f64;
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Err(DataError::Uncovered(unravel(i, volume)));
    }
    Ok(mean)
}

/// Patches of an image and all its annotations, as standalone samples with
/// ids `{id}_p{k}`, paired with their origins.
pub fn extract_volume_patches(vol: &AnnotatedVolume, spec: &PatchSpec) -> Result<Vec<(AnnotatedVolume, Vec<usize>)>, DataError> {
    let images = extract_patches(&vol.image, &vol.shape, spec)?;
    let masks = vol
        .annotations
        .iter()
        .map(|m| extract_patches(m.values(), &vol.shape, spec))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(images
        .into_iter()
        .enumerate()
        .map(|(k, p)| {
            let annotations = masks
                .iter()
                .map(|r| BinaryMask::new(p.shape.clone(), r[k].data.clone()).expect("patch of a mask is a mask"))
                .collect();
            let v = AnnotatedVolume { id: format!("{}_p{k:03}", vol.id), shape: p.shape, image: p.data, annotations };
            (v, p.position)
        })
        .collect())
}

/// Replaces every volume by its patches; each split keeps the patches of
/// its volumes.
pub fn patch_dataset(ds: &Dataset, spec: &PatchSpec) -> Result<Dataset, DataError> {
    let mut volumes = vec![];
    let mut ranges = vec![];
    for v in &ds.volumes {
        let start = volumes.len();
        volumes.extend(extract_volume_patches(v, spec)?.into_iter().map(|(p, _)| p));
        ranges.push(start..volumes.len());
    }
    let map = |idx: &[usize]| idx.iter().flat_map(|&i| ranges[i].clone()).collect();
    Ok(Dataset {
        spec: ds.spec.clone(),
        volumes,
        splits: Splits { train: map(&ds.splits.train), val: map(&ds.splits.val), test: map(&ds.splits.test) },
    })
}

fn slice_values<T: Copy>(data: &[T], shape: &[usize], axis: usize, index: usize) -> Vec<T> {
    let st = strides(shape);
    let out_shape: Vec<usize> = shape.iter().enumerate().filter(|(d, _)| *d != axis).map(|(_, &e)| e).collect();
    let n: usize = out_shape.iter().product();
    (0..n)
        .map(|i| {
            let mut idx = unravel(i, &out_shape);
            idx.insert(axis, index);
            data[idx.iter().zip(&st).map(|(a, b)| a * b).sum::<usize>()]
        })
        .collect()
}

/// One 2D sample per index along `axis` of a 3D volume.
pub fn extract_slices(vol: &AnnotatedVolume, axis: usize) -> Result<Vec<AnnotatedVolume>, DataError> {
    if vol.shape.len() != 3 || axis >= 3 {
        return Err(DataError::InvalidArgument(format!(
            "axis {axis} invalid for volume of shape {:?}",
            vol.shape
        )));
    }
    let out_shape: Vec<usize> = vol.shape.iter().enumerate().filter(|(d, _)| *d != axis).map(|(_, &e)| e).collect();
    Ok((0..vol.shape[axis])
        .map(|k| AnnotatedVolume {
            id: format!("{}_s{k:03}", vol.id),
            shape: out_shape.clone(),
            image: slice_values(&vol.image, &vol.shape, axis, k),
            annotations: vol
                .annotations
                .iter()
                .map(|m| {
                    BinaryMask::new(out_shape.clone(), slice_values(m.values(), &vol.shape, axis, k))
                        .expect("slice of a mask is a mask")
                })
                .collect(),
        })
        .collect())
}

/// Inverse of slicing: stacks equally shaped 2D arrays along `axis`.
pub fn stack_slices<T: Copy + Default>(slices: &[Vec<T>], slice_shape: &[usize], axis: usize) -> Result<Vec<T>, DataError> {
    if slice_shape.len() != 2 || axis > 2 || slices.is_empty() {
        return Err(DataError::InvalidArgument("need a non-empty list of 2D slices and axis < 3".into()));
    }
    let mut shape = slice_shape.to_vec();
    shape.insert(axis, slices.len());
    let st = strides(&shape);
    let mut out = vec![T::default(); shape.iter().product()];
    for (k, s) in slices.iter().enumerate() {
        if s.len() != slice_shape.iter().product::<usize>() {
            return Err(DataError::InvalidArgument(format!("slice {k} has {} values", s.len())));
        }
        for (i, &v) in s.iter().enumerate() {
            let mut idx = unravel(i, slice_shape);
            idx.insert(axis, k);
            out[idx.iter().zip(&st).map(|(a, b)| a * b).sum::<usize>()] = v;
        }
    }
    Ok(out)
}
