use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use super::{strides, unravel, DataError};
use crate::seg::BinaryMask;

/// Rejection sample from `N(mean, sd²)` restricted to `[low, high]`.
pub fn truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, low: f64, high: f64, rng: &mut R) -> Result<f64, DataError> {
    if !(low < high) || !(sd >= 0.0) || !mean.is_finite() {
        return Err(DataError::InvalidArgument(format!(
            "truncated normal needs low < high and sd >= 0 (mean {mean}, sd {sd}, [{low}, {high}])"
        )));
    }
    if sd == 0.0 {
        return if (low..=high).contains(&mean) {
            Ok(mean)
        } else {
            Err(DataError::InvalidArgument(format!("point mass {mean} outside [{low}, {high}]")))
        };
    }
    let std = StatNormal::new(mean, sd).expect("sd > 0");
    let mass = std.cdf(high) - std.cdf(low);
    if mass < 1e-12 {
        return Err(DataError::InvalidArgument(format!("acceptance mass {mass:.3e} too small")));
    }
    if mass < 1e-3 {
        // Inverse-CDF fallback for far tails where rejection would stall.
        let (a, b) = (std.cdf(low), std.cdf(high));
        return Ok(std.inverse_cdf(a + rng.random::<f64>() * (b - a)).clamp(low, high));
    }
    let normal = Normal::new(mean, sd).expect("sd > 0");
    loop {
        let v = normal.sample(rng);
        if (low..=high).contains(&v) {
            return Ok(v);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    /// Curved tubes of constant radius (vessel-like).
    Tubes,
    /// Ellipsoidal blobs (lesion-like).
    Blobs,
}

/// Per-rater boundary offset `δ ~ TN(mean, sd, [low, high])`, in voxels;
/// positive values dilate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterSpec {
    pub mean: f64,
    pub sd: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub extents: Vec<usize>,
    pub n_images: usize,
    pub n_raters: usize,
    pub structure: Structure,
    /// Structures per image.
    pub n_structures: usize,
    /// Tube radius or blob semi-axis range, voxels.
    pub size_range: [f64; 2],
    pub jitter: JitterSpec,
    /// Flip probability for voxels near the boundary.
    pub flip_prob: f64,
    pub noise_sd: f64,
    /// Gaussian blur applied to the clean mask to form the image.
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            extents: vec![32, 32],
            n_images: 15,
            n_raters: 5,
            structure: Structure::Tubes,
            n_structures: 1,
            size_range: [0.7, 1.1],
            jitter: JitterSpec {
                mean: 0.0,
                sd: 0.6,
                low: -0.6,
                high: 1.0,
            },
            flip_prob: 0.15,
            noise_sd: 0.1,
            blur_sigma: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn desk_3d() -> Self {
        Self {
            extents: vec![32, 32, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidArgument(m));
        if !(2..=3).contains(&self.extents.len()) {
            return bad(format!("extents must be 2D or 3D, got {:?}", self.extents));
        }
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("size range {:?} must satisfy 0 < lo <= hi", self.size_range));
        }
        let min_extent = *self.extents.iter().min().expect("non-empty");
        if (min_extent as f64) < 4.0 * hi + 4.0 {
            return bad(format!("extents {:?} too small for structures of size {hi}", self.extents));
        }
        if self.n_images < 3 {
            return bad(format!("need at least 3 images for a train/val/test split, got {}", self.n_images));
        }
        if self.n_raters < 2 {
            return bad(format!("need at least 2 raters, got {}", self.n_raters));
        }
        if self.n_structures == 0 {
            return bad("n_structures must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        if !(self.noise_sd >= 0.0 && self.blur_sigma >= 0.0 && self.jitter.sd >= 0.0) {
            return bad("noise_sd, blur_sigma and jitter.sd must be non-negative".into());
        }
        if !(self.jitter.low < self.jitter.high) {
            return bad(format!("jitter bounds [{}, {}] are empty", self.jitter.low, self.jitter.high));
        }
        Ok(())
    }
}

/// An image with one mask per rater.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedVolume {
    pub id: String,
    pub shape: Vec<usize>,
    pub image: Vec<f32>,
    pub annotations: Vec<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// 9:2:4 proportions, rounded, with every part non-empty.
    fn proportional(n: usize, rng: &mut impl Rng) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        let mut n_val = ((n as f64 * 2.0 / 15.0).round() as usize).max(1);
        let mut n_test = ((n as f64 * 4.0 / 15.0).round() as usize).max(1);
        while n_val + n_test >= n {
            if n_test > 1 {
                n_test -= 1;
            } else {
                n_val -= 1;
            }
        }
        let n_train = n - n_val - n_test;
        let sorted = |s: &[usize]| {
            let mut v = s.to_vec();
            v.sort_unstable();
            v
        };
        Self {
            train: sorted(&idx[..n_train]),
            val: sorted(&idx[n_train..n_train + n_val]),
            test: sorted(&idx[n_train + n_val..]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSpec,
    pub volumes: Vec<AnnotatedVolume>,
    pub splits: Splits,
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &AnnotatedVolume> {
        self.splits.train.iter().map(|&i| &self.volumes[i])
    }

    pub fn val(&self) -> impl Iterator<Item = &AnnotatedVolume> {
        self.splits.val.iter().map(|&i| &self.volumes[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &AnnotatedVolume> {
        self.splits.test.iter().map(|&i| &self.volumes[i])
    }
}

/// Signed distance-like field: negative inside the structure.
trait Field {
    fn phi(&self, p: &[f64]) -> f64;
}

struct Tube {
    polyline: Vec<Vec<f64>>,
    radius: f64,
}

fn seg_dist(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let ap: Vec<f64> = a.iter().zip(p).map(|(x, y)| y - x).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ap.iter().zip(&ab).map(|(x, y)| (x - t * y).powi(2)).sum::<f64>().sqrt()
}

impl Field for Tube {
    fn phi(&self, p: &[f64]) -> f64 {
        let d = self
            .polyline
            .windows(2)
            .map(|w| seg_dist(p, &w[0], &w[1]))
            .fold(f64::INFINITY, f64::min);
        d - self.radius
    }
}

struct Blob {
    centre: Vec<f64>,
    axes: Vec<f64>,
}

impl Field for Blob {
    fn phi(&self, p: &[f64]) -> f64 {
        let r: f64 = p
            .iter()
            .zip(&self.centre)
            .zip(&self.axes)
            .map(|((x, c), a)| ((x - c) / a).powi(2))
            .sum::<f64>()
            .sqrt();
        let min_axis = self.axes.iter().copied().fold(f64::INFINITY, f64::min);
        (r - 1.0) * min_axis
    }
}

/// Quadratic Bézier between two points near opposite faces, bent through a
/// random interior control point.
fn random_tube(ext: &[usize], radius: f64, rng: &mut impl Rng) -> Tube {
    let d = ext.len();
    let axis = rng.random_range(0..d);
    let margin = radius + 1.0;
    let interior = |rng: &mut ChaCha8Rng, k: usize| rng.random_range(margin..ext[k] as f64 - 1.0 - margin);
    let mut local = ChaCha8Rng::seed_from_u64(rng.random());
    let mut p0: Vec<f64> = (0..d).map(|k| interior(&mut local, k)).collect();
    let mut p2: Vec<f64> = (0..d).map(|k| interior(&mut local, k)).collect();
    p0[axis] = 0.0;
    p2[axis] = ext[axis] as f64 - 1.0;
    let p1: Vec<f64> = (0..d).map(|k| interior(&mut local, k)).collect();
    let steps = 48;
    let polyline = (0..=steps)
        .map(|s| {
            let t = s as f64 / steps as f64;
            (0..d)
                .map(|k| (1.0 - t).powi(2) * p0[k] + 2.0 * t * (1.0 - t) * p1[k] + t * t * p2[k])
                .collect()
        })
        .collect();
    Tube { polyline, radius }
}

fn random_blob(ext: &[usize], size: [f64; 2], rng: &mut impl Rng) -> Blob {
    let axes: Vec<f64> = ext.iter().map(|_| rng.random_range(size[0]..=size[1])).collect();
    let centre = ext
        .iter()
        .zip(&axes)
        .map(|(&e, &a)| rng.random_range(a + 1.0..e as f64 - 2.0 - a))
        .collect();
    Blob { centre, axes }
}

/// Separable Gaussian blur with a kernel truncated at 3σ, clamped borders.
fn gaussian_blur(data: &[f64], shape: &[usize], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return data.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let st = strides(shape);
    let mut cur = data.to_vec();
    for axis in 0..shape.len() {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / st[axis] % shape[axis]) as isize;
            let base = i as isize - pos * st[axis] as isize;
            let mut acc = 0.0;
            for (k, w) in (-r..=r).zip(&kernel) {
                let q = (pos + k).clamp(0, shape[axis] as isize - 1);
                acc += w * cur[(base + q * st[axis] as isize) as usize];
            }
            *out = acc / norm;
        }
        cur = next;
    }
    cur
}

/// Distance field of volume `index` and the generator positioned after the
/// structures were drawn.
fn structure_field(spec: &SyntheticSpec, index: usize) -> (Vec<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let ext = &spec.extents;
    let fields: Vec<Box<dyn Field>> = (0..spec.n_structures)
        .map(|_| -> Box<dyn Field> {
            match spec.structure {
                Structure::Tubes => {
                    let radius = rng.random_range(spec.size_range[0]..=spec.size_range[1]);
                    Box::new(random_tube(ext, radius, &mut rng))
                }
                Structure::Blobs => Box::new(random_blob(ext, spec.size_range, &mut rng)),
            }
        })
        .collect();
    let n: usize = ext.iter().product();
    let phi: Vec<f64> = (0..n)
        .map(|i| {
            let p: Vec<f64> = unravel(i, ext).into_iter().map(|v| v as f64).collect();
            fields.iter().map(|f| f.phi(&p)).fold(f64::INFINITY, f64::min)
        })
        .collect();
    (phi, rng)
}

fn generate_volume(spec: &SyntheticSpec, index: usize) -> Result<AnnotatedVolume, DataError> {
    let ext = &spec.extents;
    let (phi, mut rng) = structure_field(spec, index);
    let clean: Vec<f64> = phi.iter().map(|&v| (v <= 0.0) as u8 as f64).collect();

    let band = spec.jitter.low.abs().max(spec.jitter.high.abs()) + 1.0;
    let mut annotations = Vec::with_capacity(spec.n_raters);
    for _ in 0..spec.n_raters {
        let delta = truncated_normal(spec.jitter.mean, spec.jitter.sd, spec.jitter.low, spec.jitter.high, &mut rng)?;
        let values = phi
            .iter()
            .map(|&v| {
                let inside = v <= delta;
                let flip = v.abs() <= band && rng.random::<f64>() < spec.flip_prob;
                (inside ^ flip) as u8
            })
            .collect();
        annotations.push(BinaryMask::new(ext.clone(), values).expect("binary by construction"));
    }

    let noise = Normal::new(0.0, spec.noise_sd.max(f64::MIN_POSITIVE)).expect("sd >= 0");
    let image = gaussian_blur(&clean, ext, spec.blur_sigma)
        .into_iter()
        .map(|v| (if spec.noise_sd > 0.0 { v + noise.sample(&mut rng) } else { v }) as f32)
        .collect();
    Ok(AnnotatedVolume {
        id: format!("case{index:03}"),
        shape: ext.clone(),
        image,
        annotations,
    })
}

/// Deterministic per `spec.seed`; each volume draws from its own stream, so
/// volumes are independent of generation order.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let volumes = (0..spec.n_images)
        .map(|i| generate_volume(spec, i))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let splits = Splits::proportional(spec.n_images, &mut rng);
    Ok(Dataset {
        spec: spec.clone(),
        volumes,
        splits,
    })
}
