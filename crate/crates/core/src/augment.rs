//! Patch extraction and paired image/label augmentation.
//!
//! Every spatial transform is applied identically to the image (trilinear
//! resampling) and the label map (nearest neighbour), so label values never
//! leave `{0, 1, 2, 4}`. Samples falling outside the grid read as 0.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::{crop, voxel_count, Dims, LabelMap, MultiModalVolume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Cubic patch edge in voxels.
    pub patch_size: usize,
    /// Rotation angle range in degrees.
    pub rotation_deg: (f64, f64),
    pub gain: (f32, f32),
    pub gamma: (f32, f32),
    /// Standard deviation of control-point displacements, in voxels.
    pub elastic_sigma: f32,
    /// Control-point spacing in voxels.
    pub elastic_spacing: usize,
    /// Probability that a sample is augmented at all.
    pub probability: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            patch_size: 32,
            rotation_deg: (0.0, 30.0),
            gain: (0.8, 1.2),
            gamma: (0.8, 1.2),
            elastic_sigma: 5.0,
            elastic_spacing: 32,
            probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Full-scale settings (128³ patches).
    pub fn full_scale() -> Self {
        AugmentationConfig {
            patch_size: 128,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config(format!(
                "augmentation probability {} outside [0, 1]",
                self.probability
            )));
        }
        if self.rotation_deg.0 > self.rotation_deg.1
            || self.gain.0 > self.gain.1
            || self.gamma.0 > self.gamma.1
        {
            return Err(Error::config("augmentation ranges must be nonempty"));
        }
        if self.gamma.0 <= 0.0 || self.gain.0 <= 0.0 {
            return Err(Error::config("gain and gamma must be positive"));
        }
        if self.patch_size == 0 || self.elastic_spacing == 0 {
            return Err(Error::config(
                "patch size and elastic spacing must be positive",
            ));
        }
        if !(self.elastic_sigma >= 0.0) {
            return Err(Error::config("elastic sigma must be nonnegative"));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Largest valid patch corner per axis (`dims - size`).
pub fn max_patch_corner(dims: Dims, size: Dims) -> Result<Dims> {
    if (0..3).any(|a| size[a] > dims[a]) {
        return Err(Error::shape(format!(
            "patch {size:?} larger than volume {dims:?}"
        )));
    }
    Ok([0, 1, 2].map(|a| dims[a] - size[a]))
}

/// Cuts the same uniformly placed window out of the image and label map.
pub fn extract_patch<R: Rng + ?Sized>(
    v: &MultiModalVolume,
    m: &LabelMap,
    size: Dims,
    rng: &mut R,
) -> Result<(MultiModalVolume, LabelMap)> {
    if v.dims() != m.dims() {
        return Err(Error::shape(format!(
            "image {:?} and labels {:?} differ",
            v.dims(),
            m.dims()
        )));
    }
    let max = max_patch_corner(v.dims(), size)?;
    let corner = max.map(|hi| rng.gen_range(0..=hi));
    Ok((crop(v, corner, size)?, crop(m, corner, size)?))
}

fn flip_index(dims: Dims, axes: [bool; 3], x: usize, y: usize, z: usize) -> usize {
    let fx = if axes[0] { dims[0] - 1 - x } else { x };
    let fy = if axes[1] { dims[1] - 1 - y } else { y };
    let fz = if axes[2] { dims[2] - 1 - z } else { z };
    (fx * dims[1] + fy) * dims[2] + fz
}

/// Mirrors the selected axes.
pub fn flip(v: &MultiModalVolume, m: &LabelMap, axes: [bool; 3]) -> (MultiModalVolume, LabelMap) {
    let dims = v.dims();
    let n = voxel_count(dims);
    let mut out_v = v.clone();
    let mut out_m = m.data().to_vec();
    let mut idx = 0;
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let src = flip_index(dims, axes, x, y, z);
                for c in 0..v.channels() {
                    out_v.data_mut()[c * n + idx] = v.data()[c * n + src];
                }
                out_m[idx] = m.data()[src];
                idx += 1;
            }
        }
    }
    (out_v, LabelMap::from_raw_unchecked(dims, out_m))
}

/// Flips each axis independently with probability 0.5.
pub fn random_flip<R: Rng + ?Sized>(
    v: &MultiModalVolume,
    m: &LabelMap,
    rng: &mut R,
) -> (MultiModalVolume, LabelMap) {
    let axes = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
    flip(v, m, axes)
}

/// Fractions within this distance of an integer are snapped to it, so
/// axis-aligned transforms resample exactly.
const SNAP: f64 = 1e-9;

fn split(coord: f64) -> (isize, f64) {
    let base = coord.floor();
    let mut frac = coord - base;
    let mut base = base as isize;
    if frac < SNAP {
        frac = 0.0;
    } else if frac > 1.0 - SNAP {
        frac = 0.0;
        base += 1;
    }
    (base, frac)
}

fn trilinear(channel: &[f32], dims: Dims, q: [f64; 3]) -> f32 {
    let parts = [split(q[0]), split(q[1]), split(q[2])];
    let mut acc = 0.0f64;
    for dx in 0..2 {
        let wx = if dx == 0 {
            1.0 - parts[0].1
        } else {
            parts[0].1
        };
        if wx == 0.0 {
            continue;
        }
        let x = parts[0].0 + dx as isize;
        if x < 0 || x as usize >= dims[0] {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 {
                1.0 - parts[1].1
            } else {
                parts[1].1
            };
            if wy == 0.0 {
                continue;
            }
            let y = parts[1].0 + dy as isize;
            if y < 0 || y as usize >= dims[1] {
                continue;
            }
            for dz in 0..2 {
                let wz = if dz == 0 {
                    1.0 - parts[2].1
                } else {
                    parts[2].1
                };
                if wz == 0.0 {
                    continue;
                }
                let z = parts[2].0 + dz as isize;
                if z < 0 || z as usize >= dims[2] {
                    continue;
                }
                let i = (x as usize * dims[1] + y as usize) * dims[2] + z as usize;
                acc += wx * wy * wz * channel[i] as f64;
            }
        }
    }
    acc as f32
}

fn nearest(labels: &[u8], dims: Dims, q: [f64; 3]) -> u8 {
    let idx = [0, 1, 2].map(|a| (q[a] + 0.5).floor() as isize);
    if (0..3).any(|a| idx[a] < 0 || idx[a] as usize >= dims[a]) {
        return 0;
    }
    labels[(idx[0] as usize * dims[1] + idx[1] as usize) * dims[2] + idx[2] as usize]
}

/// Pull-resamples image and labels: output voxel `p` reads the input at
/// `source(p)`.
fn resample<F>(v: &MultiModalVolume, m: &LabelMap, source: F) -> (MultiModalVolume, LabelMap)
where
    F: Fn([f64; 3]) -> [f64; 3],
{
    let dims = v.dims();
    let n = voxel_count(dims);
    let mut out_v = MultiModalVolume::zeros(v.channels(), dims);
    let mut out_m = vec![0u8; n];
    let mut idx = 0;
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let q = source([x as f64, y as f64, z as f64]);
                for c in 0..v.channels() {
                    out_v.data_mut()[c * n + idx] = trilinear(v.channel(c), dims, q);
                }
                out_m[idx] = nearest(m.data(), dims, q);
                idx += 1;
            }
        }
    }
    (out_v, LabelMap::from_raw_unchecked(dims, out_m))
}

/// Rotation matrix for `angle` radians about the unit vector `axis`.
fn rotation_matrix(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Rotates about the grid centre by `angle` radians around `axis`.
pub fn rotate(
    v: &MultiModalVolume,
    m: &LabelMap,
    axis: [f64; 3],
    angle: f64,
) -> Result<(MultiModalVolume, LabelMap)> {
    let norm = axis.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::config("rotation axis must be nonzero"));
    }
    let axis = axis.map(|a| a / norm);
    let r = rotation_matrix(axis, angle);
    let center = v.dims().map(|d| (d as f64 - 1.0) / 2.0);
    // inverse map: q = c + Rᵀ (p - c)
    Ok(resample(v, m, |p| {
        let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
        [0, 1, 2].map(|i| center[i] + r[0][i] * d[0] + r[1][i] * d[1] + r[2][i] * d[2])
    }))
}

/// Uniform random axis on the sphere, angle uniform in `range_deg`.
pub fn random_rotate<R: Rng + ?Sized>(
    v: &MultiModalVolume,
    m: &LabelMap,
    range_deg: (f64, f64),
    rng: &mut R,
) -> Result<(MultiModalVolume, LabelMap)> {
    let angle = if range_deg.1 > range_deg.0 {
        rng.gen_range(range_deg.0..=range_deg.1)
    } else {
        range_deg.0
    };
    let mut axis = [0.0f64; 3];
    while axis.iter().map(|a| a * a).sum::<f64>() < 1e-12 {
        axis = [0, 1, 2].map(|_| StandardNormal.sample(rng));
    }
    rotate(v, m, axis, angle.to_radians())
}

/// Power-law intensity transform with fixed `gain` and `gamma`.
///
/// Per channel, nonzero voxels are rescaled to `[0, 1]` over their min/max,
/// mapped through `gain · t^gamma` and scaled back. Zero voxels stay 0 and
/// channels with a constant nonzero intensity are left untouched.
pub fn gamma_transform_with(v: &MultiModalVolume, gain: f32, gamma: f32) -> MultiModalVolume {
    let mut out = v.clone();
    for c in 0..v.channels() {
        let values = v.channel(c);
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &x in values.iter().filter(|&&x| x != 0.0) {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if !(hi > lo) {
            continue;
        }
        let range = (hi - lo) as f64;
        for x in out.channel_mut(c).iter_mut().filter(|x| **x != 0.0) {
            let t = (*x - lo) as f64 / range;
            let mapped = gain as f64 * t.powf(gamma as f64);
            *x = (lo as f64 + mapped * range) as f32;
        }
    }
    out
}

pub fn gamma_transform<R: Rng + ?Sized>(
    v: &MultiModalVolume,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> MultiModalVolume {
    let gain = draw(rng, cfg.gain);
    let gamma = draw(rng, cfg.gamma);
    gamma_transform_with(v, gain, gamma)
}

/// Control-point displacements of an elastic deformation.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    spacing: usize,
    counts: [usize; 3],
    /// Displacements `(dx, dy, dz)` in voxels, row-major over `counts`.
    displacements: Vec<[f32; 3]>,
}

impl ControlGrid {
    /// Control points sit every `spacing` voxels from the origin and cover
    /// the grid. An axis no longer than `spacing` gets a single control
    /// plane, so an oversized spacing degenerates to a global translation.
    pub fn counts_for(dims: Dims, spacing: usize) -> [usize; 3] {
        dims.map(|d| {
            if spacing >= d {
                1
            } else {
                (d - 1).div_ceil(spacing) + 1
            }
        })
    }

    pub fn constant(dims: Dims, spacing: usize, displacement: [f32; 3]) -> Self {
        let counts = Self::counts_for(dims, spacing);
        ControlGrid {
            spacing,
            counts,
            displacements: vec![displacement; counts.iter().product()],
        }
    }

    pub fn random<R: Rng + ?Sized>(dims: Dims, spacing: usize, sigma: f32, rng: &mut R) -> Self {
        let counts = Self::counts_for(dims, spacing);
        let normal = Normal::new(0.0f32, sigma.max(0.0)).expect("nonnegative sigma");
        let displacements = (0..counts.iter().product::<usize>())
            .map(|_| [0, 1, 2].map(|_| normal.sample(rng)))
            .collect();
        ControlGrid {
            spacing,
            counts,
            displacements,
        }
    }

    /// Dense displacement at voxel `p` by trilinear interpolation.
    fn displacement(&self, p: [f64; 3]) -> [f64; 3] {
        let mut lo = [0usize; 3];
        let mut t = [0.0f64; 3];
        for a in 0..3 {
            if self.counts[a] > 1 {
                let g = p[a] / self.spacing as f64;
                let i = (g.floor() as usize).min(self.counts[a] - 2);
                lo[a] = i;
                t[a] = g - i as f64;
            }
        }
        let mut out = [0.0f64; 3];
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                if self.counts[a] == 1 {
                    if bit == 1 {
                        w = 0.0;
                    }
                    idx[a] = 0;
                } else {
                    w *= if bit == 1 { t[a] } else { 1.0 - t[a] };
                    idx[a] = lo[a] + bit;
                }
            }
            if w == 0.0 {
                continue;
            }
            let d =
                self.displacements[(idx[0] * self.counts[1] + idx[1]) * self.counts[2] + idx[2]];
            for a in 0..3 {
                out[a] += w * d[a] as f64;
            }
        }
        out
    }
}

/// Warps image and labels: output voxel `p` reads the input at
/// `p + displacement(p)`.
pub fn elastic_deform_with(
    v: &MultiModalVolume,
    m: &LabelMap,
    grid: &ControlGrid,
) -> (MultiModalVolume, LabelMap) {
    resample(v, m, |p| {
        let d = grid.displacement(p);
        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
    })
}

pub fn elastic_deform<R: Rng + ?Sized>(
    v: &MultiModalVolume,
    m: &LabelMap,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> (MultiModalVolume, LabelMap) {
    let grid = ControlGrid::random(v.dims(), cfg.elastic_spacing, cfg.elastic_sigma, rng);
    elastic_deform_with(v, m, &grid)
}

/// Which transforms a call applied, in application order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Applied {
    pub flip: bool,
    pub rotate: bool,
    pub elastic: bool,
    pub gamma: bool,
}

impl Applied {
    pub fn any(&self) -> bool {
        self.flip || self.rotate || self.elastic || self.gamma
    }
}

/// With probability `1 - cfg.probability` returns the inputs unchanged;
/// otherwise applies a uniformly drawn nonempty subset of
/// {flip, rotate, elastic, gamma} in that order.
pub fn augment<R: Rng + ?Sized>(
    v: &MultiModalVolume,
    m: &LabelMap,
    cfg: &AugmentationConfig,
    rng: &mut R,
) -> Result<(MultiModalVolume, LabelMap, Applied)> {
    if v.dims() != m.dims() {
        return Err(Error::shape(format!(
            "image {:?} and labels {:?} differ",
            v.dims(),
            m.dims()
        )));
    }
    if !rng.gen_bool(cfg.probability) {
        return Ok((v.clone(), m.clone(), Applied::default()));
    }
    let subset: u8 = rng.gen_range(1..16);
    let applied = Applied {
        flip: subset & 1 != 0,
        rotate: subset & 2 != 0,
        elastic: subset & 4 != 0,
        gamma: subset & 8 != 0,
    };
    let (mut v, mut m) = (v.clone(), m.clone());
    if applied.flip {
        (v, m) = random_flip(&v, &m, rng);
    }
    if applied.rotate {
        (v, m) = random_rotate(&v, &m, cfg.rotation_deg, rng)?;
    }
    if applied.elastic {
        (v, m) = elastic_deform(&v, &m, cfg, rng);
    }
    if applied.gamma {
        v = gamma_transform(&v, cfg, rng);
    }
    Ok((v, m, applied))
}
