//! Multi-channel volumes, label maps and their encodings.
//!
//! All grids are stored row-major with the last spatial axis fastest;
//! multi-channel data is channel-major `(C, X, Y, Z)`.

mod dataset;
mod nifti_io;
mod phantom;

pub use dataset::{load_dataset, load_subject, subject_dirs, Subject};

pub use nifti_io::{
    load_label_map, load_subject_dir, load_volume, read_spacing, reference_image,
    segmentation_path, save_label_map,
    save_label_map_like, save_volume, MODALITY_SUFFIXES, SEGMENTATION_SUFFIX,
};
pub use phantom::{
    generate_phantom, read_manifest, subject_name, write_phantom_dataset, ManifestEntry,
    PhantomSpec, MANIFEST_FILE,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial grid size `(X, Y, Z)`.
pub type Dims = [usize; 3];

/// Label values in channel order (background, NCR/NET, ED, ET).
pub const LABELS: [u8; 4] = [0, 1, 2, 4];

/// Number of imaging channels: T1, T1Gd, T2, FLAIR.
pub const MODALITIES: usize = 4;

/// Number of segmentation classes.
pub const NUM_CLASSES: usize = 4;

pub fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

/// Channel index of a label value, or `None` when it is not a valid label.
pub fn label_channel(label: u8) -> Option<usize> {
    LABELS.iter().position(|&l| l == label)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    channels: usize,
    dims: Dims,
    data: Vec<f32>,
}

impl MultiModalVolume {
    pub fn new(channels: usize, dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * voxel_count(dims) {
            return Err(Error::shape(format!(
                "{channels} channels of {dims:?} need {} values, got {}",
                channels * voxel_count(dims),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::shape(format!("non-finite intensity at index {i}")));
        }
        Ok(MultiModalVolume {
            channels,
            dims,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: Dims) -> Self {
        MultiModalVolume {
            channels,
            dims,
            data: vec![0.0; channels * voxel_count(dims)],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = voxel_count(self.dims);
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Voxels that are nonzero in at least one channel.
    pub fn brain_mask(&self) -> Vec<bool> {
        let n = voxel_count(self.dims);
        (0..n)
            .map(|i| (0..self.channels).any(|c| self.data[c * n + i] != 0.0))
            .collect()
    }

    /// `(C, X, Y, Z)` tensor view as an owned copy.
    pub fn to_tensor(&self) -> Tensor {
        let [x, y, z] = self.dims;
        Tensor::from_vec(&[self.channels, x, y, z], self.data.clone())
            .expect("volume length matches its shape")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    dims: Dims,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, data: Vec<u8>) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(Error::shape(format!(
                "label map {dims:?} needs {} values, got {}",
                voxel_count(dims),
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&l| label_channel(l).is_none()) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(LabelMap { dims, data })
    }

    pub fn background(dims: Dims) -> Self {
        LabelMap {
            dims,
            data: vec![0; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Writes go through [`LabelMap::set`] so the label set stays valid.
    pub fn get(&self, index: usize) -> u8 {
        self.data[index]
    }

    pub fn set(&mut self, index: usize, label: u8) -> Result<()> {
        if label_channel(label).is_none() {
            return Err(Error::InvalidLabel(label));
        }
        self.data[index] = label;
        Ok(())
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    /// Occurrence counts in [`LABELS`] order.
    pub fn histogram(&self) -> [usize; 4] {
        let mut h = [0; 4];
        for &l in &self.data {
            h[label_channel(l).expect("label map holds valid labels")] += 1;
        }
        h
    }

    pub(crate) fn from_raw_unchecked(dims: Dims, data: Vec<u8>) -> Self {
        debug_assert!(data.iter().all(|&l| label_channel(l).is_some()));
        LabelMap { dims, data }
    }
}

/// Four-channel per-voxel class probabilities, channel order as [`LABELS`].
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotSegmentation {
    dims: Dims,
    data: Vec<f32>,
}

impl OneHotSegmentation {
    /// Tolerance on the per-voxel channel sum.
    pub const SUM_TOLERANCE: f32 = 1e-5;

    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        let n = voxel_count(dims);
        if data.len() != NUM_CLASSES * n {
            return Err(Error::shape(format!(
                "segmentation {dims:?} needs {} values, got {}",
                NUM_CLASSES * n,
                data.len()
            )));
        }
        for i in 0..n {
            let mut sum = 0.0f32;
            for c in 0..NUM_CLASSES {
                let p = data[c * n + i];
                if !(-Self::SUM_TOLERANCE..=1.0 + Self::SUM_TOLERANCE).contains(&p) {
                    return Err(Error::shape(format!(
                        "probability {p} out of [0, 1] at voxel {i}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::shape(format!(
                    "channel sum {sum} differs from 1 at voxel {i}"
                )));
            }
        }
        Ok(OneHotSegmentation { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = voxel_count(self.dims);
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor {
        let [x, y, z] = self.dims;
        Tensor::from_vec(&[NUM_CLASSES, x, y, z], self.data.clone())
            .expect("segmentation length matches its shape")
    }

    /// Accepts a `(4, X, Y, Z)` tensor, validating the probability invariant.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [NUM_CLASSES, x, y, z] => OneHotSegmentation::new([x, y, z], t.into_data()),
            _ => Err(Error::shape(format!(
                "expected a (4, X, Y, Z) segmentation tensor, got {:?}",
                t.shape()
            ))),
        }
    }
}

/// Per-channel z-score over brain voxels (nonzero in any channel).
///
/// Background voxels stay exactly 0. Statistics use the population standard
/// deviation.
pub fn normalize(v: &MultiModalVolume) -> Result<MultiModalVolume> {
    let mask = v.brain_mask();
    let count = mask.iter().filter(|&&m| m).count();
    let mut out = v.clone();
    for c in 0..v.channels() {
        if count < 2 {
            return Err(Error::DegenerateChannel {
                channel: c,
                reason: "fewer than 2 nonzero voxels",
            });
        }
        let values = v.channel(c);
        let mean = values
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x as f64)
            .sum::<f64>()
            / count as f64;
        let var = values
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(&x, _)| (x as f64 - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        let std = var.sqrt();
        if std <= f64::EPSILON * mean.abs().max(1.0) {
            return Err(Error::DegenerateChannel {
                channel: c,
                reason: "zero variance",
            });
        }
        for (x, &m) in out.channel_mut(c).iter_mut().zip(&mask) {
            *x = if m {
                ((*x as f64 - mean) / std) as f32
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

pub fn to_categorical(m: &LabelMap) -> OneHotSegmentation {
    let n = voxel_count(m.dims());
    let mut data = vec![0.0f32; NUM_CLASSES * n];
    for (i, &l) in m.data().iter().enumerate() {
        let c = label_channel(l).expect("label map holds valid labels");
        data[c * n + i] = 1.0;
    }
    OneHotSegmentation {
        dims: m.dims(),
        data,
    }
}

/// Per-voxel argmax, ties resolved toward the lowest channel.
pub fn from_categorical(s: &OneHotSegmentation) -> LabelMap {
    let n = voxel_count(s.dims());
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..NUM_CLASSES {
                if s.data[c * n + i] > s.data[best * n + i] {
                    best = c;
                }
            }
            LABELS[best]
        })
        .collect();
    LabelMap::from_raw_unchecked(s.dims(), data)
}

/// Grids that can be windowed and embedded without resampling.
pub trait Spatial: Sized {
    fn dims(&self) -> Dims;

    /// The sub-grid starting at `offset` with size `size`.
    fn window(&self, offset: Dims, size: Dims) -> Self;

    /// Places `self` at `offset` inside a `size` grid filled with the
    /// type's background value.
    fn embed(&self, offset: Dims, size: Dims) -> Self;
}

fn copy_window<T: Copy>(
    src: &[T],
    channels: usize,
    src_dims: Dims,
    offset: Dims,
    size: Dims,
) -> Vec<T> {
    let mut out = Vec::with_capacity(channels * voxel_count(size));
    let [sx, sy, sz] = src_dims;
    for c in 0..channels {
        for x in 0..size[0] {
            for y in 0..size[1] {
                let start = ((c * sx + offset[0] + x) * sy + offset[1] + y) * sz + offset[2];
                out.extend_from_slice(&src[start..start + size[2]]);
            }
        }
    }
    out
}

fn embed_window<T: Copy>(
    src: &[T],
    channels: usize,
    src_dims: Dims,
    offset: Dims,
    size: Dims,
    fill: impl Fn(usize) -> T,
) -> Vec<T> {
    let n = voxel_count(size);
    let mut out: Vec<T> = (0..channels)
        .flat_map(|c| (0..n).map(move |_| c))
        .map(&fill)
        .collect();
    let [dx, dy, dz] = size;
    for c in 0..channels {
        for x in 0..src_dims[0] {
            for y in 0..src_dims[1] {
                let from = ((c * src_dims[0] + x) * src_dims[1] + y) * src_dims[2];
                let to = ((c * dx + offset[0] + x) * dy + offset[1] + y) * dz + offset[2];
                out[to..to + src_dims[2]].copy_from_slice(&src[from..from + src_dims[2]]);
            }
        }
    }
    out
}

impl Spatial for MultiModalVolume {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn window(&self, offset: Dims, size: Dims) -> Self {
        MultiModalVolume {
            channels: self.channels,
            dims: size,
            data: copy_window(&self.data, self.channels, self.dims, offset, size),
        }
    }

    fn embed(&self, offset: Dims, size: Dims) -> Self {
        MultiModalVolume {
            channels: self.channels,
            dims: size,
            data: embed_window(&self.data, self.channels, self.dims, offset, size, |_| 0.0),
        }
    }
}

impl Spatial for LabelMap {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn window(&self, offset: Dims, size: Dims) -> Self {
        LabelMap {
            dims: size,
            data: copy_window(&self.data, 1, self.dims, offset, size),
        }
    }

    fn embed(&self, offset: Dims, size: Dims) -> Self {
        LabelMap {
            dims: size,
            data: embed_window(&self.data, 1, self.dims, offset, size, |_| 0),
        }
    }
}

impl Spatial for OneHotSegmentation {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn window(&self, offset: Dims, size: Dims) -> Self {
        OneHotSegmentation {
            dims: size,
            data: copy_window(&self.data, NUM_CLASSES, self.dims, offset, size),
        }
    }

    /// Margins are certain background (probability 1 on channel 0).
    fn embed(&self, offset: Dims, size: Dims) -> Self {
        OneHotSegmentation {
            dims: size,
            data: embed_window(&self.data, NUM_CLASSES, self.dims, offset, size, |c| {
                if c == 0 {
                    1.0
                } else {
                    0.0
                }
            }),
        }
    }
}

/// Offset of a centered `target` window inside `source`: `floor((s - t) / 2)`.
pub fn center_offset(source: Dims, target: Dims) -> Dims {
    [0, 1, 2].map(|a| (source[a] - target[a]) / 2)
}

/// Sub-grid at `offset` of size `size`, bounds-checked.
pub fn crop<V: Spatial>(v: &V, offset: Dims, size: Dims) -> Result<V> {
    let dims = v.dims();
    if (0..3).any(|a| offset[a] + size[a] > dims[a]) {
        return Err(Error::shape(format!(
            "window {size:?} at {offset:?} exceeds grid {dims:?}"
        )));
    }
    Ok(v.window(offset, size))
}

/// Spatially centered crop; when the margin is odd the extra voxel is
/// dropped from the high end.
pub fn center_crop<V: Spatial>(v: &V, target: Dims) -> Result<V> {
    let dims = v.dims();
    if (0..3).any(|a| target[a] > dims[a]) {
        return Err(Error::shape(format!(
            "crop target {target:?} larger than source {dims:?}"
        )));
    }
    Ok(v.window(center_offset(dims, target), target))
}
