//! NIfTI-1 (`.nii` / `.nii.gz`) reading and writing.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, ArrayD, Axis};
use nifti::writer::WriterOptions;
use nifti::{InMemNiftiObject, IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::{Dims, LabelMap, MultiModalVolume, MODALITIES};
use crate::error::{Error, Result};

/// Per-modality file suffixes in channel order (T1, T1Gd, T2, FLAIR).
pub const MODALITY_SUFFIXES: [&str; MODALITIES] = ["_t1", "_t1ce", "_t2", "_flair"];

pub const SEGMENTATION_SUFFIX: &str = "_seg";

fn read_object(path: &Path) -> Result<InMemNiftiObject> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(ReaderOptions::new().read_file(path)?)
}

fn read_array(path: &Path) -> Result<ArrayD<f32>> {
    let obj = read_object(path)?;
    Ok(obj.into_volume().into_ndarray::<f32>()?)
}

fn dims3(shape: &[usize]) -> Dims {
    [shape[0], shape[1], shape[2]]
}

/// Finds `<dir>/*<suffix>.nii.gz` (or `.nii`).
fn find_with_suffix(dir: &Path, suffix: &str) -> Result<PathBuf> {
    let mut matches = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let stem = name
            .strip_suffix(".nii.gz")
            .or_else(|| name.strip_suffix(".nii"));
        if stem.is_some_and(|s| s.ends_with(suffix)) {
            matches.push(path);
        }
    }
    matches.sort();
    matches
        .into_iter()
        .next()
        .ok_or_else(|| Error::MissingFile(dir.join(format!("*{suffix}.nii.gz"))))
}

/// Loads a four-channel volume.
///
/// `path` is either a directory holding one file per modality (named with
/// [`MODALITY_SUFFIXES`]) or a single 4D file with the channels on the
/// fourth axis.
pub fn load_volume(path: &Path) -> Result<MultiModalVolume> {
    if path.is_dir() {
        let mut dims: Option<Dims> = None;
        let mut data = Vec::new();
        for suffix in MODALITY_SUFFIXES {
            let file = find_with_suffix(path, suffix)?;
            let arr = read_array(&file)?;
            if arr.ndim() != 3 {
                return Err(Error::shape(format!(
                    "{} has {} axes, expected 3",
                    file.display(),
                    arr.ndim()
                )));
            }
            let d = dims3(arr.shape());
            match dims {
                Some(expected) if expected != d => {
                    return Err(Error::shape(format!(
                        "shape mismatch: {} is {d:?}, expected {expected:?}",
                        file.display()
                    )))
                }
                _ => dims = Some(d),
            }
            data.extend(arr.as_standard_layout().iter().copied());
        }
        let dims = dims.expect("four modalities were read");
        MultiModalVolume::new(MODALITIES, dims, data)
    } else {
        let arr = read_array(path)?;
        if arr.ndim() != 4 || arr.shape()[3] != MODALITIES {
            return Err(Error::shape(format!(
                "{} has shape {:?}, expected (X, Y, Z, {MODALITIES})",
                path.display(),
                arr.shape()
            )));
        }
        let dims = dims3(arr.shape());
        let mut data = Vec::with_capacity(arr.len());
        for c in 0..MODALITIES {
            let channel = arr.index_axis(Axis(3), c);
            data.extend(channel.as_standard_layout().iter().copied());
        }
        MultiModalVolume::new(MODALITIES, dims, data)
    }
}

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let arr = read_array(path)?;
    if arr.ndim() != 3 {
        return Err(Error::shape(format!(
            "{} has shape {:?}, expected 3 axes",
            path.display(),
            arr.shape()
        )));
    }
    let dims = dims3(arr.shape());
    let mut data = Vec::with_capacity(arr.len());
    for &v in arr.as_standard_layout().iter() {
        let rounded = v.round();
        if !(0.0..=255.0).contains(&rounded) || (v - rounded).abs() > 1e-3 {
            return Err(Error::shape(format!(
                "{} holds non-integer label {v}",
                path.display()
            )));
        }
        data.push(rounded as u8);
    }
    LabelMap::new(dims, data)
}

/// Voxel spacing in millimetres from the header's `pixdim`.
pub fn read_spacing(path: &Path) -> Result<[f64; 3]> {
    let obj = read_object(path)?;
    let h = obj.header();
    let spacing = [h.pixdim[1], h.pixdim[2], h.pixdim[3]].map(|s| {
        let s = s.abs() as f64;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    });
    Ok(spacing)
}

fn label_array(m: &LabelMap) -> Array3<u8> {
    let [x, y, z] = m.dims();
    Array3::from_shape_vec((x, y, z), m.data().to_vec()).expect("label map length matches")
}

/// Writes an integer label map; `.nii.gz` paths are gzip-compressed.
pub fn save_label_map(path: &Path, m: &LabelMap) -> Result<()> {
    WriterOptions::new(path).write_nifti(&label_array(m))?;
    Ok(())
}

/// Writes a label map reusing the geometry of `reference` (affine, spacing).
pub fn save_label_map_like(path: &Path, m: &LabelMap, reference: &Path) -> Result<()> {
    let obj = read_object(reference)?;
    let header: NiftiHeader = obj.header().clone();
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&label_array(m))?;
    Ok(())
}

/// Writes a volume as one 4D file with channels on the fourth axis.
pub fn save_volume(path: &Path, v: &MultiModalVolume) -> Result<()> {
    let [x, y, z] = v.dims();
    let c = v.channels();
    let mut arr = Array4::<f32>::zeros((x, y, z, c));
    for ch in 0..c {
        let src = Array3::from_shape_vec((x, y, z), v.channel(ch).to_vec())
            .expect("channel length matches");
        arr.index_axis_mut(Axis(3), ch).assign(&src);
    }
    WriterOptions::new(path).write_nifti(&arr)?;
    Ok(())
}

/// Writes one single-channel file per modality into `dir`, named
/// `<stem><suffix>.nii.gz`.
pub(crate) fn save_modalities(dir: &Path, stem: &str, v: &MultiModalVolume) -> Result<()> {
    let [x, y, z] = v.dims();
    for (ch, suffix) in MODALITY_SUFFIXES.iter().enumerate() {
        let arr = Array3::from_shape_vec((x, y, z), v.channel(ch).to_vec())
            .expect("channel length matches");
        WriterOptions::new(dir.join(format!("{stem}{suffix}.nii.gz"))).write_nifti(&arr)?;
    }
    Ok(())
}

/// First modality file of a subject directory, whose header predictions reuse.
pub fn reference_image(dir: &Path) -> Result<PathBuf> {
    find_with_suffix(dir, MODALITY_SUFFIXES[0])
}

pub fn segmentation_path(dir: &Path) -> Result<PathBuf> {
    find_with_suffix(dir, SEGMENTATION_SUFFIX)
}

/// Modalities, optional segmentation and voxel spacing of one subject
/// directory.
pub fn load_subject_dir(dir: &Path) -> Result<(MultiModalVolume, Option<LabelMap>, [f64; 3])> {
    let volume = load_volume(dir)?;
    let spacing = read_spacing(&reference_image(dir)?)?;
    let labels = match segmentation_path(dir) {
        Ok(path) => Some(load_label_map(&path)?),
        Err(Error::MissingFile(_)) => None,
        Err(e) => return Err(e),
    };
    if let Some(l) = &labels {
        if l.dims() != volume.dims() {
            return Err(Error::shape(format!(
                "shape mismatch: segmentation {:?} vs image {:?} in {}",
                l.dims(),
                volume.dims(),
                dir.display()
            )));
        }
    }
    Ok((volume, labels, spacing))
}
