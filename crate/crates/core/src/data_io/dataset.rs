//! Subjects loaded from a dataset directory, one subdirectory each.

use std::path::{Path, PathBuf};

use super::nifti_io::load_subject_dir;
use super::{normalize, LabelMap, MultiModalVolume};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub name: String,
    /// Brain-mask z-scored modalities.
    pub volume: MultiModalVolume,
    pub labels: Option<LabelMap>,
    pub spacing: [f64; 3],
}

impl Subject {
    pub fn labels(&self) -> Result<&LabelMap> {
        self.labels
            .as_ref()
            .ok_or_else(|| Error::config(format!("subject {} has no segmentation", self.name)))
    }
}

pub fn load_subject(dir: &Path) -> Result<Subject> {
    let (raw, labels, spacing) = load_subject_dir(dir)?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Subject {
        name,
        volume: normalize(&raw)?,
        labels,
        spacing,
    })
}

/// Subject subdirectories of a dataset directory, in name order.
pub fn subject_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut dirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(dirs)
}

/// Every subdirectory of `dir`, in name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Subject>> {
    subject_dirs(dir)?.iter().map(|d| load_subject(d)).collect()
}
