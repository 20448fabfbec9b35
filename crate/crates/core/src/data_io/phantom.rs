//! Synthetic brain-tumour phantoms.
//!
//! An ellipsoidal brain holds three concentric ellipsoids: the whole tumour
//! (edema shell), the tumour core (NCR/NET shell) and the enhancing core.
//! Region contrasts differ per channel so that no single channel separates
//! every class.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::nifti_io::{save_label_map, save_modalities};
use super::{voxel_count, Dims, LabelMap, MultiModalVolume, MODALITIES, SEGMENTATION_SUFFIX};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub seed: u64,
    /// Mean intensity per region (rows: healthy brain, NCR/NET, ED, ET) and
    /// channel (columns: T1, T1Gd, T2, FLAIR).
    pub contrast: [[f32; MODALITIES]; 4],
    /// Additive Gaussian noise, in contrast units.
    pub noise_std: f32,
    /// Range of the per-channel raw intensity gain.
    pub intensity_gain: (f32, f32),
    /// Brain semi-axes as fractions of the half extent of each axis.
    pub brain_radius: [f32; 3],
    /// Whole-tumour semi-axes as fractions of the smallest grid extent.
    pub tumor_radius: (f32, f32),
    /// Tumour-core semi-axes relative to the whole tumour.
    pub core_ratio: (f32, f32),
    /// Enhancing-core semi-axes relative to the tumour core; `(0, 0)`
    /// produces no enhancing voxels.
    pub enhancing_ratio: (f32, f32),
    /// Tumour centre offset as a fraction of the free space in the brain.
    pub center_spread: f32,
    /// Probability that a phantom has no enhancing tumour.
    pub no_enhancing_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 32, 32],
            seed: 0,
            contrast: [
                [1.0, 1.0, 1.0, 1.0],
                [0.55, 0.6, 1.7, 1.3],
                [0.8, 1.0, 1.5, 1.7],
                [0.8, 1.8, 1.4, 1.35],
            ],
            noise_std: 0.1,
            intensity_gain: (80.0, 120.0),
            brain_radius: [0.85, 0.9, 0.8],
            tumor_radius: (0.15, 0.25),
            core_ratio: (0.45, 0.7),
            enhancing_ratio: (0.35, 0.6),
            center_spread: 0.5,
            no_enhancing_fraction: 0.07,
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f32, f32)) -> f32 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn inside(p: [f32; 3], center: [f32; 3], radii: [f32; 3]) -> bool {
    if radii.iter().any(|&r| r <= 0.0) {
        return false;
    }
    (0..3)
        .map(|a| ((p[a] - center[a]) / radii[a]).powi(2))
        .sum::<f32>()
        <= 1.0
}

/// Renders one phantom. Deterministic in `spec` (including its seed).
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(MultiModalVolume, LabelMap)> {
    let dims = spec.dims;
    if dims.iter().any(|&d| d < 4) {
        return Err(Error::config(format!("phantom grid {dims:?} is too small")));
    }
    let mut rng = stream(spec.seed, &[]);
    let center = dims.map(|d| (d as f32 - 1.0) / 2.0);
    let brain = [0, 1, 2].map(|a| spec.brain_radius[a] * dims[a] as f32 / 2.0);
    let min_extent = *dims.iter().min().expect("three axes") as f32;
    let tumor = [0, 1, 2].map(|_| uniform(&mut rng, spec.tumor_radius) * min_extent);
    if (0..3).any(|a| tumor[a] >= brain[a] || brain[a] > dims[a] as f32 / 2.0) {
        return Err(Error::config(format!(
            "tumour semi-axes {tumor:?} do not fit in brain {brain:?} on grid {dims:?}"
        )));
    }
    let core = tumor.map(|r| r * uniform(&mut rng, spec.core_ratio));
    let mut enhancing = core.map(|r| r * uniform(&mut rng, spec.enhancing_ratio));
    if rng.gen_bool(spec.no_enhancing_fraction.clamp(0.0, 1.0)) {
        enhancing = [0.0; 3];
    }
    let tumor_center = [0, 1, 2].map(|a| {
        let free = brain[a] - tumor[a];
        center[a] + rng.gen_range(-1.0f32..=1.0) * free * spec.center_spread
    });
    let gains: Vec<f32> = (0..MODALITIES)
        .map(|_| uniform(&mut rng, spec.intensity_gain))
        .collect();
    let noise = Normal::new(0.0f32, spec.noise_std.max(0.0))
        .map_err(|e| Error::config(format!("noise: {e}")))?;

    let n = voxel_count(dims);
    let mut labels = vec![0u8; n];
    let mut data = vec![0.0f32; MODALITIES * n];
    let mut idx = 0;
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let p = [x as f32, y as f32, z as f32];
                if inside(p, center, brain) {
                    // region rows follow the label channel order
                    let region = if inside(p, tumor_center, enhancing) {
                        3
                    } else if inside(p, tumor_center, core) {
                        1
                    } else if inside(p, tumor_center, tumor) {
                        2
                    } else {
                        0
                    };
                    labels[idx] = super::LABELS[region];
                    for c in 0..MODALITIES {
                        let value = spec.contrast[region][c] + noise.sample(&mut rng);
                        data[c * n + idx] = gains[c] * value.max(1e-3);
                    }
                }
                idx += 1;
            }
        }
    }
    Ok((
        MultiModalVolume::new(MODALITIES, dims, data)?,
        LabelMap::new(dims, labels)?,
    ))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject: String,
    pub seed: u64,
}

pub fn subject_name(index: usize) -> String {
    format!("subject_{index:03}")
}

/// Writes `n` phantoms under `out_dir`, one directory per subject with the
/// four modality files and `<subject>_seg.nii.gz`, plus [`MANIFEST_FILE`].
pub fn write_phantom_dataset(
    out_dir: &Path,
    n: usize,
    base: &PhantomSpec,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(n);
    let mut manifest = String::from("# subject\tseed\n");
    for i in 0..n {
        let name = subject_name(i);
        let spec = PhantomSpec {
            seed: derive_seed(seed, &[i as u64]),
            ..base.clone()
        };
        let (volume, labels) = generate_phantom(&spec)?;
        let dir = out_dir.join(&name);
        std::fs::create_dir_all(&dir)?;
        save_modalities(&dir, &name, &volume)?;
        save_label_map(
            &dir.join(format!("{name}{SEGMENTATION_SUFFIX}.nii.gz")),
            &labels,
        )?;
        writeln!(manifest, "{name}\t{}", spec.seed).expect("writing to a String");
        entries.push(ManifestEntry {
            subject: name,
            seed: spec.seed,
        });
    }
    std::fs::write(out_dir.join(MANIFEST_FILE), manifest)?;
    Ok(entries)
}

pub fn read_manifest(dataset_dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path: PathBuf = dataset_dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|line| {
            let mut parts = line.split_whitespace();
            let subject = parts.next().unwrap_or_default().to_string();
            let seed = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::config(format!("malformed manifest line {line:?}")))?;
            Ok(ManifestEntry { subject, seed })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{load_label_map, load_volume};

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = PhantomSpec {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(
            generate_phantom(&spec).unwrap(),
            generate_phantom(&spec).unwrap()
        );
        let other = PhantomSpec {
            seed: 43,
            ..Default::default()
        };
        assert_ne!(
            generate_phantom(&spec).unwrap(),
            generate_phantom(&other).unwrap()
        );
    }

    #[test]
    fn zero_enhancing_radius_has_no_et() {
        let spec = PhantomSpec {
            enhancing_ratio: (0.0, 0.0),
            seed: 3,
            ..Default::default()
        };
        let (_, m) = generate_phantom(&spec).unwrap();
        assert_eq!(m.count(4), 0);
        assert!(m.count(1) > 0 && m.count(2) > 0);
    }

    #[test]
    fn default_64_phantom_histogram() {
        let spec = PhantomSpec {
            dims: [64, 64, 64],
            seed: 1,
            ..Default::default()
        };
        let (_, m) = generate_phantom(&spec).unwrap();
        let [bg, ncr, ed, et] = m.histogram();
        assert!(bg > 0 && ncr > 0 && ed > 0 && et > 0, "{:?}", m.histogram());
        assert!(et < ncr && et < ed, "{:?}", m.histogram());
    }

    #[test]
    fn labels_nested_inside_brain() {
        for seed in 0..20 {
            let spec = PhantomSpec {
                seed,
                ..Default::default()
            };
            let (v, m) = generate_phantom(&spec).unwrap();
            let mask = v.brain_mask();
            for (l, inside) in m.data().iter().zip(&mask) {
                assert!(*l == 0 || *inside);
            }
            // background outside the brain is exactly zero in every channel
            for c in 0..MODALITIES {
                for (val, inside) in v.channel(c).iter().zip(&mask) {
                    assert!(*inside || *val == 0.0);
                }
            }
        }
    }

    #[test]
    fn some_phantoms_lack_enhancing_tumour() {
        let missing = (0..400)
            .filter(|&seed| {
                let spec = PhantomSpec {
                    dims: [16, 16, 16],
                    seed,
                    ..Default::default()
                };
                generate_phantom(&spec).unwrap().1.count(4) == 0
            })
            .count();
        let fraction = missing as f64 / 400.0;
        assert!((0.03..0.12).contains(&fraction), "{fraction}");
    }

    #[test]
    fn oversized_tumour_rejected() {
        let spec = PhantomSpec {
            tumor_radius: (0.6, 0.7),
            ..Default::default()
        };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn dataset_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            dims: [8, 8, 8],
            tumor_radius: (0.2, 0.25),
            ..Default::default()
        };
        let entries = write_phantom_dataset(dir.path(), 3, &spec, 9).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), entries);
        let first = dir.path().join(&entries[0].subject);
        let v = load_volume(&first).unwrap();
        let m = load_label_map(&first.join(format!("{}_seg.nii.gz", entries[0].subject))).unwrap();
        let expected = generate_phantom(&PhantomSpec {
            seed: entries[0].seed,
            ..spec.clone()
        })
        .unwrap();
        assert_eq!((v, m), expected);
        assert!(matches!(
            write_phantom_dataset(dir.path(), 0, &spec, 9),
            Err(Error::EmptyDataset)
        ));
    }
}
