//! Label-map clean-up: the global enhancing-tumour rule and per-cluster
//! removal.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_io::{label_channel, LabelMap};
use crate::error::{Error, Result};

pub const ET_LABEL: u8 = 4;
pub const NCR_LABEL: u8 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Faces,
    Edges,
    #[default]
    Corners,
}

impl Connectivity {
    pub fn neighbours(self) -> u8 {
        match self {
            Connectivity::Faces => 6,
            Connectivity::Edges => 18,
            Connectivity::Corners => 26,
        }
    }

    /// Forward half of the neighbourhood (offsets lexicographically after
    /// the origin), enough for a single union-find sweep.
    fn forward_offsets(self) -> Vec<[isize; 3]> {
        let max_nonzero = match self {
            Connectivity::Faces => 1,
            Connectivity::Edges => 2,
            Connectivity::Corners => 3,
        };
        let mut out = Vec::new();
        for dx in -1..=1isize {
            for dy in -1..=1isize {
                for dz in -1..=1isize {
                    let nz = [dx, dy, dz].iter().filter(|v| **v != 0).count();
                    if nz > 0 && nz <= max_nonzero && (dx, dy, dz) > (0, 0, 0) {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Faces),
            18 => Ok(Connectivity::Edges),
            26 => Ok(Connectivity::Corners),
            other => Err(Error::config(format!(
                "connectivity must be 6, 18 or 26, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        c.neighbours()
    }
}

impl FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n: u8 = s
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("connectivity must be 6, 18 or 26, got {s:?}")))?;
        Connectivity::try_from(n)
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.neighbours())
    }
}

/// Converts every ET voxel to NCR/NET when fewer than `threshold` exist.
pub fn relabel_small_et(m: &LabelMap, threshold: usize) -> LabelMap {
    if m.count(ET_LABEL) >= threshold {
        return m.clone();
    }
    let data = m
        .data()
        .iter()
        .map(|&l| if l == ET_LABEL { NCR_LABEL } else { l })
        .collect();
    LabelMap::from_raw_unchecked(m.dims(), data)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Component id (root voxel index) per voxel of `mask`, `usize::MAX`
/// elsewhere.
pub fn connected_components(mask: &[bool], dims: [usize; 3], conn: Connectivity) -> Vec<usize> {
    let n = mask.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let offsets = conn.forward_offsets();
    let [nx, ny, nz] = dims;
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let i = (x * ny + y) * nz + z;
                if !mask[i] {
                    continue;
                }
                for o in &offsets {
                    let (qx, qy, qz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                    if qx < 0
                        || qy < 0
                        || qz < 0
                        || qx >= nx as isize
                        || qy >= ny as isize
                        || qz >= nz as isize
                    {
                        continue;
                    }
                    let j = (qx as usize * ny + qy as usize) * nz + qz as usize;
                    if mask[j] {
                        union(&mut parent, i, j);
                    }
                }
            }
        }
    }
    (0..n)
        .map(|i| {
            if mask[i] {
                find(&mut parent, i)
            } else {
                usize::MAX
            }
        })
        .collect()
}

/// Relabels components of `label` smaller than `min_volume` voxels to
/// `replacement`.
pub fn remove_small_clusters(
    m: &LabelMap,
    label: u8,
    min_volume: usize,
    replacement: u8,
    conn: Connectivity,
) -> Result<LabelMap> {
    for l in [label, replacement] {
        if label_channel(l).is_none() {
            return Err(Error::InvalidLabel(l));
        }
    }
    if min_volume == 0 {
        return Ok(m.clone());
    }
    let mask: Vec<bool> = m.data().iter().map(|&l| l == label).collect();
    let comp = connected_components(&mask, m.dims(), conn);
    let mut sizes = vec![0usize; mask.len()];
    for &c in comp.iter().filter(|c| **c != usize::MAX) {
        sizes[c] += 1;
    }
    let data = m
        .data()
        .iter()
        .zip(&comp)
        .map(|(&l, &c)| {
            if c != usize::MAX && sizes[c] < min_volume {
                replacement
            } else {
                l
            }
        })
        .collect();
    Ok(LabelMap::from_raw_unchecked(m.dims(), data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub et_threshold: usize,
    /// Per-cluster ET removal; 0 disables it.
    pub min_cluster: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            et_threshold: 1000,
            min_cluster: 0,
            connectivity: Connectivity::Corners,
        }
    }
}

/// Optional per-cluster ET removal followed by the global ET rule.
pub fn apply(m: &LabelMap, cfg: &PostprocessConfig) -> Result<LabelMap> {
    let m = remove_small_clusters(m, ET_LABEL, cfg.min_cluster, NCR_LABEL, cfg.connectivity)?;
    Ok(relabel_small_et(&m, cfg.et_threshold))
}
