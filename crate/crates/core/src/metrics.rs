//! Region remapping, Dice and 95th-percentile Hausdorff distance.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{voxel_count, Dims, LabelMap};
use crate::error::{Error, Result};

/// HD95 reported when exactly one of the two masks is empty.
pub const HD95_SENTINEL: f64 = 373.13;

pub const REGIONS: [&str; 3] = ["WT", "TC", "ET"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMasks {
    pub wt: Vec<bool>,
    pub tc: Vec<bool>,
    pub et: Vec<bool>,
}

impl RegionMasks {
    pub fn get(&self, region: usize) -> &[bool] {
        match region {
            0 => &self.wt,
            1 => &self.tc,
            _ => &self.et,
        }
    }
}

/// WT = {1, 2, 4}, TC = {1, 4}, ET = {4}.
pub fn remap_regions(m: &LabelMap) -> RegionMasks {
    let d = m.data();
    RegionMasks {
        wt: d.iter().map(|&l| l != 0).collect(),
        tc: d.iter().map(|&l| l == 1 || l == 4).collect(),
        et: d.iter().map(|&l| l == 4).collect(),
    }
}

fn same_len(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "masks of {} and {} voxels",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `2|a ∩ b| / (|a| + |b|)`, 1 when both are empty.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    same_len(a, b)?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Lower envelope of parabolas along one line: `out[p] = min_q
/// (w (p - q))^2 + f[q]`, infinite entries ignored.
fn edt_line(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * w;
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let (xq, xl) = (pos(q), pos(last));
            let s = ((fq + xq * xq) - (f[last] + xl * xl)) / (2.0 * (xq - xl));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let xp = pos(p);
        while k + 1 < v.len() && z[k + 1] < xp {
            k += 1;
        }
        let d = xp - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest `true`
/// voxel, in physical units.
pub fn squared_distance_transform(mask: &[bool], dims: Dims, spacing: [f64; 3]) -> Vec<f64> {
    let mut field: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let (mut line, mut out) = (vec![0.0; n], vec![0.0; n]);
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for (k, l) in line.iter_mut().enumerate() {
                    *l = field[base + k * strides[axis]];
                }
                edt_line(&line, spacing[axis], &mut out, &mut v, &mut z);
                for (k, o) in out.iter().enumerate() {
                    field[base + k * strides[axis]] = *o;
                }
            }
        }
    }
    field
}

/// Percentile by linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

fn directed_p95(from: &[bool], to_field: &[f64]) -> f64 {
    let mut d: Vec<f64> = from
        .iter()
        .zip(to_field)
        .filter(|(m, _)| **m)
        .map(|(_, s)| s.sqrt())
        .collect();
    percentile(&mut d, 0.95)
}

/// Max of the two directed 95th-percentile distances between the full
/// voxel sets. Both empty gives 0, exactly one empty the sentinel.
pub fn hd95(a: &[bool], b: &[bool], dims: Dims, spacing: [f64; 3]) -> Result<f64> {
    same_len(a, b)?;
    if a.len() != voxel_count(dims) {
        return Err(Error::shape(format!(
            "{} voxels for grid {dims:?}",
            a.len()
        )));
    }
    match (a.iter().any(|x| *x), b.iter().any(|x| *x)) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(HD95_SENTINEL),
        _ => {}
    }
    let to_b = squared_distance_transform(b, dims, spacing);
    let to_a = squared_distance_transform(a, dims, spacing);
    Ok(directed_p95(a, &to_b).max(directed_p95(b, &to_a)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject: String,
    pub dice: [f64; 3],
    pub hd95: [f64; 3],
}

pub fn evaluate(pred: &LabelMap, gt: &LabelMap, spacing: [f64; 3]) -> Result<SubjectMetrics> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (p, g) = (remap_regions(pred), remap_regions(gt));
    let mut out = SubjectMetrics {
        subject: String::new(),
        dice: [0.0; 3],
        hd95: [0.0; 3],
    };
    for r in 0..3 {
        out.dice[r] = dice(p.get(r), g.get(r))?;
        out.hd95[r] = hd95(p.get(r), g.get(r), gt.dims(), spacing)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

/// Mean, sample standard deviation and median.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    Ok(Summary { mean, std, median })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub dice: [Summary; 3],
    pub hd95: [Summary; 3],
}

pub fn aggregate(records: &[SubjectMetrics]) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let col = |f: &dyn Fn(&SubjectMetrics) -> f64| -> Result<Summary> {
        summarize(&records.iter().map(f).collect::<Vec<_>>())
    };
    Ok(Aggregate {
        dice: [
            col(&|r| r.dice[0])?,
            col(&|r| r.dice[1])?,
            col(&|r| r.dice[2])?,
        ],
        hd95: [
            col(&|r| r.hd95[0])?,
            col(&|r| r.hd95[1])?,
            col(&|r| r.hd95[2])?,
        ],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subjects: Vec<SubjectMetrics>,
    pub aggregate: Aggregate,
}

impl MetricsReport {
    pub fn new(subjects: Vec<SubjectMetrics>) -> Result<Self> {
        let aggregate = aggregate(&subjects)?;
        Ok(MetricsReport {
            subjects,
            aggregate,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Mean/StdDev/Median rows by Dice and HD95 columns.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8}|{:>8}{:>8}{:>8} |{:>8}{:>8}{:>8}",
            "", "Dice", "", "", "HD95", "", ""
        );
        let _ = writeln!(
            s,
            "{:<8}|{:>8}{:>8}{:>8} |{:>8}{:>8}{:>8}",
            "", "WT", "TC", "ET", "WT", "TC", "ET"
        );
        let a = &self.aggregate;
        let rows: [(&str, fn(&Summary) -> f64); 3] = [
            ("Mean", |x| x.mean),
            ("StdDev", |x| x.std),
            ("Median", |x| x.median),
        ];
        for (name, pick) in rows {
            let _ = writeln!(
                s,
                "{:<8}|{:>8.4}{:>8.4}{:>8.4} |{:>8.2}{:>8.2}{:>8.2}",
                name,
                pick(&a.dice[0]),
                pick(&a.dice[1]),
                pick(&a.dice[2]),
                pick(&a.hd95[0]),
                pick(&a.hd95[1]),
                pick(&a.hd95[2]),
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    use super::*;
    use crate::data_io::LABELS;
    use crate::rng::StreamRng;

    fn coords(i: usize, d: Dims) -> [usize; 3] {
        [i / (d[1] * d[2]), (i / d[2]) % d[1], i % d[2]]
    }

    fn brute_dice(a: &[bool], b: &[bool]) -> f64 {
        let mut inter = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for i in 0..a.len() {
            if a[i] {
                na += 1.0;
            }
            if b[i] {
                nb += 1.0;
            }
            if a[i] && b[i] {
                inter += 1.0;
            }
        }
        if na + nb == 0.0 {
            1.0
        } else {
            2.0 * inter / (na + nb)
        }
    }

    /// All-pairs nearest distances with numpy-style linear percentile.
    fn brute_hd95(a: &[bool], b: &[bool], d: Dims, sp: [f64; 3]) -> f64 {
        let pa: Vec<[usize; 3]> = (0..a.len())
            .filter(|&i| a[i])
            .map(|i| coords(i, d))
            .collect();
        let pb: Vec<[usize; 3]> = (0..b.len())
            .filter(|&i| b[i])
            .map(|i| coords(i, d))
            .collect();
        if pa.is_empty() && pb.is_empty() {
            return 0.0;
        }
        if pa.is_empty() || pb.is_empty() {
            return HD95_SENTINEL;
        }
        let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
            let mut ds = Vec::new();
            for p in from {
                let mut best = f64::INFINITY;
                for q in to {
                    let mut s = 0.0;
                    for k in 0..3 {
                        let dd = (p[k] as f64 - q[k] as f64) * sp[k];
                        s += dd * dd;
                    }
                    if s < best {
                        best = s;
                    }
                }
                ds.push(best.sqrt());
            }
            ds.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let rank = 0.95 * (ds.len() as f64 - 1.0);
            let lo = rank.floor() as usize;
            if lo + 1 >= ds.len() {
                ds[lo]
            } else {
                ds[lo] + (rank - lo as f64) * (ds[lo + 1] - ds[lo])
            }
        };
        directed(&pa, &pb).max(directed(&pb, &pa))
    }

    fn random_mask(rng: &mut StreamRng, n: usize, density: f64) -> Vec<bool> {
        (0..n).map(|_| rng.gen_bool(density)).collect()
    }

    #[test]
    fn metrics_match_brute_force_on_random_pairs() {
        let mut rng = StreamRng::seed_from_u64(21);
        for trial in 0..200 {
            let d = [
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
                rng.gen_range(1..=8),
            ];
            let n = voxel_count(d);
            let (da, db) = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5));
            let a = random_mask(&mut rng, n, da);
            let b = random_mask(&mut rng, n, db);
            let sp = if trial % 2 == 0 {
                [1.0, 1.0, 1.0]
            } else {
                [
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                ]
            };
            assert!((dice(&a, &b).unwrap() - brute_dice(&a, &b)).abs() < 1e-9);
            let got = hd95(&a, &b, d, sp).unwrap();
            let want = brute_hd95(&a, &b, d, sp);
            assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");
        }
    }

    #[test]
    fn dice_examples() {
        assert_eq!(
            dice(&[true, false, true], &[true, false, true]).unwrap(),
            1.0
        );
        let v = dice(&[true, true, false], &[true, false, false]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice(&[false; 4], &[false; 4]).unwrap(), 1.0);
        assert!(dice(&[true], &[true, false]).is_err());
    }

    #[test]
    fn hd95_examples() {
        let d = [1, 1, 8];
        let mut a = vec![false; 8];
        let mut b = vec![false; 8];
        a[1] = true;
        b[4] = true;
        assert_eq!(hd95(&a, &b, d, [1.0; 3]).unwrap(), 3.0);
        assert_eq!(hd95(&a, &a, d, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(&[false; 8], &b, d, [1.0; 3]).unwrap(), HD95_SENTINEL);
        assert_eq!(hd95(&[false; 8], &[false; 8], d, [1.0; 3]).unwrap(), 0.0);
        assert_eq!(hd95(&a, &b, d, [1.0, 1.0, 2.0]).unwrap(), 6.0);
    }

    #[test]
    fn region_remapping() {
        let m = LabelMap::new([1, 1, 4], vec![1, 2, 4, 0]).unwrap();
        let r = remap_regions(&m);
        let count = |v: &[bool]| v.iter().filter(|x| **x).count();
        assert_eq!((count(&r.wt), count(&r.tc), count(&r.et)), (3, 2, 1));
        let bg = remap_regions(&LabelMap::background([2, 2, 2]));
        assert!(bg.wt.iter().chain(&bg.tc).chain(&bg.et).all(|x| !x));
    }

    #[test]
    fn evaluate_examples() {
        let gt = LabelMap::new([2, 2, 2], vec![0, 1, 2, 4, 0, 4, 1, 2]).unwrap();
        let same = evaluate(&gt, &gt, [1.0; 3]).unwrap();
        assert_eq!(same.dice, [1.0; 3]);
        assert_eq!(same.hd95, [0.0; 3]);
        let empty = evaluate(&LabelMap::background([2, 2, 2]), &gt, [1.0; 3]).unwrap();
        assert_eq!(empty.dice, [0.0; 3]);
        assert_eq!(empty.hd95, [HD95_SENTINEL; 3]);
        assert!(matches!(
            evaluate(&LabelMap::background([2, 2, 1]), &gt, [1.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn evaluate_matches_loop_oracle() {
        let mut rng = StreamRng::seed_from_u64(22);
        for _ in 0..20 {
            let d = [8, 8, 8];
            let gen = |rng: &mut StreamRng| {
                LabelMap::new(d, (0..512).map(|_| LABELS[rng.gen_range(0..4)]).collect()).unwrap()
            };
            let (p, g) = (gen(&mut rng), gen(&mut rng));
            let got = evaluate(&p, &g, [1.0; 3]).unwrap();
            let sets: [&[u8]; 3] = [&[1, 2, 4], &[1, 4], &[4]];
            for (r, set) in sets.iter().enumerate() {
                let a: Vec<bool> = p.data().iter().map(|l| set.contains(l)).collect();
                let b: Vec<bool> = g.data().iter().map(|l| set.contains(l)).collect();
                assert!((got.dice[r] - brute_dice(&a, &b)).abs() < 1e-9);
                assert!((got.hd95[r] - brute_hd95(&a, &b, d, [1.0; 3])).abs() < 1e-9);
            }
        }
    }

    fn record(v: f64) -> SubjectMetrics {
        SubjectMetrics {
            subject: String::new(),
            dice: [v; 3],
            hd95: [v; 3],
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = aggregate(&[record(0.7)]).unwrap();
        assert_eq!(
            one.dice[0],
            Summary {
                mean: 0.7,
                std: 0.0,
                median: 0.7
            }
        );
        let two = aggregate(&[record(0.8), record(0.9)]).unwrap();
        assert!((two.dice[0].mean - 0.85).abs() < 1e-12);
        assert!((two.dice[0].median - 0.85).abs() < 1e-12);
        assert!((two.dice[0].std - 0.0707).abs() < 1e-4);
        assert!(matches!(aggregate(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn report_round_trip_and_table() {
        let report = MetricsReport::new(vec![record(0.8), record(0.9)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.json");
        report.write_json(&p).unwrap();
        assert_eq!(MetricsReport::read_json(&p).unwrap(), report);
        let t = report.table();
        for row in ["Mean", "StdDev", "Median", "Dice", "HD95"] {
            assert!(t.contains(row));
        }
    }

    proptest! {
        #[test]
        fn nesting_and_symmetry(seed in any::<u64>()) {
            let mut rng = StreamRng::seed_from_u64(seed);
            let d = [rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=6)];
            let n = voxel_count(d);
            let m = LabelMap::new(d, (0..n).map(|_| LABELS[rng.gen_range(0..4)]).collect()).unwrap();
            let r = remap_regions(&m);
            for i in 0..n {
                prop_assert!(!r.et[i] || r.tc[i]);
                prop_assert!(!r.tc[i] || r.wt[i]);
            }
            let a = random_mask(&mut rng, n, 0.3);
            let b = random_mask(&mut rng, n, 0.3);
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            prop_assert_eq!(hd95(&a, &b, d, [1.0; 3]).unwrap(), hd95(&b, &a, d, [1.0; 3]).unwrap());
            let dv = dice(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&dv));
            let aggregated = aggregate(&[record(dv), record(0.5), record(0.1)]).unwrap();
            let reversed = aggregate(&[record(0.1), record(0.5), record(dv)]).unwrap();
            prop_assert!((aggregated.dice[0].mean - reversed.dice[0].mean).abs() < 1e-12);
            prop_assert_eq!(aggregated.dice[0].median, reversed.dice[0].median);
        }
    }
}
