//! Per-cell LiDAR and semantic features and their multi-scale stack.

use crate::bev_grid::{BevGrid, GridSpec};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::pseudo_label::PaintedCloud;

pub const LIDAR_CHANNELS: [&str; 6] = ["log_count", "z_min", "z_max", "z_mean", "z_var", "intensity_mean"];

/// A grid whose channels carry names.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub grid: BevGrid,
    pub manifest: Vec<String>,
}

impl FeatureGrid {
    pub fn new(grid: BevGrid, manifest: Vec<String>) -> Result<Self> {
        if manifest.len() != grid.channels() {
            return Err(Error::DimensionMismatch(format!(
                "manifest lists {} channels, grid has {}",
                manifest.len(),
                grid.channels()
            )));
        }
        Ok(FeatureGrid { grid, manifest })
    }

    pub fn channels(&self) -> usize {
        self.grid.channels()
    }

    pub fn spec(&self) -> &GridSpec {
        self.grid.spec()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.manifest.iter().position(|m| m == name)
    }
}

pub fn semantic_channel_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|k| format!("class_{k}"))
        .chain(std::iter::once("observed".to_string()))
        .collect()
}

/// `[log1p(count), min z, max z, mean z, var z, mean intensity]` per cell;
/// empty cells are zero. Variance is the population variance.
pub fn lidar_features(pc: &PointCloud, spec: &GridSpec) -> FeatureGrid {
    let n = spec.num_cells();
    let mut count = vec![0usize; n];
    let mut z_sum = vec![0.0; n];
    let mut z_min = vec![f64::INFINITY; n];
    let mut z_max = vec![f64::NEG_INFINITY; n];
    let mut i_sum = vec![0.0; n];
    let mut cell_of = Vec::with_capacity(pc.len());
    for (p, &intensity) in pc.points().iter().zip(pc.intensity()) {
        let cell = spec.world_to_cell(p.x, p.y).map(|(r, c)| spec.index(r, c));
        cell_of.push(cell);
        if let Some(idx) = cell {
            count[idx] += 1;
            z_sum[idx] += p.z;
            z_min[idx] = z_min[idx].min(p.z);
            z_max[idx] = z_max[idx].max(p.z);
            i_sum[idx] += intensity;
        }
    }
    let mean: Vec<f64> = (0..n)
        .map(|i| if count[i] > 0 { z_sum[i] / count[i] as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0; n];
    for (p, cell) in pc.points().iter().zip(&cell_of) {
        if let Some(idx) = *cell {
            let d = p.z - mean[idx];
            sq[idx] += d * d;
        }
    }
    let mut grid = BevGrid::zeros(*spec, LIDAR_CHANNELS.len());
    let values = grid.values_mut();
    for idx in 0..n {
        let c = count[idx];
        if c == 0 {
            continue;
        }
        let cf = c as f64;
        values[idx] = cf.ln_1p();
        values[n + idx] = z_min[idx];
        values[2 * n + idx] = z_max[idx];
        values[3 * n + idx] = mean[idx];
        values[4 * n + idx] = sq[idx] / cf;
        values[5 * n + idx] = i_sum[idx] / cf;
    }
    FeatureGrid {
        grid,
        manifest: LIDAR_CHANNELS.iter().map(|s| s.to_string()).collect(),
    }
}

/// Mean painted distribution over the valid points of each cell, plus an
/// observed flag channel.
pub fn semantic_features(painted: &PaintedCloud, spec: &GridSpec, num_classes: usize) -> Result<FeatureGrid> {
    if painted.num_classes != num_classes {
        return Err(Error::DimensionMismatch(format!(
            "painted cloud has {} classes, expected {num_classes}",
            painted.num_classes
        )));
    }
    let n = spec.num_cells();
    let k = num_classes;
    let mut grid = BevGrid::zeros(*spec, k + 1);
    let mut count = vec![0usize; n];
    let values = grid.values_mut();
    for (i, p) in painted.cloud.points().iter().enumerate() {
        if !painted.valid[i] {
            continue;
        }
        let Some((r, c)) = spec.world_to_cell(p.x, p.y) else {
            continue;
        };
        let idx = spec.index(r, c);
        count[idx] += 1;
        for (kk, &v) in painted.point_probs(i).iter().enumerate() {
            values[kk * n + idx] += v;
        }
    }
    for idx in 0..n {
        if count[idx] == 0 {
            continue;
        }
        let inv = 1.0 / count[idx] as f64;
        for kk in 0..k {
            values[kk * n + idx] *= inv;
        }
        values[k * n + idx] = 1.0;
    }
    FeatureGrid::new(grid, semantic_channel_names(k))
}

/// Pools both grids by each factor, upsamples back to the base spec and
/// concatenates channels level-major, LiDAR before semantic.
pub fn multiscale_stack(lidar: &FeatureGrid, semantic: &FeatureGrid, levels: &[usize]) -> Result<FeatureGrid> {
    if levels.first() != Some(&1) {
        return Err(Error::InvalidParameter(format!("pyramid levels {levels:?} must start with factor 1")));
    }
    if lidar.spec() != semantic.spec() {
        return Err(Error::DimensionMismatch("lidar and semantic grids differ in spec".into()));
    }
    let base = *lidar.spec();
    let mut parts = Vec::with_capacity(levels.len() * 2);
    let mut manifest = Vec::new();
    for &f in levels {
        for (branch, src) in [("lidar", lidar), ("semantic", semantic)] {
            let level = src.grid.avg_pool(f)?.nearest_upsample(f, &base)?;
            manifest.extend(src.manifest.iter().map(|m| format!("s{f}/{branch}/{m}")));
            parts.push(level);
        }
    }
    let refs: Vec<&BevGrid> = parts.iter().collect();
    FeatureGrid::new(BevGrid::concat(&refs)?, manifest)
}

/// Input width of the fused classifier.
pub fn fused_channels(levels: usize, num_classes: usize) -> usize {
    levels * (LIDAR_CHANNELS.len() + num_classes + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::FrameId;
    use nalgebra::Point3;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;
    use std::collections::HashMap;

    fn spec() -> GridSpec {
        GridSpec::new(0.5, 0.0, -4.0, 16, 16).unwrap()
    }

    fn cloud(points: Vec<Point3<f64>>, intensity: Vec<f64>) -> PointCloud {
        PointCloud::new(FrameId::ego(), points, intensity).unwrap().0
    }

    #[test]
    fn empty_cloud_gives_zeros() {
        let f = lidar_features(&PointCloud::empty(FrameId::ego()), &spec());
        assert_eq!(f.channels(), 6);
        assert!(f.grid.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_point_features() {
        let f = lidar_features(&cloud(vec![Point3::new(1.2, 0.3, 1.0)], vec![0.5]), &spec());
        let cell = f.grid.cell(8, 2);
        assert_eq!(cell, vec![2f64.ln(), 1.0, 1.0, 1.0, 0.0, 0.5]);
        assert!((cell[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn lidar_features_match_brute_force() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(31);
        let s = spec();
        let pts: Vec<_> = (0..2000)
            .map(|_| Point3::new(rng.random_range(-1.0..9.0), rng.random_range(-5.0..5.0), rng.random_range(-1.0..2.0)))
            .collect();
        let inten: Vec<f64> = (0..2000).map(|_| rng.random_range(0.0..1.0)).collect();
        let f = lidar_features(&cloud(pts.clone(), inten.clone()), &s);

        let mut cells: HashMap<(usize, usize), Vec<(f64, f64)>> = HashMap::new();
        for (p, i) in pts.iter().zip(&inten) {
            let col = ((p.x - s.origin_x) / s.resolution).floor();
            let row = ((p.y - s.origin_y) / s.resolution).floor();
            if col >= 0.0 && row >= 0.0 && col < 16.0 && row < 16.0 {
                cells.entry((row as usize, col as usize)).or_default().push((p.z, *i));
            }
        }
        for row in 0..16 {
            for col in 0..16 {
                let got = f.grid.cell(row, col);
                let Some(zs) = cells.get(&(row, col)) else {
                    assert!(got.iter().all(|v| *v == 0.0));
                    continue;
                };
                let n = zs.len() as f64;
                let mean = zs.iter().map(|z| z.0).sum::<f64>() / n;
                let var = zs.iter().map(|z| (z.0 - mean).powi(2)).sum::<f64>() / n;
                let expected = [
                    (n + 1.0).ln(),
                    zs.iter().map(|z| z.0).fold(f64::INFINITY, f64::min),
                    zs.iter().map(|z| z.0).fold(f64::NEG_INFINITY, f64::max),
                    mean,
                    var,
                    zs.iter().map(|z| z.1).sum::<f64>() / n,
                ];
                for (a, b) in got.iter().zip(expected) {
                    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    fn painted(points: Vec<Point3<f64>>, dists: Vec<Vec<f64>>, valid: Vec<bool>) -> PaintedCloud {
        let k = dists[0].len();
        let n = points.len();
        PaintedCloud {
            cloud: cloud(points, vec![0.0; n]),
            num_classes: k,
            probs: dists.concat(),
            valid,
        }
    }

    #[test]
    fn semantic_feature_cases() {
        let s = spec();
        let p = Point3::new(0.1, 0.1, 0.0);
        let one = painted(vec![p], vec![vec![0.0, 0.0, 0.0, 1.0]], vec![true]);
        let f = semantic_features(&one, &s, 4).unwrap();
        assert_eq!(f.grid.cell(8, 0), vec![0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(f.grid.values().iter().sum::<f64>(), 2.0);

        let none = painted(vec![p], vec![vec![0.0; 4]], vec![false]);
        let f = semantic_features(&none, &s, 4).unwrap();
        assert!(f.grid.values().iter().all(|v| *v == 0.0));

        let two = painted(vec![p, p], vec![vec![0.5, 0.5, 0.0], vec![0.1, 0.2, 0.7]], vec![true, true]);
        let f = semantic_features(&two, &s, 3).unwrap();
        let cell = f.grid.cell(8, 0);
        for (a, b) in cell.iter().zip([0.3, 0.35, 0.35, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn features_ignore_point_order() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(32);
        let pts: Vec<_> = (0..500)
            .map(|_| Point3::new(rng.random_range(0.0..8.0), rng.random_range(-4.0..4.0), rng.random_range(-1.0..2.0)))
            .collect();
        let inten: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..1.0)).collect();
        let a = lidar_features(&cloud(pts.clone(), inten.clone()), &spec());
        let b = lidar_features(
            &cloud(pts.into_iter().rev().collect(), inten.into_iter().rev().collect()),
            &spec(),
        );
        for (x, y) in a.grid.values().iter().zip(b.grid.values()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn random_feature(rng: &mut impl Rng, s: GridSpec, names: Vec<String>) -> FeatureGrid {
        let c = names.len();
        let values = (0..c * s.num_cells()).map(|_| rng.random_range(-2.0..2.0)).collect();
        FeatureGrid::new(BevGrid::from_values(s, c, values).unwrap(), names).unwrap()
    }

    #[test]
    fn single_level_stack_is_concatenation() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(33);
        let l = random_feature(&mut rng, spec(), LIDAR_CHANNELS.iter().map(|s| s.to_string()).collect());
        let s = random_feature(&mut rng, spec(), semantic_channel_names(3));
        let stack = multiscale_stack(&l, &s, &[1]).unwrap();
        assert_eq!(stack.channels(), 10);
        assert_eq!(&stack.grid.values()[..l.grid.values().len()], l.grid.values());
        assert_eq!(&stack.grid.values()[l.grid.values().len()..], s.grid.values());
    }

    #[test]
    fn constant_grids_stay_constant() {
        let s = spec();
        let l = FeatureGrid::new(BevGrid::from_values(s, 6, vec![1.5; 6 * 256]).unwrap(), LIDAR_CHANNELS.iter().map(|s| s.to_string()).collect()).unwrap();
        let m = FeatureGrid::new(BevGrid::from_values(s, 3, vec![0.25; 3 * 256]).unwrap(), semantic_channel_names(2)).unwrap();
        let stack = multiscale_stack(&l, &m, &[1, 2, 4]).unwrap();
        let n = s.num_cells();
        for level in 0..3 {
            for c in 0..9 {
                let expected = if c < 6 { 1.5 } else { 0.25 };
                assert!(stack.grid.plane(level * 9 + c).iter().all(|v| *v == expected));
            }
        }
        assert_eq!(stack.grid.values().len(), 27 * n);
    }

    #[test]
    fn stack_matches_composed_pool_and_upsample() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(34);
        let s = spec();
        let l = random_feature(&mut rng, s, LIDAR_CHANNELS.iter().map(|s| s.to_string()).collect());
        let m = random_feature(&mut rng, s, semantic_channel_names(4));
        let stack = multiscale_stack(&l, &m, &[1, 2, 4]).unwrap();
        assert_eq!(stack.channels(), fused_channels(3, 4));
        let mut seen = std::collections::HashSet::new();
        assert!(stack.manifest.iter().all(|m| seen.insert(m.clone())));

        let per_level = 6 + 5;
        for (li, f) in [1usize, 2, 4].into_iter().enumerate() {
            for (ci, (src, c)) in (0..6).map(|c| (&l, c)).chain((0..5).map(|c| (&m, c))).enumerate() {
                let out = stack.grid.plane(li * per_level + ci);
                for row in 0..16 {
                    for col in 0..16 {
                        let (r0, c0) = (row / f * f, col / f * f);
                        let mut sum = 0.0;
                        for dr in 0..f {
                            for dc in 0..f {
                                sum += src.grid.get(c, r0 + dr, c0 + dc);
                            }
                        }
                        let expected = sum / (f * f) as f64;
                        assert!((out[row * 16 + col] - expected).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn stack_rejects_bad_levels() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(35);
        let l = random_feature(&mut rng, spec(), LIDAR_CHANNELS.iter().map(|s| s.to_string()).collect());
        let m = random_feature(&mut rng, spec(), semantic_channel_names(2));
        assert!(multiscale_stack(&l, &m, &[2]).is_err());
        assert!(matches!(multiscale_stack(&l, &m, &[1, 3]), Err(Error::NonDivisibleFactor { .. })));
    }
}
