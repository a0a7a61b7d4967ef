//! Image-guided pseudo ground truth.
//!
//! LiDAR points are painted with the class distribution of the pixel they
//! project onto, moved into the keyframe's ego frame, and summed per BEV cell
//! as class evidence. A Dirichlet prior turns evidence into a posterior whose
//! normalized entropy is the cell's uncertainty; `1 − uncertainty` becomes
//! the training weight. Holes are then filled from the nearest observed cell
//! with an exponentially decaying weight.

use crate::bev_grid::GridSpec;
use crate::error::{Error, Result};
use crate::geometry::{project_points, transform_points, CameraModel, PointCloud, RigidTransform};
use crate::{argmax, normalized_entropy, VOID};

/// Tolerance on per-pixel and per-point distribution sums.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-4;

/// Per-pixel class probabilities, stored as `K × H × W` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticImage {
    width: usize,
    height: usize,
    num_classes: usize,
    probs: Vec<f32>,
}

impl SemanticImage {
    pub fn new(width: usize, height: usize, num_classes: usize, probs: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || num_classes == 0 {
            return Err(Error::InvalidImage(format!(
                "degenerate image {width}x{height} with {num_classes} classes"
            )));
        }
        let n = width * height;
        if probs.len() != n * num_classes {
            return Err(Error::InvalidImage(format!(
                "expected {} probabilities, got {}",
                n * num_classes,
                probs.len()
            )));
        }
        for pix in 0..n {
            let mut sum = 0.0_f64;
            for k in 0..num_classes {
                let p = probs[k * n + pix];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidImage(format!(
                        "pixel ({}, {}) class {k}: probability {p} outside [0, 1]",
                        pix % width,
                        pix / width
                    )));
                }
                sum += p as f64;
            }
            if (sum - 1.0).abs() > DISTRIBUTION_TOLERANCE {
                return Err(Error::InvalidImage(format!(
                    "pixel ({}, {}) probabilities sum to {sum}",
                    pix % width,
                    pix / width
                )));
            }
        }
        Ok(SemanticImage {
            width,
            height,
            num_classes,
            probs,
        })
    }

    /// Promotes hard labels (row-major) to one-hot planes.
    pub fn from_labels(width: usize, height: usize, num_classes: usize, labels: &[u8]) -> Result<Self> {
        let n = width * height;
        if labels.len() != n {
            return Err(Error::InvalidImage(format!("expected {n} labels, got {}", labels.len())));
        }
        let mut probs = vec![0.0_f32; n * num_classes];
        for (pix, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::LabelOutOfRange { label: l, num_classes });
            }
            probs[l * n + pix] = 1.0;
        }
        SemanticImage::new(width, height, num_classes, probs)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn prob(&self, class: usize, col: usize, row: usize) -> f32 {
        self.probs[class * self.width * self.height + row * self.width + col]
    }

    /// Distribution at pixel `(col, row)`.
    pub fn pixel(&self, col: usize, row: usize) -> impl Iterator<Item = f64> + '_ {
        let n = self.width * self.height;
        let idx = row * self.width + col;
        (0..self.num_classes).map(move |k| self.probs[k * n + idx] as f64)
    }
}

/// A point cloud with one class distribution per point.
#[derive(Clone, Debug, PartialEq)]
pub struct PaintedCloud {
    pub cloud: PointCloud,
    pub num_classes: usize,
    /// `N × K`, point-major. Rows of invalid points are zero.
    pub probs: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PaintedCloud {
    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn point_probs(&self, i: usize) -> &[f64] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Moves the points; distributions and flags follow unchanged.
    pub fn transformed(&self, t: &RigidTransform) -> Result<PaintedCloud> {
        Ok(PaintedCloud {
            cloud: transform_points(t, &self.cloud)?,
            num_classes: self.num_classes,
            probs: self.probs.clone(),
            valid: self.valid.clone(),
        })
    }
}

/// Paints ego-frame points with the nearest pixel's class distribution.
pub fn paint_points(pc: &PointCloud, cam: &CameraModel, img: &SemanticImage) -> Result<PaintedCloud> {
    if img.width != cam.width || img.height != cam.height {
        return Err(Error::DimensionMismatch(format!(
            "camera is {}x{} but semantic image is {}x{}",
            cam.width, cam.height, img.width, img.height
        )));
    }
    let k = img.num_classes;
    if k < 2 {
        return Err(Error::InvalidImage(format!("need at least 2 classes, got {k}")));
    }
    let in_cam = transform_points(cam.cam_from_ego(), pc)?;
    let projection = project_points(cam, &in_cam);
    let mut probs = vec![0.0; pc.len() * k];
    let mut valid = vec![false; pc.len()];
    for hit in &projection.hits {
        let (col, row) = cam.pixel_index(hit.u, hit.v);
        for (dst, p) in probs[hit.index * k..(hit.index + 1) * k].iter_mut().zip(img.pixel(col, row)) {
            *dst = p;
        }
        valid[hit.index] = true;
    }
    Ok(PaintedCloud {
        cloud: pc.clone(),
        num_classes: k,
        probs,
        valid,
    })
}

/// Accumulated class mass per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Evidence {
    pub spec: GridSpec,
    pub num_classes: usize,
    /// `K × H × W`.
    pub mass: Vec<f64>,
    pub observed: Vec<bool>,
}

impl Evidence {
    pub fn empty(spec: GridSpec, num_classes: usize) -> Self {
        Evidence {
            spec,
            num_classes,
            mass: vec![0.0; num_classes * spec.num_cells()],
            observed: vec![false; spec.num_cells()],
        }
    }

    pub fn cell(&self, idx: usize) -> Vec<f64> {
        let n = self.spec.num_cells();
        (0..self.num_classes).map(|k| self.mass[k * n + idx]).collect()
    }
}

/// Bins every valid painted point into the keyframe grid.
///
/// `poses[i]` maps the ego frame of `painted[i]` into the keyframe ego frame.
/// Points higher than `z_ceiling` after the transform are ignored.
pub fn accumulate_evidence(
    painted: &[PaintedCloud],
    poses: &[RigidTransform],
    spec: &GridSpec,
    num_classes: usize,
    z_ceiling: f64,
) -> Result<Evidence> {
    if painted.len() != poses.len() {
        return Err(Error::LengthMismatch {
            what: "painted clouds vs poses",
            left: painted.len(),
            right: poses.len(),
        });
    }
    let mut ev = Evidence::empty(*spec, num_classes);
    let n = spec.num_cells();
    for (cloud, pose) in painted.iter().zip(poses) {
        if cloud.num_classes != num_classes {
            return Err(Error::DimensionMismatch(format!(
                "painted cloud has {} classes, expected {num_classes}",
                cloud.num_classes
            )));
        }
        if cloud.cloud.frame() != pose.from_frame() {
            return Err(Error::FrameMismatch {
                expected: pose.from_frame().to_string(),
                found: cloud.cloud.frame().to_string(),
            });
        }
        for (i, p) in cloud.cloud.points().iter().enumerate() {
            if !cloud.valid[i] {
                continue;
            }
            let q = pose.apply(p);
            if q.z > z_ceiling {
                continue;
            }
            let Some((row, col)) = spec.world_to_cell(q.x, q.y) else {
                continue;
            };
            let idx = spec.index(row, col);
            for (k, &pk) in cloud.point_probs(i).iter().enumerate() {
                ev.mass[k * n + idx] += pk;
            }
        }
    }
    for idx in 0..n {
        ev.observed[idx] = (0..num_classes).any(|k| ev.mass[k * n + idx] > 0.0);
    }
    Ok(ev)
}

/// Dirichlet-smoothed class posterior; unobserved cells are uniform.
pub fn posterior(evidence: &Evidence, alpha0: f64) -> Vec<f64> {
    let k = evidence.num_classes;
    let n = evidence.spec.num_cells();
    let mut out = vec![1.0 / k as f64; k * n];
    for idx in 0..n {
        if !evidence.observed[idx] {
            continue;
        }
        let total: f64 = (0..k).map(|c| evidence.mass[c * n + idx]).sum::<f64>() + k as f64 * alpha0;
        for c in 0..k {
            out[c * n + idx] = (evidence.mass[c * n + idx] + alpha0) / total;
        }
    }
    out
}

/// Entropies this close to 1 come from uniform posteriors that picked up
/// rounding error, and are snapped to exactly 1.
const UNIFORM_SNAP: f64 = 1e-12;

/// Normalized entropy of each cell's distribution (`K × cells` layout).
pub fn cell_uncertainty(posterior: &[f64], num_classes: usize) -> Vec<f64> {
    let n = posterior.len() / num_classes;
    let mut p = vec![0.0; num_classes];
    (0..n)
        .map(|idx| {
            for (k, v) in p.iter_mut().enumerate() {
                *v = posterior[k * n + idx];
            }
            let u = normalized_entropy(&p);
            if u > 1.0 - UNIFORM_SNAP {
                1.0
            } else {
                u
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelGrid {
    pub spec: GridSpec,
    pub num_classes: usize,
    /// `K × H × W`.
    pub evidence: Vec<f64>,
    /// `K × H × W`.
    pub posterior: Vec<f64>,
    pub label: Vec<u8>,
    pub uncertainty: Vec<f64>,
    pub weight: Vec<f64>,
    pub observed: Vec<bool>,
}

impl PseudoLabelGrid {
    /// Labels, uncertainties and weights from evidence.
    ///
    /// Observed cells take the posterior argmax and weight `1 − uncertainty`.
    /// A cell whose weight comes out zero carries no class information and
    /// is labeled void.
    pub fn from_evidence(evidence: Evidence, alpha0: f64) -> Self {
        let k = evidence.num_classes;
        let n = evidence.spec.num_cells();
        let post = posterior(&evidence, alpha0);
        let uncertainty = cell_uncertainty(&post, k);
        let mut label = vec![VOID; n];
        let mut weight = vec![0.0; n];
        let mut p = vec![0.0; k];
        for idx in 0..n {
            if !evidence.observed[idx] {
                continue;
            }
            let w = 1.0 - uncertainty[idx];
            if w > 0.0 {
                for (c, v) in p.iter_mut().enumerate() {
                    *v = post[c * n + idx];
                }
                label[idx] = argmax(&p) as u8;
                weight[idx] = w;
            }
        }
        PseudoLabelGrid {
            spec: evidence.spec,
            num_classes: k,
            evidence: evidence.mass,
            posterior: post,
            label,
            uncertainty,
            weight,
            observed: evidence.observed,
        }
    }

    pub fn num_cells(&self) -> usize {
        self.spec.num_cells()
    }

    pub fn cell_posterior(&self, idx: usize) -> Vec<f64> {
        let n = self.num_cells();
        (0..self.num_classes).map(|k| self.posterior[k * n + idx]).collect()
    }

    /// Largest posterior probability of each cell.
    pub fn confidence(&self) -> Vec<f64> {
        (0..self.num_cells())
            .map(|idx| self.cell_posterior(idx).into_iter().fold(0.0, f64::max))
            .collect()
    }

    /// Filled from a neighbour rather than observed.
    pub fn is_densified(&self, idx: usize) -> bool {
        !self.observed[idx] && self.label[idx] != VOID
    }
}

/// Fills unobserved cells from the nearest observed cell within `radius`.
///
/// Distances are between cell centers; ties go to the lowest `(row, col)`.
/// Copied weights decay as `exp(−d / lambda)`.
pub fn densify(grid: &PseudoLabelGrid, radius: f64, lambda: f64) -> Result<PseudoLabelGrid> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidParameter(format!("densify radius {radius} must be >= 0")));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("densify lambda {lambda} must be > 0")));
    }
    let spec = grid.spec;
    let (h, w) = (spec.height as isize, spec.width as isize);
    let n = spec.num_cells();
    let k = grid.num_classes;
    let sources: Vec<(isize, isize)> = (0..n)
        .filter(|&i| grid.observed[i])
        .map(|i| ((i / spec.width) as isize, (i % spec.width) as isize))
        .collect();
    let mut out = grid.clone();
    if sources.is_empty() || radius == 0.0 {
        return Ok(out);
    }
    let reach = ((radius / spec.resolution).ceil() as isize + 1).min(h.max(w));
    let window_area = ((2 * reach + 1) * (2 * reach + 1)) as usize;
    let scan_sources = sources.len() < window_area;

    for row in 0..h {
        for col in 0..w {
            let idx = (row * w + col) as usize;
            if grid.observed[idx] {
                continue;
            }
            let mut best: Option<(i64, usize)> = None;
            let mut consider = |r: isize, c: isize| {
                let d2 = ((r - row) * (r - row) + (c - col) * (c - col)) as i64;
                if best.is_none_or(|(b, _)| d2 < b) {
                    best = Some((d2, (r * w + c) as usize));
                }
            };
            if scan_sources {
                for &(r, c) in &sources {
                    consider(r, c);
                }
            } else {
                for r in (row - reach).max(0)..(row + reach + 1).min(h) {
                    for c in (col - reach).max(0)..(col + reach + 1).min(w) {
                        if grid.observed[(r * w + c) as usize] {
                            consider(r, c);
                        }
                    }
                }
            }
            let Some((d2, src)) = best else { continue };
            let d = spec.resolution * (d2 as f64).sqrt();
            if d > radius {
                continue;
            }
            for c in 0..k {
                out.posterior[c * n + idx] = grid.posterior[c * n + src];
            }
            out.label[idx] = grid.label[src];
            out.uncertainty[idx] = grid.uncertainty[src];
            out.weight[idx] = grid.weight[src] * (-d / lambda).exp();
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoLabelParams {
    /// Dirichlet pseudo-count per class.
    pub alpha0: f64,
    /// Sweeps on each side of the keyframe that are aggregated.
    pub window: usize,
    /// Points above this height in the keyframe ego frame are ignored.
    pub z_ceiling: f64,
    pub densify_radius: f64,
    pub densify_lambda: f64,
}

impl Default for PseudoLabelParams {
    fn default() -> Self {
        PseudoLabelParams {
            alpha0: 0.5,
            window: 4,
            z_ceiling: 2.5,
            densify_radius: 1.0,
            densify_lambda: 1.0,
        }
    }
}

impl PseudoLabelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::InvalidParameter(format!("alpha0 {} must be positive", self.alpha0)));
        }
        if !(self.densify_radius >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "densify radius {} must be >= 0",
                self.densify_radius
            )));
        }
        if !(self.densify_lambda > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "densify lambda {} must be positive",
                self.densify_lambda
            )));
        }
        Ok(())
    }
}

/// Indices of the sweeps aggregated for `keyframe` out of `len`.
pub fn window_indices(len: usize, keyframe: usize, window: usize) -> std::ops::Range<usize> {
    keyframe.saturating_sub(window)..(keyframe + window + 1).min(len)
}

/// Transform from the ego frame of a sweep into the keyframe's ego frame,
/// given both world-from-ego poses.
pub fn relative_pose(world_from_key: &RigidTransform, world_from_sweep: &RigidTransform) -> Result<RigidTransform> {
    world_from_key.inverse().compose(world_from_sweep)
}

/// End-to-end pseudo-label generation for one keyframe.
///
/// `sweeps`, `images`, `cams` and `world_poses` are parallel sequences;
/// sweeps within `params.window` of `keyframe` are aggregated.
pub fn generate(
    sweeps: &[PointCloud],
    images: &[SemanticImage],
    cams: &[CameraModel],
    world_poses: &[RigidTransform],
    keyframe: usize,
    spec: &GridSpec,
    params: &PseudoLabelParams,
) -> Result<PseudoLabelGrid> {
    params.validate()?;
    let n = sweeps.len();
    for (what, len) in [("sweeps vs images", images.len()), ("sweeps vs cameras", cams.len()), ("sweeps vs poses", world_poses.len())] {
        if len != n {
            return Err(Error::LengthMismatch { what, left: n, right: len });
        }
    }
    if keyframe >= n {
        return Err(Error::InvalidParameter(format!("keyframe {keyframe} out of range for {n} sweeps")));
    }
    let num_classes = images[keyframe].num_classes();
    let mut painted = Vec::new();
    let mut poses = Vec::new();
    for i in window_indices(n, keyframe, params.window) {
        painted.push(paint_points(&sweeps[i], &cams[i], &images[i])?);
        poses.push(relative_pose(&world_poses[keyframe], &world_poses[i])?);
    }
    let evidence = accumulate_evidence(&painted, &poses, spec, num_classes, params.z_ceiling)?;
    let grid = PseudoLabelGrid::from_evidence(evidence, params.alpha0);
    densify(&grid, params.densify_radius, params.densify_lambda)
}
