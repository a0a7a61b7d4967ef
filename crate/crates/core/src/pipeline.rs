//! Glue between the stages: per-frame features, feature subsets and model
//! fitting.

use crate::bev_grid::{BevGrid, GridSpec};
use crate::error::{Error, Result};
use crate::features::{lidar_features, multiscale_stack, semantic_features, FeatureGrid};
use crate::fusion_model::{init, train, Hyperparams, TrainBatch, TrainConfig, TrainOutcome};
use crate::geometry::{CameraModel, PointCloud};
use crate::pseudo_label::{paint_points, PseudoLabelGrid, SemanticImage};

/// Which feature branches a model sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Fused,
    Lidar,
    Semantic,
}

impl Modality {
    fn keeps(self, channel: &str) -> bool {
        match self {
            Modality::Fused => true,
            Modality::Lidar => channel.contains("/lidar/"),
            Modality::Semantic => channel.contains("/semantic/"),
        }
    }
}

/// Multi-scale LiDAR and semantic features of one sweep with its image.
pub fn frame_features(
    cloud: &PointCloud,
    cam: &CameraModel,
    image: &SemanticImage,
    spec: &GridSpec,
    levels: &[usize],
) -> Result<FeatureGrid> {
    let lidar = lidar_features(cloud, spec);
    let painted = paint_points(cloud, cam, image)?;
    let semantic = semantic_features(&painted, spec, image.num_classes())?;
    multiscale_stack(&lidar, &semantic, levels)
}

/// The channels of `features` belonging to `modality`, in order.
pub fn select_modality(features: &FeatureGrid, modality: Modality) -> Result<FeatureGrid> {
    let keep: Vec<usize> = (0..features.channels())
        .filter(|&c| modality.keeps(&features.manifest[c]))
        .collect();
    if keep.is_empty() {
        return Err(Error::InvalidParameter(format!("no {modality:?} channels in feature grid")));
    }
    let n = features.spec().num_cells();
    let mut values = Vec::with_capacity(keep.len() * n);
    for &c in &keep {
        values.extend_from_slice(features.grid.plane(c));
    }
    FeatureGrid::new(
        BevGrid::from_values(*features.spec(), keep.len(), values)?,
        keep.iter().map(|&c| features.manifest[c].clone()).collect(),
    )
}

/// Cells where any pyramid level saw a LiDAR return.
pub fn coverage(features: &FeatureGrid) -> Vec<bool> {
    let n = features.spec().num_cells();
    let mut out = vec![false; n];
    for (c, name) in features.manifest.iter().enumerate() {
        if name.ends_with("/log_count") || name.ends_with("/observed") {
            for (o, v) in out.iter_mut().zip(features.grid.plane(c)) {
                *o |= *v > 0.0;
            }
        }
    }
    out
}

/// Cells holding at least one return of `cloud`, which must be in the grid's
/// frame.
pub fn sweep_footprint(cloud: &PointCloud, spec: &GridSpec) -> Vec<bool> {
    let mut out = vec![false; spec.num_cells()];
    for p in cloud.points() {
        if let Some((row, col)) = spec.world_to_cell(p.x, p.y) {
            out[spec.index(row, col)] = true;
        }
    }
    out
}

/// Training cells of one frame: the pseudo-label weights, zeroed where the
/// frame's own features saw nothing. `features` may be a modality subset of
/// `full`, from which coverage is taken.
pub fn pseudo_batch(features: &FeatureGrid, full: &FeatureGrid, pseudo: &PseudoLabelGrid) -> Result<TrainBatch> {
    let weights = masked(&pseudo.weight, &coverage(full));
    TrainBatch::from_grid(features, &pseudo.label, &weights, pseudo.num_classes)
}

/// `weights` with uncovered cells set to zero.
pub fn masked(weights: &[f64], covered: &[bool]) -> Vec<f64> {
    weights.iter().zip(covered).map(|(w, c)| if *c { *w } else { 0.0 }).collect()
}

/// Fresh model trained on `batch` with `hyper`.
pub fn fit(batch: &TrainBatch, num_classes: usize, hyper: &Hyperparams) -> Result<TrainOutcome> {
    let params = init(batch.dim, num_classes, hyper.hidden, hyper.seed)?;
    train(&params, batch, &TrainConfig::from(hyper))
}
