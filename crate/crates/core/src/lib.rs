//! Dense bird's-eye-view terrain classification from LiDAR sweeps and camera
//! semantics.
//!
//! The pipeline paints LiDAR points with per-pixel class probabilities,
//! aggregates them into class-evidence grids that serve as uncertainty-aware
//! pseudo ground truth, builds multi-scale LiDAR and semantic feature grids,
//! and trains a per-cell classifier with an uncertainty-weighted loss.

pub mod bev_grid;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion_model;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod pseudo_label;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};

/// Label of cells that carry no class.
pub const VOID: u8 = 255;

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Shannon entropy divided by `ln K`, clamped to `[0, 1]`.
pub fn normalized_entropy(p: &[f64]) -> f64 {
    if p.len() < 2 {
        return 0.0;
    }
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    (h / (p.len() as f64).ln()).clamp(0.0, 1.0)
}
