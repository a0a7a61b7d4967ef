use std::path::Path;

use log::warn;
use nalgebra::Point3;

use super::{read_bytes, write_atomic};
use crate::error::{Error, Result};
use crate::geometry::{FrameId, PointCloud};

/// Parses packed `f32` quadruples `(x, y, z, intensity)` in the ego frame.
/// Returns the cloud and the number of non-finite points dropped.
pub fn decode_pointcloud(path: &Path, bytes: &[u8]) -> Result<(PointCloud, usize)> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::format(
            path,
            format!("point cloud length {} bytes is not a multiple of 16", bytes.len()),
        ));
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4 bytes")) as f64;
        points.push(Point3::new(f(0), f(1), f(2)));
        intensity.push(f(3));
    }
    PointCloud::new(FrameId::ego(), points, intensity)
}

pub fn read_pointcloud(path: &Path) -> Result<(PointCloud, usize)> {
    let (pc, dropped) = decode_pointcloud(path, &read_bytes(path)?)?;
    if dropped > 0 {
        warn!("{}: dropped {dropped} non-finite points", path.display());
    }
    Ok((pc, dropped))
}

pub fn encode_pointcloud(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(pc.len() * 16);
    for (p, i) in pc.points().iter().zip(pc.intensity()) {
        for v in [p.x, p.y, p.z, *i] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_pointcloud(path: &Path, pc: &PointCloud) -> Result<()> {
    write_atomic(path, &encode_pointcloud(pc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_known_points() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5, -1.0, 0.0, 0.25, 2.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let (pc, dropped) = decode_pointcloud(Path::new("a.bin"), &bytes).unwrap();
        assert_eq!(dropped, 0);
        assert_eq!(pc.points(), &[Point3::new(1.0, 2.0, 3.0), Point3::new(-1.0, 0.0, 0.25)]);
        assert_eq!(pc.intensity(), &[0.5, 1.0]);
    }

    #[test]
    fn empty_and_bad_lengths() {
        let (pc, _) = decode_pointcloud(Path::new("e.bin"), &[]).unwrap();
        assert!(pc.is_empty());
        let err = decode_pointcloud(Path::new("b.bin"), &[0; 17]).unwrap_err().to_string();
        assert!(err.contains("17") && err.contains("b.bin"), "{err}");
    }

    #[test]
    fn nan_points_are_counted() {
        let mut bytes = Vec::new();
        for v in [f32::NAN, 0.0, 0.0, 0.1, 1.0, 1.0, 1.0, 0.1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let (pc, dropped) = decode_pointcloud(Path::new("n.bin"), &bytes).unwrap();
        assert_eq!((pc.len(), dropped), (1, 1));
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_pointcloud(Path::new("/nonexistent/x.bin")).unwrap_err().to_string();
        assert!(err.contains("/nonexistent/x.bin"));
    }
}
