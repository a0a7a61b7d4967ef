use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{Matrix3, Vector3};

use super::{read_text, write_atomic};
use crate::error::{Error, Result};
use crate::geometry::{orthonormality_error, orthonormalize, CameraModel, FrameId, RigidTransform};

/// Largest rotation drift that is silently repaired when reading poses.
pub const POSE_DRIFT_TOLERANCE: f64 = 1e-3;

/// Below this drift rotations are taken as written.
const EXACT_DRIFT: f64 = 1e-9;

/// `key=value` lines; blank lines and `#` comments are ignored. Later
/// duplicates override earlier ones with a warning. Values keep the line
/// number they came from.
pub fn parse_key_values(path: &Path, text: &str) -> Result<BTreeMap<String, (String, usize)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(path, format!("line {line_no}: expected key=value")));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::format(path, format!("line {line_no}: empty key")));
        }
        if let Some((_, prev)) = out.insert(key.to_string(), (value.trim().to_string(), line_no)) {
            warn!(
                "{}: key `{key}` on line {line_no} overrides line {prev}",
                path.display()
            );
        }
    }
    Ok(out)
}

pub fn read_key_values(path: &Path) -> Result<BTreeMap<String, (String, usize)>> {
    parse_key_values(path, &read_text(path)?)
}

fn parse_reals(path: &Path, line_no: usize, text: &str, expected: usize) -> Result<Vec<f64>> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() != expected {
        return Err(Error::format(
            path,
            format!("line {line_no}: expected {expected} numbers, found {}", tokens.len()),
        ));
    }
    tokens
        .iter()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(path, format!("line {line_no}: `{t}` is not a finite number")))
        })
        .collect()
}

fn transform_from_reals(path: &Path, line_no: usize, m: &[f64], from: FrameId, to: FrameId) -> Result<RigidTransform> {
    let mut rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    let drift = orthonormality_error(&rotation);
    if !(drift <= POSE_DRIFT_TOLERANCE) {
        return Err(Error::format(
            path,
            format!("line {line_no}: rotation drift {drift:.3e} exceeds {POSE_DRIFT_TOLERANCE:e}"),
        ));
    }
    if drift > EXACT_DRIFT {
        rotation = orthonormalize(&rotation);
    }
    RigidTransform::new(rotation, Vector3::new(m[3], m[7], m[11]), from, to)
        .map_err(|e| Error::format(path, format!("line {line_no}: {e}")))
}

/// One world-from-ego pose per non-blank line, as 12 row-major reals.
pub fn decode_poses(path: &Path, text: &str) -> Result<Vec<RigidTransform>> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m = parse_reals(path, i + 1, line, 12)?;
        poses.push(transform_from_reals(path, i + 1, &m, FrameId::ego(), FrameId::world())?);
    }
    Ok(poses)
}

pub fn read_poses(path: &Path) -> Result<Vec<RigidTransform>> {
    decode_poses(path, &read_text(path)?)
}

fn join_reals(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn encode_poses(poses: &[RigidTransform]) -> String {
    let mut s = String::new();
    for p in poses {
        let _ = writeln!(s, "{}", join_reals(&p.to_row_major()));
    }
    s
}

pub fn write_poses(path: &Path, poses: &[RigidTransform]) -> Result<()> {
    write_atomic(path, encode_poses(poses).as_bytes())
}

const CALIB_KEYS: [&str; 7] = ["fx", "fy", "cx", "cy", "width", "height", "T_cam_ego"];

/// Camera intrinsics and the row-major 3×4 `T_cam_ego` extrinsic.
pub fn decode_calib(path: &Path, text: &str) -> Result<CameraModel> {
    let kv = parse_key_values(path, text)?;
    let get = |key: &str| -> Result<&(String, usize)> {
        kv.get(key).ok_or_else(|| Error::format(path, format!("missing key `{key}`")))
    };
    for key in CALIB_KEYS {
        get(key)?;
    }
    let real = |key: &str| -> Result<f64> {
        let (v, line) = get(key)?;
        parse_reals(path, *line, v, 1).map(|r| r[0])
    };
    let size = |key: &str| -> Result<usize> {
        let (v, line) = get(key)?;
        v.parse()
            .map_err(|_| Error::format(path, format!("line {line}: `{key}` must be a non-negative integer")))
    };
    let (t, t_line) = get("T_cam_ego")?;
    let m = parse_reals(path, *t_line, t, 12)?;
    let cam_from_ego = transform_from_reals(path, *t_line, &m, FrameId::ego(), FrameId::camera())?;
    CameraModel::new(
        real("fx")?,
        real("fy")?,
        real("cx")?,
        real("cy")?,
        size("width")?,
        size("height")?,
        cam_from_ego,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_calib(path: &Path) -> Result<CameraModel> {
    decode_calib(path, &read_text(path)?)
}

pub fn encode_calib(cam: &CameraModel) -> String {
    format!(
        "fx={}\nfy={}\ncx={}\ncy={}\nwidth={}\nheight={}\nT_cam_ego={}\n",
        cam.fx,
        cam.fy,
        cam.cx,
        cam.cy,
        cam.width,
        cam.height,
        join_reals(&cam.cam_from_ego().to_row_major())
    )
}

pub fn write_calib(path: &Path, cam: &CameraModel) -> Result<()> {
    write_atomic(path, encode_calib(cam).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CALIB: &str = "fx=500\nfy=510\ncx=320.5\ncy=240\nwidth=640\nheight=480\nT_cam_ego=0 -1 0 0 0 0 -1 1.5 1 0 0 0\n";

    #[test]
    fn identity_pose_line() {
        let p = decode_poses(Path::new("poses.txt"), "1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
        assert_eq!(p, vec![RigidTransform::identity(FrameId::ego()).relabel(FrameId::ego(), FrameId::world())]);
    }

    #[test]
    fn short_pose_line_names_line() {
        let err = decode_poses(Path::new("poses.txt"), "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2") && err.contains("poses.txt"), "{err}");
    }

    #[test]
    fn pose_drift_is_repaired_or_rejected() {
        let p = decode_poses(Path::new("p"), "1.0002 0 0 0 0 1 0 0 0 0 1 0").unwrap();
        assert!(orthonormality_error(p[0].rotation()) < 1e-12);
        assert!(decode_poses(Path::new("p"), "1.01 0 0 0 0 1 0 0 0 0 1 0").is_err());
        assert!(decode_poses(Path::new("p"), "nan 0 0 0 0 1 0 0 0 0 1 0").is_err());
    }

    #[test]
    fn complete_calib() {
        let cam = decode_calib(Path::new("calib.txt"), CALIB).unwrap();
        assert_eq!((cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height), (500.0, 510.0, 320.5, 240.0, 640, 480));
        assert_eq!(cam.cam_from_ego().translation()[1], 1.5);
        let again = decode_calib(Path::new("c"), &encode_calib(&cam)).unwrap();
        assert_eq!(again, cam);
    }

    #[test]
    fn missing_key_is_named() {
        let text = CALIB.replace("fy=510\n", "");
        let err = decode_calib(Path::new("calib.txt"), &text).unwrap_err().to_string();
        assert!(err.contains("`fy`"), "{err}");
    }

    #[test]
    fn duplicate_key_last_wins() {
        let text = format!("{CALIB}fx=700\n");
        assert_eq!(decode_calib(Path::new("c"), &text).unwrap().fx, 700.0);
    }

    #[test]
    fn non_positive_focal_rejected() {
        let text = CALIB.replace("fx=500", "fx=0");
        assert!(decode_calib(Path::new("c"), &text).is_err());
    }
}
