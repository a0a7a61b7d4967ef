//! Rigid transforms, point clouds and pinhole projection.
//!
//! Camera frames follow the computer-vision convention: +z forward, +x right,
//! +y down. Ego frames are +x forward, +y left, +z up.

use std::fmt;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` and `det R = 1` accepted by [`RigidTransform::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Near plane of the camera frustum, in meters.
pub const Z_MIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FrameId(String);

impl FrameId {
    pub fn new(name: impl Into<String>) -> Self {
        FrameId(name.into())
    }

    pub fn ego() -> Self {
        FrameId::new("ego")
    }

    pub fn world() -> Self {
        FrameId::new("world")
    }

    pub fn camera() -> Self {
        FrameId::new("camera")
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for FrameId {
    fn from(s: &str) -> Self {
        FrameId::new(s)
    }
}

/// Maximum absolute entry of `RᵀR − I`, plus the determinant error.
pub fn orthonormality_error(rotation: &Matrix3<f64>) -> f64 {
    let gram = rotation.transpose() * rotation - Matrix3::identity();
    let off = gram.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    off.max((rotation.determinant() - 1.0).abs())
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(rotation: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = rotation.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut fix = Matrix3::identity();
        fix[(2, 2)] = -1.0;
        r = u * fix * v_t;
    }
    r
}

/// A proper rigid-body transform mapping points from `from` into `to`.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    from: FrameId,
    to: FrameId,
}

impl RigidTransform {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        from: FrameId,
        to: FrameId,
    ) -> Result<Self> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidRotation("non-finite entries".into()));
        }
        let err = orthonormality_error(&rotation);
        if err > ROTATION_TOLERANCE {
            return Err(Error::InvalidRotation(format!(
                "orthonormality error {err:.3e} exceeds {ROTATION_TOLERANCE:e}"
            )));
        }
        Ok(RigidTransform {
            rotation,
            translation,
            from,
            to,
        })
    }

    pub fn identity(frame: FrameId) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            from: frame.clone(),
            to: frame,
        }
    }

    pub fn from_translation(translation: Vector3<f64>, from: FrameId, to: FrameId) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation,
            from,
            to,
        }
    }

    /// Rotation by roll (x), pitch (y) and yaw (z), applied as `Rz·Ry·Rx`.
    pub fn from_euler(
        roll: f64,
        pitch: f64,
        yaw: f64,
        translation: Vector3<f64>,
        from: FrameId,
        to: FrameId,
    ) -> Self {
        let r = nalgebra::Rotation3::from_euler_angles(roll, pitch, yaw);
        RigidTransform {
            rotation: *r.matrix(),
            translation,
            from,
            to,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn from_frame(&self) -> &FrameId {
        &self.from
    }

    pub fn to_frame(&self) -> &FrameId {
        &self.to
    }

    /// Same transform with both frame labels replaced.
    pub fn relabel(mut self, from: FrameId, to: FrameId) -> Self {
        self.from = from;
        self.to = to;
        self
    }

    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: maps `other.from` into `self.to`.
    pub fn compose(&self, other: &RigidTransform) -> Result<RigidTransform> {
        if self.from != other.to {
            return Err(Error::FrameMismatch {
                expected: self.from.to_string(),
                found: other.to.to_string(),
            });
        }
        Ok(RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            from: other.from.clone(),
            to: self.to.clone(),
        })
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
            from: self.to.clone(),
            to: self.from.clone(),
        }
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(m: &[f64; 12], from: FrameId, to: FrameId) -> Result<Self> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        RigidTransform::new(rotation, translation, from, to)
    }
}

pub fn compose(a: &RigidTransform, b: &RigidTransform) -> Result<RigidTransform> {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// A LiDAR sweep: finite points with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3<f64>>,
    intensity: Vec<f64>,
    frame: FrameId,
}

impl PointCloud {
    /// Builds a cloud, dropping points with non-finite coordinates or
    /// intensity and clamping intensity to `[0, 1]`. Returns the cloud and
    /// the number of dropped points.
    pub fn new(
        frame: FrameId,
        points: Vec<Point3<f64>>,
        intensity: Vec<f64>,
    ) -> Result<(Self, usize)> {
        if points.len() != intensity.len() {
            return Err(Error::LengthMismatch {
                what: "points vs intensities",
                left: points.len(),
                right: intensity.len(),
            });
        }
        let total = points.len();
        let (points, intensity): (Vec<_>, Vec<_>) = points
            .into_iter()
            .zip(intensity)
            .filter(|(p, i)| p.iter().all(|v| v.is_finite()) && !i.is_nan())
            .map(|(p, i)| (p, i.clamp(0.0, 1.0)))
            .unzip();
        let dropped = total - points.len();
        Ok((
            PointCloud {
                points,
                intensity,
                frame,
            },
            dropped,
        ))
    }

    pub fn empty(frame: FrameId) -> Self {
        PointCloud {
            points: Vec::new(),
            intensity: Vec::new(),
            frame,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    pub fn intensity(&self) -> &[f64] {
        &self.intensity
    }

    pub fn frame(&self) -> &FrameId {
        &self.frame
    }

    pub fn with_frame(mut self, frame: FrameId) -> Self {
        self.frame = frame;
        self
    }

    /// Keeps the points for which `keep` returns true.
    pub fn retain_indices(&self, mut keep: impl FnMut(usize) -> bool) -> PointCloud {
        let mut points = Vec::new();
        let mut intensity = Vec::new();
        for i in 0..self.len() {
            if keep(i) {
                points.push(self.points[i]);
                intensity.push(self.intensity[i]);
            }
        }
        PointCloud {
            points,
            intensity,
            frame: self.frame.clone(),
        }
    }
}

pub fn transform_points(t: &RigidTransform, pc: &PointCloud) -> Result<PointCloud> {
    if pc.frame != t.from {
        return Err(Error::FrameMismatch {
            expected: t.from.to_string(),
            found: pc.frame.to_string(),
        });
    }
    Ok(PointCloud {
        points: pc.points.iter().map(|p| t.apply(p)).collect(),
        intensity: pc.intensity.clone(),
        frame: t.to.clone(),
    })
}

/// Pinhole camera with its extrinsic `cam_from_ego`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    cam_from_ego: RigidTransform,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        cam_from_ego: RigidTransform,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::InvalidCamera("non-finite principal point".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidCamera(format!(
                "image size must be at least 1x1 (got {width}x{height})"
            )));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            cam_from_ego,
        })
    }

    pub fn cam_from_ego(&self) -> &RigidTransform {
        &self.cam_from_ego
    }

    /// Continuous pixel coordinates of a camera-frame point, or `None` when
    /// it falls outside the frustum.
    pub fn project(&self, p: &Point3<f64>) -> Option<(f64, f64)> {
        if !(p.z > Z_MIN) {
            return None;
        }
        let u = self.fx * p.x / p.z + self.cx;
        let v = self.fy * p.y / p.z + self.cy;
        let inside = u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64;
        inside.then_some((u, v))
    }

    /// Nearest pixel index for continuous coordinates, rounding halves down.
    pub fn pixel_index(&self, u: f64, v: f64) -> (usize, usize) {
        let round = |x: f64, n: usize| -> usize {
            let i = (x - 0.5).ceil();
            (i.max(0.0) as usize).min(n - 1)
        };
        (round(u, self.width), round(v, self.height))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelHit {
    pub index: usize,
    pub u: f64,
    pub v: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Projection {
    pub hits: Vec<PixelHit>,
    /// Points outside the frustum.
    pub excluded: usize,
}

/// Projects camera-frame points; out-of-frustum points are counted, not
/// returned.
pub fn project_points(cam: &CameraModel, pc_cam: &PointCloud) -> Projection {
    let mut out = Projection::default();
    for (index, p) in pc_cam.points.iter().enumerate() {
        match cam.project(p) {
            Some((u, v)) => out.hits.push(PixelHit { index, u, v }),
            None => out.excluded += 1,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;
    use std::f64::consts::FRAC_PI_2;

    fn random_transform(rng: &mut impl Rng, from: &str, to: &str) -> RigidTransform {
        RigidTransform::from_euler(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.0..3.0),
            Vector3::new(
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
            ),
            from.into(),
            to.into(),
        )
    }

    fn random_point(rng: &mut impl Rng) -> Point3<f64> {
        Point3::new(
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
            rng.random_range(-20.0..20.0),
        )
    }

    fn assert_transform_close(a: &RigidTransform, b: &RigidTransform, tol: f64) {
        assert_eq!(a.from_frame(), b.from_frame());
        assert_eq!(a.to_frame(), b.to_frame());
        for (x, y) in a.to_row_major().iter().zip(b.to_row_major()) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn identity_composition() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let t = random_transform(&mut rng, "a", "b");
        let id = RigidTransform::identity("b".into());
        assert_transform_close(&compose(&id, &t).unwrap(), &t, 0.0);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let t = random_transform(&mut rng, "a", "b");
        let id = compose(&t, &invert(&t)).unwrap();
        assert_transform_close(&id, &RigidTransform::identity("b".into()), 1e-9);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let a = random_transform(&mut rng, "b", "c");
        let b = random_transform(&mut rng, "a", "b");
        let ab = compose(&a, &b).unwrap();
        assert_eq!(ab.from_frame().as_str(), "a");
        assert_eq!(ab.to_frame().as_str(), "c");
        for _ in 0..100 {
            let p = random_point(&mut rng);
            let direct = ab.apply(&p);
            let seq = a.apply(&b.apply(&p));
            assert!((direct - seq).norm() < 1e-9);
        }
    }

    #[test]
    fn compose_frame_mismatch_names_both() {
        let a = RigidTransform::identity("x".into());
        let b = RigidTransform::identity("y".into());
        let msg = compose(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("`x`") && msg.contains("`y`"), "{msg}");
    }

    #[test]
    fn invert_cases() {
        let id = RigidTransform::identity("a".into());
        assert_transform_close(&invert(&id), &id, 0.0);

        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0), "a".into(), "b".into());
        let inv = invert(&t);
        assert_eq!(inv.translation(), &Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(inv.from_frame().as_str(), "b");

        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let t = random_transform(&mut rng, "a", "b");
        assert_transform_close(&invert(&invert(&t)), &t, 1e-9);
        let inv = invert(&t);
        for _ in 0..100 {
            let p = random_point(&mut rng);
            assert!((inv.apply(&t.apply(&p)) - p).norm() < 1e-9);
        }
    }

    #[test]
    fn rotation_drift_over_many_compositions() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        let mut acc = RigidTransform::identity("a".into());
        for _ in 0..100 {
            let step = random_transform(&mut rng, "a", "a");
            acc = compose(&step, &acc).unwrap();
        }
        assert!(orthonormality_error(acc.rotation()) < 1e-6);
    }

    #[test]
    fn rejects_non_orthonormal() {
        let mut r = Matrix3::identity();
        r[(0, 1)] = 1e-3;
        assert!(RigidTransform::new(r, Vector3::zeros(), "a".into(), "b".into()).is_err());
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflect, Vector3::zeros(), "a".into(), "b".into()).is_err());
    }

    fn cloud(points: Vec<Point3<f64>>, frame: &str) -> PointCloud {
        let n = points.len();
        PointCloud::new(frame.into(), points, vec![0.5; n]).unwrap().0
    }

    #[test]
    fn transform_points_cases() {
        let pc = cloud(vec![Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0)], "a");
        let id = RigidTransform::identity("a".into());
        assert_eq!(transform_points(&id, &pc).unwrap(), pc);

        let up = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 1.0), "a".into(), "b".into());
        let moved = transform_points(&up, &pc).unwrap();
        assert_eq!(moved.points()[0], Point3::new(0.0, 0.0, 1.0));
        assert_eq!(moved.frame().as_str(), "b");
        assert_eq!(moved.intensity(), pc.intensity());

        let yaw = RigidTransform::from_euler(0.0, 0.0, FRAC_PI_2, Vector3::zeros(), "a".into(), "b".into());
        let rotated = transform_points(&yaw, &pc).unwrap();
        assert!((rotated.points()[1] - Point3::new(0.0, 1.0, 0.0)).norm() < 1e-9);

        assert!(matches!(
            transform_points(&up, &cloud(vec![], "b")),
            Err(Error::FrameMismatch { .. })
        ));
    }

    #[test]
    fn cloud_ingestion_filters_and_clamps() {
        let (pc, dropped) = PointCloud::new(
            "a".into(),
            vec![Point3::new(f64::NAN, 0.0, 0.0), Point3::new(1.0, 2.0, 3.0), Point3::new(0.0, f64::INFINITY, 0.0)],
            vec![0.1, 1.7, 0.2],
        )
        .unwrap();
        assert_eq!(dropped, 2);
        assert_eq!(pc.len(), 1);
        assert_eq!(pc.intensity(), &[1.0]);
    }

    fn test_camera() -> CameraModel {
        CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100, RigidTransform::identity("camera".into())).unwrap()
    }

    #[test]
    fn projection_examples() {
        let cam = test_camera();
        let pc = cloud(
            vec![Point3::new(0.0, 0.0, 5.0), Point3::new(1.0, 0.0, 5.0), Point3::new(0.0, 0.0, -1.0)],
            "camera",
        );
        let proj = project_points(&cam, &pc);
        assert_eq!(proj.excluded, 1);
        assert_eq!(proj.hits.len(), 2);
        assert_eq!((proj.hits[0].u, proj.hits[0].v), (50.0, 50.0));
        assert_eq!((proj.hits[1].u, proj.hits[1].v), (70.0, 50.0));
        assert_eq!(proj.hits[1].index, 1);
    }

    #[test]
    fn projection_respects_near_plane_and_image_bounds() {
        let cam = test_camera();
        assert!(cam.project(&Point3::new(0.0, 0.0, 0.1)).is_none());
        assert!(cam.project(&Point3::new(0.0, 0.0, 0.1001)).is_some());
        // u = 100 is outside a 100-pixel-wide image.
        assert!(cam.project(&Point3::new(2.5, 0.0, 5.0)).is_none());
        assert!(cam.project(&Point3::new(-2.5, 0.0, 5.0)).is_some());
    }

    #[test]
    fn pixel_rounding_goes_half_down() {
        let cam = test_camera();
        assert_eq!(cam.pixel_index(2.5, 3.5), (2, 3));
        assert_eq!(cam.pixel_index(2.51, 3.49), (3, 3));
        assert_eq!(cam.pixel_index(0.0, 0.0), (0, 0));
        assert_eq!(cam.pixel_index(99.9, 99.6), (99, 99));
    }

    #[test]
    fn camera_validation() {
        let id = RigidTransform::identity("camera".into());
        assert!(CameraModel::new(0.0, 1.0, 0.0, 0.0, 1, 1, id.clone()).is_err());
        assert!(CameraModel::new(1.0, -1.0, 0.0, 0.0, 1, 1, id.clone()).is_err());
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, 0, 1, id).is_err());
    }

    #[test]
    fn projection_is_scale_invariant_along_rays() {
        let cam = test_camera();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(6);
        let mut checked = 0;
        for _ in 0..1000 {
            let p = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(0.2..10.0));
            let s = rng.random_range(0.1..5.0);
            if let (Some(a), Some(b)) = (cam.project(&p), cam.project(&Point3::from(p.coords * s))) {
                assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn transform_then_project_is_associative() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        let cam_from_ego = RigidTransform::from_euler(
            -FRAC_PI_2 - 0.1,
            0.0,
            -FRAC_PI_2,
            Vector3::new(0.0, 0.3, 1.5),
            FrameId::ego(),
            FrameId::camera(),
        );
        let cam = CameraModel::new(200.0, 200.0, 160.0, 120.0, 320, 240, cam_from_ego.clone()).unwrap();
        let pts: Vec<_> = (0..500)
            .map(|_| Point3::new(rng.random_range(0.0..30.0), rng.random_range(-15.0..15.0), rng.random_range(-2.0..2.0)))
            .collect();
        let ego = cloud(pts.clone(), "ego");
        let via_cloud = project_points(&cam, &transform_points(&cam_from_ego, &ego).unwrap());
        let pre: Vec<_> = pts.iter().map(|p| cam_from_ego.apply(p)).collect();
        let direct = project_points(&cam, &cloud(pre, "camera"));
        assert_eq!(via_cloud, direct);
        assert!(!direct.hits.is_empty());
    }
}
