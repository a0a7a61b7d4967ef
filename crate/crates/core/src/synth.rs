//! Procedural off-road scenes with exact ground truth.
//!
//! Terrain is a clamped sum of Gaussian bumps. Classes come from thresholded
//! blob fields plus a trail corridor that follows the ego trajectory. LiDAR
//! and camera rays are marched through the heightfield at a fixed step and
//! refined by linear interpolation between the last two samples.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bev_grid::GridSpec;
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, FrameId, PointCloud, RigidTransform};
use crate::pseudo_label::SemanticImage;
use crate::{rng, VOID};

pub const MAX_TERRAIN_HEIGHT: f64 = 2.0;
pub const RAY_STEP: f64 = 0.05;

pub const CLASS_NAMES: [&str; 5] = ["trail", "grass", "bush", "obstacle", "water"];
pub const DEFAULT_NUM_CLASSES: usize = 5;

const INTENSITY_TABLE: [f64; 8] = [0.35, 0.6, 0.6, 0.35, 0.1, 0.45, 0.75, 0.25];

/// LiDAR return intensity of a class. Dirt and rock share a value, as do the
/// two vegetation classes.
pub fn class_intensity(class: u8) -> f64 {
    INTENSITY_TABLE[class as usize % INTENSITY_TABLE.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub spec: GridSpec,
    pub num_classes: usize,
    /// Row-major heights in meters.
    pub heights: Vec<f64>,
    /// Row-major class indices.
    pub classes: Vec<u8>,
    /// World-from-ego poses along the drive.
    pub poses: Vec<RigidTransform>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub frames: usize,
    /// Meters driven between frames.
    pub frame_spacing: f64,
    /// Where the drive starts, in meters from the world's lower-x edge.
    pub start_offset: f64,
    pub trail_half_width: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams {
            frames: 10,
            frame_spacing: 3.0,
            start_offset: 8.0,
            trail_half_width: 2.5,
        }
    }
}

struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amplitude: f64,
}

fn blob_field(blobs: &[Blob], x: f64, y: f64) -> f64 {
    blobs
        .iter()
        .map(|b| {
            let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
            b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
        })
        .sum()
}

fn random_blobs(
    prng: &mut impl Rng,
    spec: &GridSpec,
    count: usize,
    sigma: (f64, f64),
    amplitude: (f64, f64),
) -> Vec<Blob> {
    let (w, h) = (spec.width as f64 * spec.resolution, spec.height as f64 * spec.resolution);
    (0..count)
        .map(|_| Blob {
            x: spec.origin_x + prng.random_range(0.0..w),
            y: spec.origin_y + prng.random_range(0.0..h),
            sigma: prng.random_range(sigma.0..sigma.1),
            amplitude: prng.random_range(amplitude.0..amplitude.1),
        })
        .collect()
}

/// Lateral offset of the trail centerline at distance `s` along the drive.
fn trail_offset(s: f64, origin_y: f64, extent_y: f64) -> f64 {
    origin_y + 0.5 * extent_y + 2.0 * (s / 40.0 * std::f64::consts::TAU).sin()
}

fn trail_slope(s: f64) -> f64 {
    2.0 * std::f64::consts::TAU / 40.0 * (s / 40.0 * std::f64::consts::TAU).cos()
}

pub fn gen_scene(spec: &GridSpec, num_classes: usize, seed: u64) -> Result<Scene> {
    gen_scene_with(spec, num_classes, seed, &SceneParams::default())
}

pub fn gen_scene_with(spec: &GridSpec, num_classes: usize, seed: u64, params: &SceneParams) -> Result<Scene> {
    spec.validate()?;
    if num_classes < 2 || num_classes > VOID as usize {
        return Err(Error::InvalidParameter(format!("scene needs 2..255 classes, got {num_classes}")));
    }
    let area = spec.width as f64 * spec.height as f64 * spec.resolution * spec.resolution;
    let extent_y = spec.height as f64 * spec.resolution;

    let mut terrain_rng = rng::stream(seed, &[1]);
    let bumps = random_blobs(&mut terrain_rng, spec, (area / 40.0).ceil() as usize, (2.0, 6.0), (0.1, 0.5));

    // One blob field per class beyond the trail and background classes.
    let class_fields: Vec<(Vec<Blob>, f64)> = (2..num_classes)
        .map(|k| {
            let mut prng = rng::stream(seed, &[2, k as u64]);
            let (density, sigma) = match k {
                2 => (900.0, (6.0, 10.0)),
                3 => (700.0, (4.0, 6.0)),
                _ => (1400.0, (6.0, 10.0)),
            };
            let count = (area / density).ceil() as usize;
            (random_blobs(&mut prng, spec, count, sigma, (0.8, 1.2)), 0.5)
        })
        .collect();

    let n = spec.num_cells();
    let mut heights = vec![0.0; n];
    let mut classes = vec![1u8; n];
    for row in 0..spec.height {
        for col in 0..spec.width {
            let (x, y) = spec.cell_center(row, col)?;
            let idx = spec.index(row, col);
            heights[idx] = blob_field(&bumps, x, y).clamp(0.0, MAX_TERRAIN_HEIGHT);
            for (k, (blobs, threshold)) in class_fields.iter().enumerate() {
                if blob_field(blobs, x, y) > *threshold {
                    classes[idx] = (k + 2) as u8;
                }
            }
            let s = x - spec.origin_x - params.start_offset;
            if (y - trail_offset(s, spec.origin_y, extent_y)).abs() < params.trail_half_width {
                classes[idx] = 0;
            }
        }
    }

    let mut scene = Scene {
        spec: *spec,
        num_classes,
        heights,
        classes,
        poses: Vec::new(),
        seed,
    };
    scene.poses = (0..params.frames)
        .map(|i| {
            let s = i as f64 * params.frame_spacing;
            let x = spec.origin_x + params.start_offset + s;
            let y = trail_offset(s, spec.origin_y, extent_y);
            let z = scene.height_at(x, y).unwrap_or(0.0);
            RigidTransform::from_euler(
                0.0,
                0.0,
                trail_slope(s).atan(),
                Vector3::new(x, y, z),
                FrameId::ego(),
                FrameId::world(),
            )
        })
        .collect();
    Ok(scene)
}

impl Scene {
    /// Flat scene of a single class, without poses.
    pub fn flat(spec: GridSpec, num_classes: usize, height: f64, class: u8) -> Scene {
        Scene {
            spec,
            num_classes,
            heights: vec![height; spec.num_cells()],
            classes: vec![class; spec.num_cells()],
            poses: Vec::new(),
            seed: 0,
        }
    }

    /// Bilinear height between cell centers; `None` outside the heightfield.
    pub fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        let s = &self.spec;
        let fx = (x - s.origin_x) / s.resolution - 0.5;
        let fy = (y - s.origin_y) / s.resolution - 0.5;
        if !(fx > -0.5 && fy > -0.5 && fx < s.width as f64 - 0.5 && fy < s.height as f64 - 0.5) {
            return None;
        }
        let cx = fx.clamp(0.0, (s.width - 1) as f64);
        let cy = fy.clamp(0.0, (s.height - 1) as f64);
        let (c0, r0) = (cx.floor() as usize, cy.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(s.width - 1), (r0 + 1).min(s.height - 1));
        let (tx, ty) = (cx - c0 as f64, cy - r0 as f64);
        let h = |r: usize, c: usize| self.heights[s.index(r, c)];
        let top = h(r0, c0) * (1.0 - tx) + h(r0, c1) * tx;
        let bottom = h(r1, c0) * (1.0 - tx) + h(r1, c1) * tx;
        Some(top * (1.0 - ty) + bottom * ty)
    }

    pub fn class_at(&self, x: f64, y: f64) -> Option<u8> {
        self.spec
            .world_to_cell(x, y)
            .map(|(r, c)| self.classes[self.spec.index(r, c)])
    }

    /// First intersection of a world-frame ray with the terrain.
    pub fn cast_ray(&self, origin: &Point3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<(f64, Point3<f64>)> {
        let dir = dir.normalize();
        let mut t_prev = 0.0;
        let mut gap_prev = origin.z - self.height_at(origin.x, origin.y)?;
        if gap_prev <= 0.0 {
            return None;
        }
        let mut t = RAY_STEP;
        while t <= max_range {
            let p = origin + dir * t;
            if p.z > MAX_TERRAIN_HEIGHT && dir.z >= 0.0 {
                return None;
            }
            let gap = p.z - self.height_at(p.x, p.y)?;
            if gap <= 0.0 {
                let t_hit = t_prev + (t - t_prev) * gap_prev / (gap_prev - gap);
                return Some((t_hit, origin + dir * t_hit));
            }
            t_prev = t;
            gap_prev = gap;
            t += RAY_STEP;
        }
        None
    }

    /// Per-cell truth for a BEV grid anchored at `world_from_ego`. Cells off
    /// the map, or outside `camera`'s view when one is given, are void.
    pub fn truth_grid(&self, world_from_ego: &RigidTransform, spec: &GridSpec, camera: Option<&CameraModel>) -> Vec<u8> {
        let ego_from_world = world_from_ego.inverse();
        let mut out = vec![VOID; spec.num_cells()];
        for row in 0..spec.height {
            for col in 0..spec.width {
                let (x, y) = spec.cell_center(row, col).expect("in bounds");
                let w = world_from_ego.apply(&Point3::new(x, y, 0.0));
                let (Some(class), Some(h)) = (self.class_at(w.x, w.y), self.height_at(w.x, w.y)) else {
                    continue;
                };
                if let Some(cam) = camera {
                    let ground = ego_from_world.apply(&Point3::new(w.x, w.y, h));
                    if cam.project(&cam.cam_from_ego().apply(&ground)).is_none() {
                        continue;
                    }
                }
                out[spec.index(row, col)] = class;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarConfig {
    pub rings: usize,
    pub beams: usize,
    pub max_range: f64,
    /// Standard deviation of Gaussian range noise, meters.
    pub noise_sigma: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    /// Sensor height above the ego origin.
    pub mount_height: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            rings: 32,
            beams: 512,
            max_range: 60.0,
            noise_sigma: 0.0,
            elevation_min_deg: -24.0,
            elevation_max_deg: 0.0,
            mount_height: 1.8,
        }
    }
}

/// Spinning LiDAR sweep at `world_from_ego`, returned in the ego frame.
/// `stream` keys the per-ray noise streams.
pub fn simulate_lidar(scene: &Scene, world_from_ego: &RigidTransform, config: &LidarConfig, stream: u64) -> Result<PointCloud> {
    if config.noise_sigma < 0.0 || !config.noise_sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("noise sigma {} must be >= 0", config.noise_sigma)));
    }
    let noise = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let ego_from_world = world_from_ego.inverse();
    let origin = world_from_ego.apply(&Point3::new(0.0, 0.0, config.mount_height));
    let mut points = Vec::new();
    let mut intensity = Vec::new();
    for ring in 0..config.rings {
        let frac = if config.rings > 1 { ring as f64 / (config.rings - 1) as f64 } else { 0.0 };
        let elev = (config.elevation_min_deg + frac * (config.elevation_max_deg - config.elevation_min_deg)).to_radians();
        for beam in 0..config.beams {
            let az = beam as f64 / config.beams as f64 * std::f64::consts::TAU;
            let dir_ego = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let dir = world_from_ego.rotation() * dir_ego;
            let Some((t, _)) = scene.cast_ray(&origin, &dir, config.max_range) else {
                continue;
            };
            let mut range = t;
            if config.noise_sigma > 0.0 {
                let mut prng = rng::stream(scene.seed, &[3, stream, ring as u64, beam as u64]);
                range += noise.sample(&mut prng);
            }
            let hit_true = origin + dir * t;
            let class = scene.class_at(hit_true.x, hit_true.y).unwrap_or(0);
            points.push(ego_from_world.apply(&(origin + dir * range)));
            intensity.push(class_intensity(class));
        }
    }
    Ok(PointCloud::new(FrameId::ego(), points, intensity)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Mount position in the ego frame.
    pub mount: [f64; 3],
    /// Downward pitch in degrees.
    pub pitch_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            width: 384,
            height: 192,
            focal: 192.0,
            mount: [0.3, 0.0, 2.0],
            pitch_deg: 12.0,
        }
    }
}

impl CameraConfig {
    /// Forward-looking pinhole camera pitched down by `pitch_deg`.
    pub fn camera_model(&self) -> Result<CameraModel> {
        let p = self.pitch_deg.to_radians();
        let forward = Vector3::new(p.cos(), 0.0, -p.sin());
        let right = Vector3::new(0.0, -1.0, 0.0);
        let down = forward.cross(&right);
        let ego_from_cam = Matrix3::from_columns(&[right, down, forward]);
        let rot = ego_from_cam.transpose();
        let mount = Vector3::from(self.mount);
        let cam_from_ego = RigidTransform::new(rot, -(rot * mount), FrameId::ego(), FrameId::camera())?;
        CameraModel::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
            cam_from_ego,
        )
    }
}

/// Semantic image seen from `world_from_ego`. Each pixel is one-hot on the
/// class under its center ray; with probability `label_noise` it is swapped
/// for a uniformly chosen other class. Pixels without a hit are uniform.
pub fn render_semantic(
    scene: &Scene,
    world_from_ego: &RigidTransform,
    cam: &CameraModel,
    label_noise: f64,
    max_range: f64,
    stream: u64,
) -> Result<SemanticImage> {
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(Error::InvalidParameter(format!("label noise {label_noise} outside [0, 1]")));
    }
    let k = scene.num_classes;
    let (w, h) = (cam.width, cam.height);
    let n = w * h;
    let world_from_cam = world_from_ego.compose(&cam.cam_from_ego().inverse())?;
    let origin = world_from_cam.apply(&Point3::origin());
    let mut probs = vec![0.0_f32; k * n];
    for row in 0..h {
        for col in 0..w {
            let pix = row * w + col;
            let d_cam = Vector3::new((col as f64 - cam.cx) / cam.fx, (row as f64 - cam.cy) / cam.fy, 1.0);
            let dir = world_from_cam.rotation() * d_cam;
            let hit = scene
                .cast_ray(&origin, &dir, max_range)
                .and_then(|(_, p)| scene.class_at(p.x, p.y));
            let Some(mut class) = hit else {
                for c in 0..k {
                    probs[c * n + pix] = 1.0 / k as f32;
                }
                continue;
            };
            if label_noise > 0.0 {
                let mut prng = rng::stream(scene.seed, &[4, stream, pix as u64]);
                if prng.random_bool(label_noise) {
                    let other = prng.random_range(0..k - 1) as u8;
                    class = if other >= class { other + 1 } else { other };
                }
            }
            probs[class as usize * n + pix] = 1.0;
        }
    }
    SemanticImage::new(w, h, k, probs)
}

/// Drops each point independently with probability `rate`.
pub fn corrupt(pc: &PointCloud, rate: f64, seed: u64) -> Result<PointCloud> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!("dropout rate {rate} outside [0, 1]")));
    }
    let mut prng = rng::stream(seed, &[5]);
    Ok(pc.retain_indices(|_| !prng.random_bool(rate)))
}

/// Everything needed to produce a synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    /// BEV grid of each frame, in its ego frame.
    pub grid: GridSpec,
    /// Heightfield resolution.
    pub world_resolution: f64,
    pub num_classes: usize,
    pub seed: u64,
    pub scene: SceneParams,
    pub lidar: LidarConfig,
    pub camera: CameraConfig,
    pub label_noise: f64,
    pub dropout: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: GridSpec::default(),
            world_resolution: 0.1,
            num_classes: DEFAULT_NUM_CLASSES,
            seed: 0,
            scene: SceneParams::default(),
            lidar: LidarConfig::default(),
            camera: CameraConfig::default(),
            label_noise: 0.0,
            dropout: 0.0,
        }
    }
}

impl SynthConfig {
    /// World extent covering every frame's BEV footprint with a margin.
    pub fn world_spec(&self) -> Result<GridSpec> {
        let margin = 10.0;
        let drive = self.scene.frame_spacing * self.scene.frames.saturating_sub(1) as f64;
        let forward = self.grid.origin_x + self.grid.width as f64 * self.grid.resolution;
        let lateral = (self.grid.origin_y.abs()).max((self.grid.origin_y + self.grid.height as f64 * self.grid.resolution).abs());
        let len_x = self.scene.start_offset + drive + forward.max(0.0) + margin;
        let len_y = 2.0 * (lateral + margin);
        let res = self.world_resolution;
        GridSpec::new(
            res,
            -self.scene.start_offset,
            -len_y / 2.0,
            (len_x / res).ceil() as usize,
            (len_y / res).ceil() as usize,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthFrame {
    pub cloud: PointCloud,
    pub image: SemanticImage,
    /// Truth on the frame's BEV grid, void outside the camera view.
    pub truth: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub scene: Scene,
    pub camera: CameraModel,
    pub grid: GridSpec,
    pub frames: Vec<SynthFrame>,
}

impl SynthDataset {
    pub fn poses(&self) -> &[RigidTransform] {
        &self.scene.poses
    }

    pub fn clouds(&self) -> Vec<PointCloud> {
        self.frames.iter().map(|f| f.cloud.clone()).collect()
    }

    pub fn images(&self) -> Vec<SemanticImage> {
        self.frames.iter().map(|f| f.image.clone()).collect()
    }

    pub fn cameras(&self) -> Vec<CameraModel> {
        vec![self.camera.clone(); self.frames.len()]
    }
}

/// Scene, sweeps, semantic images and truth grids for every frame.
pub fn generate_dataset(config: &SynthConfig) -> Result<SynthDataset> {
    let world = config.world_spec()?;
    let scene = gen_scene_with(&world, config.num_classes, config.seed, &config.scene)?;
    let camera = config.camera.camera_model()?;
    let mut frames = Vec::with_capacity(scene.poses.len());
    for (i, pose) in scene.poses.iter().enumerate() {
        let raw = simulate_lidar(&scene, pose, &config.lidar, i as u64)?;
        let cloud = corrupt(&raw, config.dropout, rng::derive_seed(config.seed, &[6, i as u64]))?;
        let image = render_semantic(&scene, pose, &camera, config.label_noise, config.lidar.max_range, i as u64)?;
        let truth = scene.truth_grid(pose, &config.grid, Some(&camera));
        frames.push(SynthFrame { cloud, image, truth });
    }
    Ok(SynthDataset {
        scene,
        camera,
        grid: config.grid,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::transform_points;
    use crate::pseudo_label::paint_points;

    fn small_world() -> GridSpec {
        GridSpec::new(0.1, -8.0, -20.0, 500, 400).unwrap()
    }

    #[test]
    fn scenes_are_reproducible() {
        let a = gen_scene(&small_world(), 5, 3).unwrap();
        let b = gen_scene(&small_world(), 5, 3).unwrap();
        assert_eq!(a, b);
        let c = gen_scene(&small_world(), 5, 4).unwrap();
        assert_ne!(a.heights, c.heights);
    }

    #[test]
    fn scene_contents() {
        let s = gen_scene(&small_world(), 5, 5).unwrap();
        assert!(s.heights.iter().all(|h| (0.0..=2.0).contains(h)));
        assert!(s.classes.iter().all(|c| (*c as usize) < 5));
        let mut hist = [0usize; 5];
        s.classes.iter().for_each(|c| hist[*c as usize] += 1);
        assert!(hist.iter().filter(|n| **n > 0).count() >= 2, "{hist:?}");
        assert_eq!(s.poses.len(), 10);
        assert!(gen_scene(&small_world(), 1, 0).is_err());
    }

    #[test]
    fn downward_ray_hits_flat_ground() {
        let s = Scene::flat(small_world(), 3, 0.0, 1);
        let (t, p) = s.cast_ray(&Point3::new(1.0, 2.0, 1.8), &Vector3::new(0.0, 0.0, -1.0), 60.0).unwrap();
        assert!((t - 1.8).abs() < 1e-9);
        assert!(p.z.abs() < 1e-9);
        let (_, p) = s.cast_ray(&Point3::new(1.0, 2.0, 1.8), &Vector3::new(1.0, 0.0, -0.3), 60.0).unwrap();
        assert!(p.z.abs() < 1e-9);
        assert!((p.x - (1.0 + 6.0)).abs() < 1e-6);
        assert!(s.cast_ray(&Point3::new(1.0, 2.0, 1.8), &Vector3::new(1.0, 0.0, 0.1), 60.0).is_none());
    }

    #[test]
    fn lidar_is_deterministic_and_on_terrain() {
        let s = gen_scene(&small_world(), 5, 6).unwrap();
        let pose = &s.poses[2];
        let cfg = LidarConfig::default();
        let a = simulate_lidar(&s, pose, &cfg, 2).unwrap();
        assert_eq!(a, simulate_lidar(&s, pose, &cfg, 2).unwrap());
        assert!(a.len() > 5000);
        let world = transform_points(pose, &a).unwrap();
        for p in world.points() {
            let (r, c) = s.spec.world_to_cell(p.x, p.y).unwrap();
            assert!((p.z - s.heights[s.spec.index(r, c)]).abs() < 0.1);
        }
    }

    #[test]
    fn lidar_noise_is_seeded() {
        let s = gen_scene(&small_world(), 5, 7).unwrap();
        let cfg = LidarConfig {
            noise_sigma: 0.05,
            ..Default::default()
        };
        let a = simulate_lidar(&s, &s.poses[0], &cfg, 0).unwrap();
        assert_eq!(a, simulate_lidar(&s, &s.poses[0], &cfg, 0).unwrap());
        assert_ne!(a, simulate_lidar(&s, &s.poses[0], &LidarConfig::default(), 0).unwrap());
    }

    fn small_camera() -> CameraModel {
        CameraConfig {
            width: 96,
            height: 48,
            focal: 48.0,
            ..Default::default()
        }
        .camera_model()
        .unwrap()
    }

    #[test]
    fn noiseless_render_is_one_hot_truth() {
        let s = gen_scene(&small_world(), 5, 8).unwrap();
        let cam = small_camera();
        let img = render_semantic(&s, &s.poses[1], &cam, 0.0, 60.0, 1).unwrap();
        let n = 96 * 48;
        let mut sky = 0;
        for pix in 0..n {
            let p: Vec<f32> = (0..5).map(|k| img.probs()[k * n + pix]).collect();
            if p.iter().all(|v| *v == 0.2) {
                sky += 1;
            } else {
                assert_eq!(p.iter().filter(|v| **v == 1.0).count(), 1);
                assert_eq!(p.iter().filter(|v| **v == 0.0).count(), 4);
            }
        }
        assert!(sky > 0 && sky < n);
    }

    #[test]
    fn full_label_noise_changes_every_ground_pixel() {
        let s = gen_scene(&small_world(), 5, 9).unwrap();
        let cam = small_camera();
        let clean = render_semantic(&s, &s.poses[0], &cam, 0.0, 60.0, 0).unwrap();
        let noisy = render_semantic(&s, &s.poses[0], &cam, 1.0, 60.0, 0).unwrap();
        let n = 96 * 48;
        for pix in 0..n {
            let c: Vec<f32> = (0..5).map(|k| clean.probs()[k * n + pix]).collect();
            let d: Vec<f32> = (0..5).map(|k| noisy.probs()[k * n + pix]).collect();
            if c.contains(&1.0) {
                let true_class = c.iter().position(|v| *v == 1.0).unwrap();
                assert_eq!(d[true_class], 0.0);
                assert_eq!(d.iter().filter(|v| **v == 1.0).count(), 1);
            } else {
                assert_eq!(c, d);
            }
        }
    }

    #[test]
    fn painted_points_agree_with_truth() {
        let s = gen_scene(&small_world(), 5, 10).unwrap();
        let cam = CameraConfig::default().camera_model().unwrap();
        let pose = &s.poses[3];
        let cloud = simulate_lidar(&s, pose, &LidarConfig::default(), 3).unwrap();
        let img = render_semantic(&s, pose, &cam, 0.0, 60.0, 3).unwrap();
        let painted = paint_points(&cloud, &cam, &img).unwrap();
        let world = transform_points(pose, &cloud).unwrap();
        let (mut valid, mut agree) = (0, 0);
        for (i, p) in world.points().iter().enumerate() {
            if !painted.valid[i] {
                continue;
            }
            valid += 1;
            let truth = s.class_at(p.x, p.y).unwrap() as usize;
            if painted.point_probs(i)[truth] == 1.0 {
                agree += 1;
            }
        }
        assert!(valid > 1000);
        let frac = agree as f64 / valid as f64;
        assert!(frac >= 0.99, "agreement {frac}");
    }

    #[test]
    fn dropout_edges_and_statistics() {
        let s = gen_scene(&small_world(), 5, 11).unwrap();
        let cloud = simulate_lidar(&s, &s.poses[0], &LidarConfig::default(), 0).unwrap();
        assert_eq!(corrupt(&cloud, 0.0, 1).unwrap(), cloud);
        assert!(corrupt(&cloud, 1.0, 1).unwrap().is_empty());
        assert!(corrupt(&cloud, 1.5, 1).is_err());

        let n = cloud.len() as f64;
        let rate = 0.3;
        let sd = (n * rate * (1.0 - rate)).sqrt();
        for seed in 0..20 {
            let kept = corrupt(&cloud, rate, seed).unwrap().len() as f64;
            assert!((kept - n * (1.0 - rate)).abs() <= 3.0 * sd, "seed {seed}: {kept} of {n}");
        }
    }

    #[test]
    fn truth_grid_masks_outside_view() {
        let s = gen_scene(&small_world(), 5, 12).unwrap();
        let cam = CameraConfig::default().camera_model().unwrap();
        let spec = GridSpec::new(0.2, 0.0, -12.8, 128, 128).unwrap();
        let all = s.truth_grid(&s.poses[0], &spec, None);
        let seen = s.truth_grid(&s.poses[0], &spec, Some(&cam));
        assert!(all.iter().all(|c| *c != VOID));
        let visible = seen.iter().filter(|c| **c != VOID).count();
        assert!(visible > 0 && visible < all.len());
        for (a, b) in all.iter().zip(&seen) {
            assert!(*b == VOID || a == b);
        }
    }
}
