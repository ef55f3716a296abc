//! Analytic hyperspectral scenes, their exact renderer and the turntable pose
//! ring.
//!
//! A fixed camera watching an object spin on a turntable sees the same images
//! as a camera orbiting a fixed object, so the ring is generated directly in
//! the object frame.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{self, SplitSpec};
use crate::error::{Error, Result};
use crate::geometry::{pixel_ray, Aabb, CameraModel, Pose, Ray, Vec3};
use crate::hypercube::{self, CubeKind, HyperCube, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPeak {
    pub amplitude: f64,
    pub center_nm: f64,
    pub width_nm: f64,
}

/// Reflectance curve: constant base plus Gaussian peaks, clipped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reflectance {
    pub base: f64,
    pub peaks: Vec<GaussianPeak>,
}

impl Reflectance {
    pub fn flat(value: f64) -> Self {
        Reflectance {
            base: value,
            peaks: Vec::new(),
        }
    }

    pub fn with_peak(mut self, amplitude: f64, center_nm: f64, width_nm: f64) -> Self {
        self.peaks.push(GaussianPeak {
            amplitude,
            center_nm,
            width_nm,
        });
        self
    }

    pub fn eval(&self, nm: f64) -> f64 {
        let v = self.base
            + self
                .peaks
                .iter()
                .map(|p| {
                    let z = (nm - p.center_nm) / p.width_nm;
                    p.amplitude * (-0.5 * z * z).exp()
                })
                .sum::<f64>();
        v.clamp(0.0, 1.0)
    }

    pub fn sample(&self, wavelengths: &[f64]) -> Vec<f64> {
        wavelengths.iter().map(|w| self.eval(*w)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half_size: Vec3 },
}

impl Shape {
    pub fn center(&self) -> Vec3 {
        match self {
            Shape::Sphere { center, .. } | Shape::Box { center, .. } => *center,
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match *self {
            Shape::Sphere { center, radius } => {
                (center - Vec3::repeat(radius), center + Vec3::repeat(radius))
            }
            Shape::Box { center, half_size } => (center - half_size, center + half_size),
        }
    }

    /// Nearest positive hit distance along a unit-direction ray.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = ray.origin - center;
                let b = oc.dot(&ray.direction);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t0 = -b - s;
                let t1 = -b + s;
                if t0 > 1e-12 {
                    Some(t0)
                } else if t1 > 1e-12 {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Box { center, half_size } => {
                let aabb = Aabb {
                    min: center - half_size,
                    max: center + half_size,
                };
                let (t0, t1) = aabb.intersect(ray)?;
                if t0 > 1e-12 {
                    Some(t0)
                } else if t1 > 1e-12 {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }

    /// Signed distance (negative inside). Exact for spheres, the usual box SDF
    /// otherwise.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Box { center, half_size } => {
                let q = (p - center).abs() - half_size;
                let outside = q.map(|v| v.max(0.0)).norm();
                let inside = q.max().min(0.0);
                outside + inside
            }
        }
    }
}

/// Spherical cap on a primitive (seen from its center) with its own
/// reflectance, e.g. a bruise on a fruit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub axis: Vec3,
    pub cos_half_angle: f64,
    pub reflectance: Reflectance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub reflectance: Reflectance,
    #[serde(default)]
    pub patch: Option<Patch>,
}

impl Primitive {
    fn reflectance_at(&self, p: &Vec3) -> &Reflectance {
        if let Some(patch) = &self.patch {
            let dir = (p - self.shape.center()).normalize();
            if dir.dot(&patch.axis.normalize()) >= patch.cos_half_angle {
                return &patch.reflectance;
            }
        }
        &self.reflectance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub background: Reflectance,
    pub aabb: Aabb,
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>, background: Reflectance, aabb: Aabb) -> Result<Self> {
        let scene = AnalyticScene {
            primitives,
            background,
            aabb,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            let (lo, hi) = p.shape.bounds();
            if !(self.aabb.contains(&lo) && self.aabb.contains(&hi)) {
                return Err(Error::InvalidArgument(format!(
                    "primitive {i} extends outside the scene bounds"
                )));
            }
        }
        Ok(())
    }

    pub fn empty(aabb: Aabb) -> Self {
        AnalyticScene {
            primitives: Vec::new(),
            background: Reflectance::flat(1.0),
            aabb,
        }
    }

    /// Desk-scale fruit: a 5 cm sphere with a vegetation-like reflectance
    /// (green peak, red-edge rise, NIR plateau) and a darker bruise cap.
    pub fn desk_fruit() -> Self {
        let healthy = Reflectance::flat(0.06)
            .with_peak(0.22, 550.0, 35.0)
            .with_peak(0.62, 880.0, 140.0)
            .with_peak(0.15, 760.0, 40.0);
        let bruise = Reflectance::flat(0.05)
            .with_peak(0.10, 560.0, 50.0)
            .with_peak(0.30, 860.0, 160.0)
            .with_peak(0.10, 680.0, 60.0);
        let sphere = Primitive {
            shape: Shape::Sphere {
                center: Vec3::zeros(),
                radius: 0.05,
            },
            reflectance: healthy,
            patch: Some(Patch {
                axis: Vec3::new(1.0, 0.0, 0.3),
                cos_half_angle: 0.8,
                reflectance: bruise,
            }),
        };
        AnalyticScene {
            primitives: vec![sphere],
            background: Reflectance::flat(1.0),
            aabb: Aabb::cube(Vec3::zeros(), 0.08),
        }
    }

    /// First primitive hit by the ray: `(distance, primitive index)`.
    pub fn trace(&self, ray: &Ray) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = p.shape.intersect(ray) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    /// Distance from `p` to the closest primitive surface.
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|pr| pr.shape.signed_distance(p).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Signed distance to the union of primitives (negative inside).
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        self.primitives
            .iter()
            .map(|pr| pr.shape.signed_distance(p))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Exact single-view rendering of an analytic scene.
#[derive(Clone, Debug)]
pub struct AnalyticView {
    pub cube: HyperCube,
    /// Hit distance along each unit ray; infinite on background pixels.
    pub depth: Array2<f64>,
    pub mask: Mask,
}

/// Flat (unshaded) reflectance of the first hit, background otherwise.
pub fn render_analytic(
    scene: &AnalyticScene,
    pose: &Pose,
    cam: &CameraModel,
    wavelengths: &[f64],
) -> Result<AnalyticView> {
    hypercube::check_wavelengths(wavelengths)?;
    let background = scene.background.sample(wavelengths);
    let l = wavelengths.len();
    let (h, w) = (cam.height, cam.width);
    let mut data = Vec::with_capacity(h * w * l);
    let mut depth = Array2::from_elem((h, w), f64::INFINITY);
    let mut mask = Mask::empty(h, w);
    for v in 0..h {
        for u in 0..w {
            let ray = pixel_ray(cam, pose, u, v);
            match scene.trace(&ray) {
                Some((t, i)) => {
                    let hit = ray.at(t);
                    let refl = scene.primitives[i].reflectance_at(&hit);
                    data.extend(wavelengths.iter().map(|nm| refl.eval(*nm) as f32));
                    depth[[v, u]] = t;
                    mask.set(v, u, true);
                }
                None => data.extend(background.iter().map(|b| *b as f32)),
            }
        }
    }
    let cube = HyperCube::new(h, w, wavelengths.to_vec(), data, CubeKind::Calibrated)?;
    Ok(AnalyticView { cube, depth, mask })
}

/// Adds zero-mean Gaussian noise and clips back into `[0, 1]`.
pub fn add_noise(cube: &HyperCube, std: f64, rng: &mut ChaCha8Rng) -> Result<HyperCube> {
    if std <= 0.0 {
        return Ok(cube.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let data = cube
        .data()
        .iter()
        .map(|v| (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    HyperCube::new(
        cube.height(),
        cube.width(),
        cube.wavelengths().to_vec(),
        data,
        cube.kind(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurntableConfig {
    pub n_views: usize,
    /// Camera distance from `look_at` (m).
    pub radius: f64,
    /// Elevation above the turntable plane (rad).
    pub elevation: f64,
    pub look_at: Vec3,
    pub intrinsics: CameraModel,
}

impl TurntableConfig {
    /// 20 views of 64x64 pixels at 0.3 m, level with the object.
    pub fn desk_default() -> Self {
        TurntableConfig {
            n_views: 20,
            radius: 0.3,
            elevation: 0.0,
            look_at: Vec3::zeros(),
            intrinsics: CameraModel::from_fov(0.443, 64, 64).expect("valid default camera"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 2 {
            return Err(Error::InvalidArgument(format!(
                "turntable needs at least 2 views, got {}",
                self.n_views
            )));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ring radius must be positive, got {}",
                self.radius
            )));
        }
        self.intrinsics.validate()
    }
}

/// Camera-to-world poses equally spaced in azimuth, all looking at `look_at`.
pub fn pose_ring(cfg: &TurntableConfig) -> Result<Vec<Pose>> {
    cfg.validate()?;
    (0..cfg.n_views)
        .map(|k| {
            let az = 2.0 * PI * k as f64 / cfg.n_views as f64;
            let (ce, se) = (cfg.elevation.cos(), cfg.elevation.sin());
            let eye = cfg.look_at + cfg.radius * Vec3::new(ce * az.cos(), ce * az.sin(), se);
            Pose::look_at(eye, cfg.look_at, Vec3::z())
        })
        .collect()
}

/// Writes one line per view: `id r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz`.
pub fn write_poses(poses: &[Pose], path: &Path) -> Result<()> {
    let mut s = String::from(
        "# view_id r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz (camera-to-world, meters)\n",
    );
    for (i, p) in poses.iter().enumerate() {
        write!(s, "{i}").unwrap();
        for r in 0..3 {
            for c in 0..3 {
                write!(s, " {:?}", p.rotation[(r, c)]).unwrap();
            }
        }
        for c in 0..3 {
            write!(s, " {:?}", p.translation[c]).unwrap();
        }
        s.push('\n');
    }
    Error::ensure_parent(path)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a poses file; lines may be ordered arbitrarily but ids must cover
/// `0..n` exactly once.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<(usize, Pose)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let ctx = || format!("{}:{}", path.display(), lineno + 1);
        let fields: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 13 {
            return Err(Error::parse(ctx(), format!("expected 13 fields, got {}", fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| Error::parse(ctx(), "bad view id"))?;
        let nums: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::parse(ctx(), format!("bad number `{f}`"))))
            .collect::<Result<_>>()?;
        let rotation = crate::geometry::Mat3::from_row_slice(&nums[..9]);
        let translation = Vec3::new(nums[9], nums[10], nums[11]);
        let pose = Pose {
            rotation,
            translation,
        };
        pose.validate(1e-6)
            .map_err(|e| Error::parse(ctx(), e.to_string()))?;
        entries.push((id, pose));
    }
    entries.sort_by_key(|(id, _)| *id);
    for (expected, (id, _)) in entries.iter().enumerate() {
        if *id != expected {
            return Err(Error::parse(
                path.display().to_string(),
                format!("view ids must be 0..n without gaps; found {id} at position {expected}"),
            ));
        }
    }
    Ok(entries.into_iter().map(|(_, p)| p).collect())
}

/// `fx fy cx cy width height` on a single line.
pub fn write_intrinsics(cam: &CameraModel, path: &Path) -> Result<()> {
    let s = format!(
        "# fx fy cx cy width height\n{:?} {:?} {:?} {:?} {} {}\n",
        cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height
    );
    Error::ensure_parent(path)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_intrinsics(path: &Path) -> Result<CameraModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .ok_or_else(|| Error::parse(path.display().to_string(), "no intrinsics line"))?;
    let f: Vec<&str> = line
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .collect();
    if f.len() != 6 {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected 6 fields, got {}", f.len()),
        ));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::parse(path.display().to_string(), format!("bad number `{s}`")))
    };
    let int = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(path.display().to_string(), format!("bad size `{s}`")))
    };
    CameraModel::new(num(f[0])?, num(f[1])?, num(f[2])?, num(f[3])?, int(f[4])?, int(f[5])?)
}

/// Options for [`emit_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub wavelengths: Vec<f64>,
    pub noise_std: f64,
    pub seed: u64,
    pub eval_fraction: f64,
}

impl SynthOptions {
    /// 8 bands over 400-1000 nm, noiseless, 10% held out.
    pub fn desk_default() -> Self {
        SynthOptions {
            wavelengths: hypercube::linear_wavelengths(400.0, 1000.0, 8),
            noise_std: 0.0,
            seed: 0,
            eval_fraction: 0.1,
        }
    }
}

/// Renders every ring view (with optional noise) into an in-memory dataset.
pub fn synthesize(
    scene: &AnalyticScene,
    cfg: &TurntableConfig,
    opts: &SynthOptions,
) -> Result<dataset::Dataset> {
    scene.validate()?;
    let poses = pose_ring(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cubes = Vec::with_capacity(poses.len());
    let mut masks = Vec::with_capacity(poses.len());
    for pose in &poses {
        let view = render_analytic(scene, pose, &cfg.intrinsics, &opts.wavelengths)?;
        cubes.push(add_noise(&view.cube, opts.noise_std, &mut rng)?);
        masks.push(Some(view.mask));
    }
    let split = SplitSpec::evenly_spaced(poses.len(), opts.eval_fraction)?;
    dataset::Dataset::new(cfg.intrinsics, poses, cubes, masks, scene.aabb, split)
}

/// Writes a synthetic dataset (cubes, masks, poses, intrinsics, split and the
/// analytic scene) to `out_dir`.
pub fn emit_dataset(
    scene: &AnalyticScene,
    cfg: &TurntableConfig,
    opts: &SynthOptions,
    out_dir: &Path,
) -> Result<dataset::Dataset> {
    let data = synthesize(scene, cfg, opts)?;
    data.write(out_dir)?;
    let scene_path = out_dir.join(dataset::SCENE_FILE);
    let json = serde_json::to_string_pretty(scene).expect("scene serializes");
    fs::write(&scene_path, json).map_err(|e| Error::io(&scene_path, e))?;
    Ok(data)
}

pub fn read_scene(path: &Path) -> Result<AnalyticScene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scene: AnalyticScene = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    scene.validate()?;
    Ok(scene)
}

/// Points distributed uniformly over a sphere surface (Fibonacci lattice).
pub fn sample_sphere_surface(center: Vec3, radius: f64, n: usize) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            center + radius * Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotation_angle_between;
    use approx::assert_relative_eq;

    fn ring(n: usize, elevation: f64) -> TurntableConfig {
        TurntableConfig {
            n_views: n,
            radius: 0.5,
            elevation,
            look_at: Vec3::new(0.0, 0.0, 0.02),
            intrinsics: CameraModel::from_fov(0.6, 32, 32).unwrap(),
        }
    }

    #[test]
    fn four_view_ring_azimuths() {
        let cfg = ring(4, 0.0);
        let poses = pose_ring(&cfg).unwrap();
        let expected = [0.0f64, 90.0, 180.0, 270.0];
        for (p, az) in poses.iter().zip(expected) {
            let rel = p.center() - cfg.look_at;
            let got = rel.y.atan2(rel.x).to_degrees().rem_euclid(360.0);
            assert_relative_eq!(got, az, epsilon = 1e-9);
            // optical axis passes through the look-at point
            let to_target = (cfg.look_at - p.center()).normalize();
            assert_relative_eq!(p.optical_axis(), to_target, epsilon = 1e-12);
        }
    }

    #[test]
    fn ring_rotations_are_orthonormal() {
        for p in pose_ring(&ring(17, 0.4)).unwrap() {
            let err = (p.rotation.transpose() * p.rotation - crate::geometry::Mat3::identity())
                .abs()
                .max();
            assert!(err < 1e-12);
            assert_relative_eq!(p.rotation.determinant(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn sixty_views_step_six_degrees() {
        let cfg = ring(60, 0.2);
        let poses = pose_ring(&cfg).unwrap();
        for w in poses.windows(2) {
            let a = w[0].center() - cfg.look_at;
            let b = w[1].center() - cfg.look_at;
            let step = (b.y.atan2(b.x) - a.y.atan2(a.x)).to_degrees().rem_euclid(360.0);
            assert_relative_eq!(step, 6.0, epsilon = 1e-9);
            // neighbouring cameras differ by a pure rotation about the turntable axis
            let expected = crate::geometry::axis_angle(&Vec3::z(), 6f64.to_radians());
            assert!(rotation_angle_between(&(expected * w[0].rotation), &w[1].rotation) < 1e-7);
        }
    }

    #[test]
    fn degenerate_ring_rejected() {
        let mut cfg = ring(1, 0.0);
        assert!(pose_ring(&cfg).is_err());
        cfg.n_views = 3;
        cfg.radius = 0.0;
        assert!(pose_ring(&cfg).is_err());
    }

    #[test]
    fn empty_scene_is_background() {
        let scene = AnalyticScene::empty(Aabb::cube(Vec3::zeros(), 0.1));
        let cfg = ring(3, 0.1);
        let pose = pose_ring(&cfg).unwrap()[1];
        let wl = hypercube::linear_wavelengths(400.0, 900.0, 4);
        let view = render_analytic(&scene, &pose, &cfg.intrinsics, &wl).unwrap();
        assert!(view.cube.data().iter().all(|v| *v == 1.0));
        assert!(view.mask.is_empty());
        assert!(view.depth.iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn centered_sphere_reflectance_and_projected_radius() {
        let r = 0.05;
        let d = 0.4;
        let refl = Reflectance::flat(0.2).with_peak(0.5, 650.0, 80.0);
        let scene = AnalyticScene::new(
            vec![Primitive {
                shape: Shape::Sphere {
                    center: Vec3::zeros(),
                    radius: r,
                },
                reflectance: refl.clone(),
                patch: None,
            }],
            Reflectance::flat(1.0),
            Aabb::cube(Vec3::zeros(), 0.1),
        )
        .unwrap();
        let cam = CameraModel::centered(300.0, 101, 101).unwrap();
        let pose = Pose::look_at(Vec3::new(d, 0.0, 0.0), Vec3::zeros(), Vec3::z()).unwrap();
        let wl = hypercube::linear_wavelengths(400.0, 1000.0, 7);
        let view = render_analytic(&scene, &pose, &cam, &wl).unwrap();
        let center = view.cube.pixel(50, 50);
        for (v, nm) in center.iter().zip(&wl) {
            assert_relative_eq!(*v as f64, refl.eval(*nm), epsilon = 1e-6);
        }
        // silhouette half-angle asin(r/d) projects to f * tan(asin(r/d)) pixels
        let expected = 300.0 * (r / d).asin().tan();
        let row: Vec<bool> = (0..101).map(|u| view.mask.get(50, u)).collect();
        let width = row.iter().filter(|m| **m).count() as f64;
        assert!((width / 2.0 - expected).abs() <= 1.0, "{width} vs {expected}");
        // mask equals finite depth
        for (m, dpt) in view.mask.values().iter().zip(view.depth.iter()) {
            assert_eq!(*m, dpt.is_finite());
        }
    }

    #[test]
    fn patch_changes_reflectance() {
        let scene = AnalyticScene::desk_fruit();
        let prim = &scene.primitives[0];
        let bruised = Vec3::new(0.05, 0.0, 0.0);
        let healthy = Vec3::new(-0.05, 0.0, 0.0);
        assert_ne!(prim.reflectance_at(&bruised), prim.reflectance_at(&healthy));
    }

    #[test]
    fn reflectance_clipped_to_unit_range() {
        let r = Reflectance::flat(0.8).with_peak(0.9, 500.0, 10.0);
        assert_eq!(r.eval(500.0), 1.0);
        let neg = Reflectance::flat(0.1).with_peak(-0.5, 500.0, 10.0);
        assert_eq!(neg.eval(500.0), 0.0);
    }

    #[test]
    fn poses_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let poses = pose_ring(&ring(7, 0.3)).unwrap();
        let path = dir.path().join("poses.txt");
        write_poses(&poses, &path).unwrap();
        assert_eq!(read_poses(&path).unwrap(), poses);
        let cam = CameraModel::from_fov(0.7, 40, 30).unwrap();
        let ipath = dir.path().join("intrinsics.txt");
        write_intrinsics(&cam, &ipath).unwrap();
        assert_eq!(read_intrinsics(&ipath).unwrap(), cam);
    }

    #[test]
    fn sphere_sampling_on_surface() {
        let pts = sample_sphere_surface(Vec3::new(0.1, 0.0, 0.0), 0.2, 500);
        for p in pts {
            assert_relative_eq!((p - Vec3::new(0.1, 0.0, 0.0)).norm(), 0.2, epsilon = 1e-12);
        }
    }
}
