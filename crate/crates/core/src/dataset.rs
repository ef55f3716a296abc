//! Multi-view calibrated dataset: per-view cubes, foreground masks, poses,
//! shared intrinsics, scene bounds and the train/held-out split.
//!
//! On-disk layout:
//!
//! ```text
//! <dir>/dataset.json        bounds, wavelengths, split
//! <dir>/intrinsics.txt      fx fy cx cy width height
//! <dir>/poses.txt           one camera-to-world pose per view
//! <dir>/views/view_NNN.hdr  + view_NNN.bil
//! <dir>/masks/view_NNN.png  optional foreground masks
//! <dir>/scene.json          optional analytic scene (synthetic data only)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, CameraModel, Pose};
use crate::hypercube::{self, CubeKind, HyperCube, Mask};
use crate::scene;

pub const MANIFEST_FILE: &str = "dataset.json";
pub const SCENE_FILE: &str = "scene.json";
pub const POSES_FILE: &str = "poses.txt";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl SplitSpec {
    /// Holds out `round(n * fraction)` views (at least one) spread evenly
    /// around the ring.
    pub fn evenly_spaced(n: usize, eval_fraction: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two views to split, got {n}"
            )));
        }
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::InvalidArgument(format!(
                "eval fraction {eval_fraction} outside [0, 1)"
            )));
        }
        let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n - 1);
        let eval: Vec<usize> = (0..n_eval)
            .map(|k| ((k as f64 + 0.5) * n as f64 / n_eval as f64).floor() as usize)
            .collect();
        let train = (0..n).filter(|i| !eval.contains(i)).collect();
        Ok(SplitSpec { train, eval })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    n_views: usize,
    wavelengths: Vec<f64>,
    aabb: Aabb,
    split: SplitSpec,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub camera: CameraModel,
    pub poses: Vec<Pose>,
    pub cubes: Vec<HyperCube>,
    pub masks: Vec<Option<Mask>>,
    pub aabb: Aabb,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn new(
        camera: CameraModel,
        poses: Vec<Pose>,
        cubes: Vec<HyperCube>,
        masks: Vec<Option<Mask>>,
        aabb: Aabb,
        split: SplitSpec,
    ) -> Result<Self> {
        let d = Dataset {
            camera,
            poses,
            cubes,
            masks,
            aabb,
            split,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        let n = self.poses.len();
        if n == 0 || self.cubes.len() != n || self.masks.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} poses, {} cubes, {} masks",
                n,
                self.cubes.len(),
                self.masks.len()
            )));
        }
        let wl = self.cubes[0].wavelengths();
        for (i, c) in self.cubes.iter().enumerate() {
            if c.height() != self.camera.height || c.width() != self.camera.width {
                return Err(Error::ShapeMismatch(format!(
                    "view {i} is {}x{}, camera is {}x{}",
                    c.height(),
                    c.width(),
                    self.camera.height,
                    self.camera.width
                )));
            }
            if c.wavelengths() != wl {
                return Err(Error::ShapeMismatch(format!(
                    "view {i} has a different wavelength grid"
                )));
            }
            if c.kind() != CubeKind::Calibrated {
                return Err(Error::InvalidArgument(format!(
                    "view {i} is not calibrated"
                )));
            }
            if let Some(m) = &self.masks[i] {
                c.check_mask(m)?;
            }
        }
        let mut seen = vec![false; n];
        for &i in self.split.train.iter().chain(&self.split.eval) {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "split index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if self.split.train.is_empty() {
            return Err(Error::InvalidArgument("no training views".into()));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.poses.len()
    }

    pub fn wavelengths(&self) -> &[f64] {
        self.cubes[0].wavelengths()
    }

    pub fn bands(&self) -> usize {
        self.cubes[0].bands()
    }

    pub fn has_masks(&self, views: &[usize]) -> bool {
        views.iter().all(|&i| self.masks[i].is_some())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let views = dir.join("views");
        let masks = dir.join("masks");
        for d in [dir, views.as_path(), masks.as_path()] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (i, cube) in self.cubes.iter().enumerate() {
            hypercube::write_cube(cube, &views.join(view_name(i, "bil")))?;
            if let Some(m) = &self.masks[i] {
                m.write_png(&masks.join(view_name(i, "png")))?;
            }
        }
        scene::write_poses(&self.poses, &dir.join(POSES_FILE))?;
        scene::write_intrinsics(&self.camera, &dir.join(INTRINSICS_FILE))?;
        let manifest = Manifest {
            format_version: 1,
            n_views: self.n_views(),
            wavelengths: self.wavelengths().to_vec(),
            aabb: self.aabb,
            split: self.split.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(mpath.display().to_string(), e.to_string()))?;
        let poses = scene::read_poses(&dir.join(POSES_FILE))?;
        if poses.len() != manifest.n_views {
            return Err(Error::ShapeMismatch(format!(
                "manifest lists {} views, poses file has {}",
                manifest.n_views,
                poses.len()
            )));
        }
        let camera = scene::read_intrinsics(&dir.join(INTRINSICS_FILE))?;
        let mut cubes = Vec::with_capacity(poses.len());
        let mut masks = Vec::with_capacity(poses.len());
        for i in 0..poses.len() {
            cubes.push(hypercube::read_cube(&dir.join("views").join(view_name(i, "bil")))?);
            let mp = dir.join("masks").join(view_name(i, "png"));
            masks.push(if mp.exists() {
                Some(Mask::read_png(&mp)?)
            } else {
                None
            });
        }
        Dataset::new(camera, poses, cubes, masks, manifest.aabb, manifest.split)
    }
}

pub fn view_name(i: usize, ext: &str) -> String {
    format!("view_{i:03}.{ext}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ninety_ten_split() {
        let s = SplitSpec::evenly_spaced(20, 0.1).unwrap();
        assert_eq!(s.train.len(), 18);
        assert_eq!(s.eval, vec![5, 15]);
        let tiny = SplitSpec::evenly_spaced(3, 0.1).unwrap();
        assert_eq!(tiny.eval.len(), 1);
        assert_eq!(tiny.train.len(), 2);
        assert!(SplitSpec::evenly_spaced(1, 0.1).is_err());
    }
}
