//! On-disk scene datasets: one directory per scene plus a manifest.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ipm_homography, ipm_warp, CameraRig, MaskedBev};
use crate::grid::BevGridSpec;
use crate::image::{bev_to_image, image_to_bev, RgbImage};
use crate::scene::{load_occupancy, render_bev_ground_truth, render_image, save_occupancy, Scene};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub train_fraction: f64,
    pub grid: BevGridSpec,
    pub scenes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.scenes.iter().filter(move |e| e.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Per-scene seeds drawn from one base seed.
pub fn scene_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Seeded assignment with `round(count * fraction)` training scenes.
pub fn assign_splits(count: usize, fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let train = (count as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5_1175));
    let mut out = vec![Split::Test; count];
    for &i in &order[..train] {
        out[i] = Split::Train;
    }
    Ok(out)
}

pub fn scene_dir_name(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Renders `scene` through `rig` and writes the scene directory.
pub fn write_scene(dir: &Path, scene: &Scene, rig: &CameraRig, grid: &BevGridSpec) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, cam) in rig.iter().enumerate() {
        render_image(scene, &cam.intrinsics, &cam.extrinsics).save_ppm(&dir.join(format!("cam_{k}.ppm")))?;
    }
    rig.save(&dir.join("rig.json"))?;
    let (occ, app) = render_bev_ground_truth(scene, grid);
    bev_to_image(&app, grid)?.save_ppm(&dir.join("bev_appearance.ppm"))?;
    save_occupancy(&occ, &dir.join("bev_occupancy.occg"))?;
    scene.save(&dir.join("scene.json"))
}

/// A scene directory read back into memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub dir: PathBuf,
    pub images: Vec<RgbImage>,
    pub rig: CameraRig,
    /// `|S| × grid_x × grid_y`, binary.
    pub occupancy: Tensor<f32>,
    /// `3 × grid_x × grid_y` in `[0, 1]`.
    pub appearance: Tensor<f32>,
}

impl Sample {
    pub fn load(dir: &Path, grid: &BevGridSpec) -> Result<Self> {
        let rig = CameraRig::load(&dir.join("rig.json"))?;
        let images = (0..rig.len())
            .map(|k| RgbImage::load_ppm(&dir.join(format!("cam_{k}.ppm"))))
            .collect::<Result<Vec<_>>>()?;
        for (img, cam) in images.iter().zip(rig.iter()) {
            if (img.width, img.height) != (cam.intrinsics.width, cam.intrinsics.height) {
                return Err(Error::shape(
                    "load_scene",
                    format!("{}: image {}×{} does not match camera `{}`", dir.display(), img.width, img.height, cam.name),
                ));
            }
        }
        let occupancy = load_occupancy(&dir.join("bev_occupancy.occg"))?;
        if occupancy.shape()[1..] != [grid.grid_x, grid.grid_y] {
            return Err(Error::shape(
                "load_scene",
                format!("{}: occupancy {:?} does not match grid {}×{}", dir.display(), occupancy.shape(), grid.grid_x, grid.grid_y),
            ));
        }
        let appearance = image_to_bev(&RgbImage::load_ppm(&dir.join("bev_appearance.ppm"))?, grid)?;
        Ok(Sample {
            dir: dir.to_path_buf(),
            images,
            rig,
            occupancy,
            appearance,
        })
    }
}

/// A training batch: `B × N × 3 × H × W` images and stacked targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub occupancy: Tensor<f32>,
    pub appearance: Tensor<f32>,
}

/// Stacks samples that share one rig.
pub fn make_batch(samples: &[&Sample]) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::invalid("make_batch", "empty batch"))?;
    let mut images = Vec::new();
    let mut occ = Vec::new();
    let mut app = Vec::new();
    for s in samples {
        if s.rig != first.rig {
            return Err(Error::shape("make_batch", format!("{} uses a different rig", s.dir.display())));
        }
        if s.occupancy.shape() != first.occupancy.shape() {
            return Err(Error::shape("make_batch", format!("{} has a different grid", s.dir.display())));
        }
        for img in &s.images {
            images.extend_from_slice(img.to_tensor().data());
        }
        occ.extend_from_slice(s.occupancy.data());
        app.extend_from_slice(s.appearance.data());
    }
    let b = samples.len();
    let (w, h) = (first.images[0].width, first.images[0].height);
    let mut occ_shape = vec![b];
    occ_shape.extend_from_slice(first.occupancy.shape());
    let mut app_shape = vec![b];
    app_shape.extend_from_slice(first.appearance.shape());
    Ok(Batch {
        images: Tensor::from_vec(&[b, first.images.len(), 3, h, w], images)?,
        occupancy: Tensor::from_vec(&occ_shape, occ)?,
        appearance: Tensor::from_vec(&app_shape, app)?,
    })
}

/// Warps every camera onto the ground plane and keeps, per cell, the camera
/// whose ground position is nearest. Ties go to the camera that sorts first
/// by name.
pub fn ipm_composite(images: &[Tensor<f32>], rig: &CameraRig, spec: &BevGridSpec) -> Result<MaskedBev> {
    if images.len() != rig.len() {
        return Err(Error::shape(
            "ipm",
            format!("{} images for a {}-camera rig", images.len(), rig.len()),
        ));
    }
    let warps = images
        .iter()
        .zip(rig.iter())
        .map(|(img, cam)| ipm_warp(img, &ipm_homography(&cam.intrinsics, &cam.extrinsics, 0.0)?, spec))
        .collect::<Result<Vec<_>>>()?;
    let keys = rig.canonical_keys();
    let cells = spec.cells();
    let mut out = vec![0.0f32; 3 * cells];
    let mut valid = vec![false; cells];
    for (idx, (x, y)) in spec.centers().enumerate() {
        let mut best: Option<(f64, usize, usize)> = None;
        for (k, (w, cam)) in warps.iter().zip(rig.iter()).enumerate() {
            if !w.valid[idx] {
                continue;
            }
            let t = cam.extrinsics.translation();
            let range = (x - t.x).hypot(y - t.y);
            if best.is_none_or(|(r, key, _)| range < r || (range == r && keys[k] < key)) {
                best = Some((range, keys[k], k));
            }
        }
        if let Some((_, _, k)) = best {
            for c in 0..3 {
                out[c * cells + idx] = warps[k].appearance.data()[c * cells + idx];
            }
            valid[idx] = true;
        }
    }
    Ok(MaskedBev {
        appearance: Tensor::from_vec(&[3, spec.grid_x, spec.grid_y], out)?,
        valid,
    })
}
