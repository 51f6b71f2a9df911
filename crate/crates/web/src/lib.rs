//! Browser demo: a procedural street scene seen by six cameras, and three
//! ways of getting it onto a top-down grid.

use bevpaint::colorize::{colorize_points, paint_bev};
use bevpaint::dataset::ipm_composite;
use bevpaint::geometry::{build_frustum, CameraRig, DepthBins};
use bevpaint::grid::BevGridSpec;
use bevpaint::image::{bev_pixel, bev_to_image, RgbImage};
use bevpaint::scene::{render_bev_ground_truth, render_image, sample_lidar, sample_scene, LidarConfig, Range, Scene, SceneConfig};
use wasm_bindgen::prelude::*;

const CAM_W: usize = 176;
const CAM_H: usize = 64;

fn frustum_bins() -> Result<DepthBins, JsError> {
    DepthBins::new(2.0, 22.0, 1.0).map_err(|e| JsError::new(&e.to_string()))
}

/// Per-camera tint for the frustum view, in rig order.
const TINTS: [[u8; 3]; 6] = [
    [255, 90, 90],
    [255, 220, 80],
    [120, 230, 120],
    [90, 200, 255],
    [180, 120, 255],
    [255, 140, 220],
];

fn rgba(img: &RgbImage) -> Vec<u8> {
    img.data.chunks(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
}

fn masked_rgba(img: &RgbImage, valid: &[bool], spec: &BevGridSpec) -> Vec<u8> {
    let mut out = rgba(img);
    for i in 0..spec.grid_x {
        for j in 0..spec.grid_y {
            if !valid[i * spec.grid_y + j] {
                let (x, y) = bev_pixel(spec, i, j);
                let at = 4 * (y * img.width + x);
                out[at..at + 3].copy_from_slice(&[16, 16, 20]);
            }
        }
    }
    out
}

#[wasm_bindgen]
pub struct Demo {
    scene: Scene,
    rig: CameraRig,
    grid: BevGridSpec,
    images: Vec<RgbImage>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, vehicles: u32) -> Result<Demo, JsError> {
        let grid = BevGridSpec::new(40.0, 40.0, 0.25, 0.25).map_err(|e| JsError::new(&e.to_string()))?;
        let mut cfg = SceneConfig::for_grid(grid);
        cfg.vehicles = Range::new(vehicles as usize, vehicles as usize);
        let scene = sample_scene(seed as u64, &cfg);
        let rig = CameraRig::surround(CAM_W, CAM_H);
        let images = rig.iter().map(|c| render_image(&scene, &c.intrinsics, &c.extrinsics)).collect();
        Ok(Demo { scene, rig, grid, images })
    }

    pub fn cameras(&self) -> usize {
        self.rig.len()
    }

    pub fn camera_name(&self, k: usize) -> String {
        self.rig.cameras()[k].name.clone()
    }

    pub fn camera_width(&self) -> usize {
        CAM_W
    }

    pub fn camera_height(&self) -> usize {
        CAM_H
    }

    pub fn camera_rgba(&self, k: usize) -> Vec<u8> {
        rgba(&self.images[k])
    }

    /// BEV raster side length in cells (the grid is square).
    pub fn grid_size(&self) -> usize {
        self.grid.grid_x
    }

    pub fn vehicles(&self) -> usize {
        self.scene.vehicles.len()
    }

    pub fn ground_truth_rgba(&self) -> Result<Vec<u8>, JsError> {
        let (_, app) = render_bev_ground_truth(&self.scene, &self.grid);
        let img = bev_to_image(&app, &self.grid).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(rgba(&img))
    }

    /// Ground-plane warp of all cameras, nearest camera per cell.
    pub fn ipm_rgba(&self) -> Result<Vec<u8>, JsError> {
        let tensors: Vec<_> = self.images.iter().map(|i| i.to_tensor()).collect();
        let bev = ipm_composite(&tensors, &self.rig, &self.grid).map_err(|e| JsError::new(&e.to_string()))?;
        let img = bev_to_image(&bev.appearance, &self.grid).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(masked_rgba(&img, &bev.valid, &self.grid))
    }

    /// LiDAR returns coloured from the camera images and pooled per cell.
    pub fn painted_rgba(&self, channels: usize) -> Result<Vec<u8>, JsError> {
        let lidar = LidarConfig {
            channels: channels.clamp(1, 128),
            azimuths: 1440,
            elevation_min_deg: -30.0,
            elevation_max_deg: -1.0,
        };
        let pts = sample_lidar(&self.scene, [0.0, 0.0, 1.8], &lidar);
        let colored = colorize_points(&pts, &self.images, &self.rig).map_err(|e| JsError::new(&e.to_string()))?;
        let painted = paint_bev(&colored, &[], &self.grid).map_err(|e| JsError::new(&e.to_string()))?;
        let img = bev_to_image(&painted.appearance, &self.grid).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(masked_rgba(&img, &painted.valid, &self.grid))
    }

    /// Where one depth bin of every camera frustum lands on the grid, over a
    /// dimmed ground truth.
    pub fn frustum_rgba(&self, depth_bin: usize) -> Result<Vec<u8>, JsError> {
        let bins = frustum_bins()?;
        let d = depth_bin.min(bins.count() - 1);
        let (_, app) = render_bev_ground_truth(&self.scene, &self.grid);
        let mut img = bev_to_image(&app, &self.grid).map_err(|e| JsError::new(&e.to_string()))?;
        for v in img.data.iter_mut() {
            *v /= 3;
        }
        for (k, cam) in self.rig.iter().enumerate() {
            let f = build_frustum(&cam.intrinsics, &cam.extrinsics, 8, &bins).map_err(|e| JsError::new(&e.to_string()))?;
            for h in 0..f.height {
                for w in 0..f.width {
                    let p = f.at(d, h, w);
                    if let Some((i, j)) = self.grid.cell_of(p[0], p[1]) {
                        let (x, y) = bev_pixel(&self.grid, i, j);
                        img.put(x, y, TINTS[k % TINTS.len()]);
                    }
                }
            }
        }
        Ok(rgba(&img))
    }

    pub fn depth_bins(&self) -> usize {
        frustum_bins().map(|b| b.count()).unwrap_or(0)
    }
}
