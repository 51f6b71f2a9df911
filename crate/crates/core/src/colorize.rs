//! Appearance BEV from a point cloud and annotated cuboids: points take the
//! colour of the first camera that sees them, cuboids take the per-channel
//! histogram mode of the pixels they cover, then both are painted top-down.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, Camera, CameraRig};
use crate::grid::BevGridSpec;
use crate::image::RgbImage;
use crate::scene::{Rect, Rgb, Vehicle};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColoredPoint {
    pub position: [f64; 3],
    /// Colour and the index of the camera it came from.
    pub color: Option<(Rgb, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub center: [f64; 3],
    pub yaw: f64,
    /// Length (along yaw), width, height.
    pub dims: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Rgb>,
}

impl Cuboid {
    pub fn from_vehicle(v: &Vehicle) -> Self {
        Cuboid {
            center: [v.center[0], v.center[1], v.height / 2.0],
            yaw: v.yaw,
            dims: [v.length, v.width, v.height],
            color: None,
        }
    }

    pub fn footprint(&self) -> Rect {
        Rect {
            center: [self.center[0], self.center[1]],
            yaw: self.yaw,
            length: self.dims[0],
            width: self.dims[1],
        }
    }

    pub fn corners(&self) -> [[f64; 3]; 8] {
        let f = self.footprint().corners();
        let (lo, hi) = (self.center[2] - self.dims[2] / 2.0, self.center[2] + self.dims[2] / 2.0);
        let mut out = [[0.0; 3]; 8];
        for k in 0..4 {
            out[k] = [f[k][0], f[k][1], lo];
            out[k + 4] = [f[k][0], f[k][1], hi];
        }
        out
    }
}

fn check_images(images: &[RgbImage], rig: &CameraRig) -> Result<()> {
    if images.len() != rig.len() {
        return Err(Error::shape("colorize", format!("{} images for {} cameras", images.len(), rig.len())));
    }
    for (img, cam) in images.iter().zip(rig.iter()) {
        if (img.width, img.height) != (cam.intrinsics.width, cam.intrinsics.height) {
            return Err(Error::shape(
                "colorize",
                format!(
                    "image {}×{} for camera `{}` of {}×{}",
                    img.width, img.height, cam.name, cam.intrinsics.width, cam.intrinsics.height
                ),
            ));
        }
    }
    Ok(())
}

/// Pixel under an ego point, if the camera sees it.
fn pixel_of(cam: &Camera, p: &[f64; 3]) -> Option<(usize, usize)> {
    let pc = cam.extrinsics.ego_to_cam(&Vector3::from(*p));
    let uv = project(&pc, &cam.intrinsics)?;
    cam.intrinsics.pixel_at(uv[0], uv[1])
}

/// Colours each point from the first camera (rig order) in front of which it
/// projects inside the image. No occlusion reasoning.
pub fn colorize_points(points: &[[f64; 3]], images: &[RgbImage], rig: &CameraRig) -> Result<Vec<ColoredPoint>> {
    check_images(images, rig)?;
    Ok(points
        .iter()
        .map(|p| ColoredPoint {
            position: *p,
            color: rig
                .iter()
                .enumerate()
                .find_map(|(k, cam)| pixel_of(cam, p).map(|(u, v)| (images[k].get(u, v), k))),
        })
        .collect())
}

/// Representative value of the modal 10-wide bin (250..=255 share the last
/// bin; ties go to the lower bin).
pub fn histogram_mode(values: &[u8]) -> Result<u8> {
    if values.is_empty() {
        return Err(Error::invalid("histogram_mode", "no values"));
    }
    let mut counts = [0usize; 25];
    for &v in values {
        counts[(v / 10).min(24) as usize] += 1;
    }
    let mut best = 0;
    for b in 1..25 {
        if counts[b] > counts[best] {
            best = b;
        }
    }
    Ok((best * 10 + 5).min(255) as u8)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise hull by monotone chain; collinear points dropped.
pub fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_hull(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = hull.len();
    n >= 3 && (0..n).all(|k| cross(hull[k], hull[(k + 1) % n], p) >= 0.0)
}

/// Paint colour of a cuboid from the camera that sees most of its corners.
pub fn cuboid_color(cuboid: &Cuboid, images: &[RgbImage], rig: &CameraRig) -> Result<Rgb> {
    check_images(images, rig)?;
    let corners = cuboid.corners();
    let mut best: Option<(usize, Vec<[f64; 2]>)> = None;
    for (k, cam) in rig.iter().enumerate() {
        let visible: Vec<[f64; 2]> = corners
            .iter()
            .filter_map(|c| {
                let uv = project(&cam.extrinsics.ego_to_cam(&Vector3::from(*c)), &cam.intrinsics)?;
                cam.intrinsics.contains(uv[0], uv[1]).then_some(uv)
            })
            .collect();
        if !visible.is_empty() && best.as_ref().is_none_or(|(_, b)| visible.len() > b.len()) {
            best = Some((k, visible));
        }
    }
    let (k, visible) = best.ok_or(Error::UncolorableCuboid)?;
    let img = &images[k];
    let hull = convex_hull(visible.clone());

    let mut pixels: Vec<Rgb> = Vec::new();
    if hull.len() >= 3 {
        let (x0, x1) = hull.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[0]), h.max(p[0])));
        let (y0, y1) = hull.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p[1]), h.max(p[1])));
        let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(img.height as f64) as usize);
        let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(img.width as f64) as usize);
        for v in ys {
            for u in xs.clone() {
                if inside_hull(&hull, [u as f64 + 0.5, v as f64 + 0.5]) {
                    pixels.push(img.get(u, v));
                }
            }
        }
    }
    if pixels.is_empty() {
        // Degenerate hull: fall back to the pixels under the visible corners.
        for uv in &visible {
            pixels.push(img.get(uv[0].floor() as usize, uv[1].floor() as usize));
        }
    }
    let channel = |c: usize| histogram_mode(&pixels.iter().map(|p| p[c]).collect::<Vec<u8>>());
    Ok([channel(0)?, channel(1)?, channel(2)?])
}

/// Painted appearance BEV (`3 × grid_x × grid_y` in `[0, 1]`) and which
/// cells received paint.
#[derive(Debug, Clone)]
pub struct PaintedBev {
    pub appearance: Tensor<f32>,
    pub valid: Vec<bool>,
}

/// Static layer: per-cell mean of coloured points. Dynamic layer: cuboid
/// footprints (cell centre inside) overwrite it, in list order.
pub fn paint_bev(points: &[ColoredPoint], cuboids: &[Cuboid], spec: &BevGridSpec) -> Result<PaintedBev> {
    let cells = spec.cells();
    let mut sums = vec![[0u64; 3]; cells];
    let mut counts = vec![0u64; cells];
    for p in points {
        if let (Some((rgb, _)), Some(k)) = (p.color, spec.flat_cell_of(p.position[0], p.position[1])) {
            for c in 0..3 {
                sums[k][c] += rgb[c] as u64;
            }
            counts[k] += 1;
        }
    }
    let mut app = vec![0.0f32; 3 * cells];
    let mut valid = vec![false; cells];
    for k in 0..cells {
        if counts[k] > 0 {
            valid[k] = true;
            for c in 0..3 {
                app[c * cells + k] = (sums[k][c] as f64 / counts[k] as f64 / 255.0) as f32;
            }
        }
    }
    for cub in cuboids {
        let color = cub
            .color
            .ok_or_else(|| Error::invalid("paint_bev", "cuboid has no assigned colour"))?;
        let fp = cub.footprint();
        for i in 0..spec.grid_x {
            for j in 0..spec.grid_y {
                let (x, y) = spec.cell_center(i, j);
                if fp.contains(x, y) {
                    let k = i * spec.grid_y + j;
                    valid[k] = true;
                    for c in 0..3 {
                        app[c * cells + k] = color[c] as f32 / 255.0;
                    }
                }
            }
        }
    }
    Ok(PaintedBev {
        appearance: Tensor::from_vec(&[3, spec.grid_x, spec.grid_y], app)?,
        valid,
    })
}

/// One `x y z` triple per line; blank lines and `#` comments are skipped.
pub fn parse_points(text: &str, origin: &Path) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(origin, format!("line {}: {e}", n + 1)))?;
        if vals.len() != 3 {
            return Err(Error::format(origin, format!("line {}: expected 3 numbers, got {}", n + 1, vals.len())));
        }
        out.push([vals[0], vals[1], vals[2]]);
    }
    Ok(out)
}

pub fn format_points(points: &[[f64; 3]]) -> String {
    points.iter().map(|p| format!("{} {} {}\n", p[0], p[1], p[2])).collect()
}

pub fn load_cuboids(path: &Path) -> Result<Vec<Cuboid>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Extrinsics, Intrinsics};
    use crate::scene::{render_bev_ground_truth, render_image, sample_lidar, sample_scene, LidarConfig, Range, Road, Scene, SceneConfig};
    use proptest::prelude::*;

    const PAINT: Rgb = [200, 40, 40];

    fn flat(width: f64) -> Scene {
        Scene {
            seed: 0,
            roads: vec![Road {
                rect: Rect { center: [0.0, 0.0], yaw: 0.0, length: 1e4, width },
                color: [100, 100, 104],
            }],
            lanes: vec![Rect { center: [0.0, 1.0], yaw: 0.0, length: 1e4, width: 0.5 }],
            lane_color: [230, 230, 210],
            vehicles: vec![],
            background: [60, 110, 50],
            sky: [135, 190, 235],
        }
    }

    fn render_all(scene: &Scene, rig: &CameraRig) -> Vec<RgbImage> {
        rig.iter().map(|c| render_image(scene, &c.intrinsics, &c.extrinsics)).collect()
    }

    fn single_camera(extr: Extrinsics) -> CameraRig {
        let intr = Intrinsics::from_fov(70.0, 128, 96).unwrap();
        CameraRig::new(vec![Camera { name: "cam".into(), intrinsics: intr, extrinsics: extr }]).unwrap()
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(histogram_mode(&[12, 13, 101, 250]).unwrap(), 15);
        assert_eq!(histogram_mode(&[0, 0, 0]).unwrap(), 5);
        assert_eq!(histogram_mode(&[71, 35, 78, 31]).unwrap(), 35);
        assert_eq!(histogram_mode(&[255, 250, 251]).unwrap(), 245);
        assert_eq!(histogram_mode(&[249]).unwrap(), 245);
        assert!(histogram_mode(&[]).is_err());
    }

    #[test]
    fn principal_ray_point_takes_centre_pixel() {
        let rig = CameraRig::surround(64, 48);
        let mut images: Vec<RgbImage> = (0..6).map(|_| RgbImage::new(64, 48)).collect();
        images[0].put(32, 24, [9, 8, 7]);
        let cam = &rig.cameras()[0];
        let p = cam.extrinsics.cam_to_ego(&Vector3::new(0.0, 0.0, 10.0));
        let out = colorize_points(&[[p.x, p.y, p.z]], &images, &rig).unwrap();
        assert_eq!(out[0].color, Some(([9, 8, 7], 0)));
    }

    #[test]
    fn point_behind_all_cameras_is_uncolored() {
        let rig = single_camera(Extrinsics::looking(0.0, 10.0, [0.0, 0.0, 1.6]));
        let images = render_all(&flat(8.0), &rig);
        let out = colorize_points(&[[-5.0, 0.0, 0.0]], &images, &rig).unwrap();
        assert_eq!(out[0].color, None);
    }

    #[test]
    fn image_count_must_match_rig() {
        let rig = CameraRig::surround(64, 48);
        assert!(matches!(colorize_points(&[], &[], &rig), Err(Error::Shape { .. })));
    }

    #[test]
    fn planar_ground_points_take_their_ground_colour() {
        let scene = flat(8.0);
        let rig = CameraRig::surround(352, 128);
        let images = render_all(&scene, &rig);
        let cfg = LidarConfig { channels: 24, azimuths: 720, elevation_min_deg: -25.0, elevation_max_deg: -3.0 };
        let pts = sample_lidar(&scene, [0.0, 0.0, 1.8], &cfg);
        let colored = colorize_points(&pts, &images, &rig).unwrap();
        let (mut checked, mut agree, mut total) = (0, 0, 0);
        for p in &colored {
            let Some((rgb, _)) = p.color else { continue };
            let truth = scene.ground_color(p.position[0], p.position[1]);
            total += 1;
            agree += (rgb == truth) as usize;
            // Away from region edges the pixel's ground patch is uniform.
            let y = p.position[1];
            let near_edge = [4.0, -4.0, 0.75, 1.25].iter().any(|e| (y - e).abs() < 0.3);
            if !near_edge {
                checked += 1;
                assert_eq!(rgb, truth, "{:?}", p.position);
            }
        }
        assert!(checked > 1000);
        assert!(agree as f64 >= 0.97 * total as f64);
    }

    #[test]
    fn cuboid_paint_recovered_as_bin_centres() {
        let mut scene = flat(8.0);
        let v = Vehicle { center: [9.0, 0.5], yaw: 0.2, length: 4.5, width: 2.0, height: 1.6, color: PAINT };
        scene.vehicles.push(v);
        let rig = single_camera(Extrinsics::looking(0.0, 5.0, [0.0, 0.0, 1.6]));
        let images = render_all(&scene, &rig);
        assert_eq!(cuboid_color(&Cuboid::from_vehicle(&v), &images, &rig).unwrap(), [205, 45, 45]);
    }

    #[test]
    fn cuboid_behind_every_camera_is_uncolorable() {
        let rig = single_camera(Extrinsics::looking(0.0, 5.0, [0.0, 0.0, 1.6]));
        let images = render_all(&flat(8.0), &rig);
        let c = Cuboid { center: [-10.0, 0.0, 0.8], yaw: 0.0, dims: [4.0, 2.0, 1.6], color: None };
        assert!(matches!(cuboid_color(&c, &images, &rig), Err(Error::UncolorableCuboid)));
    }

    #[test]
    fn half_occluded_cuboid_still_coloured() {
        let mut scene = flat(12.0);
        let target = Vehicle { center: [14.0, 1.0], yaw: 0.0, length: 4.5, width: 2.0, height: 1.6, color: PAINT };
        // A blue van in front covers about half of the target's image footprint.
        let occluder =
            Vehicle { center: [8.0, -0.4], yaw: 0.0, length: 3.0, width: 1.6, height: 2.0, color: [40, 70, 210] };
        scene.vehicles.extend([target, occluder]);
        let rig = single_camera(Extrinsics::looking(0.0, 5.0, [0.0, 0.0, 1.6]));
        let images = render_all(&scene, &rig);
        let shown = images[0].data.chunks(3).filter(|p| *p == PAINT).count();
        let unobstructed = render_all(
            &Scene { vehicles: vec![target], ..scene.clone() },
            &rig,
        )[0]
        .data
        .chunks(3)
        .filter(|p| *p == PAINT)
        .count();
        assert!(shown < unobstructed * 3 / 4 && shown > unobstructed / 4, "{shown} of {unobstructed}");
        assert_eq!(cuboid_color(&Cuboid::from_vehicle(&target), &images, &rig).unwrap(), [205, 45, 45]);
    }

    #[test]
    fn most_visible_camera_is_chosen() {
        let intr = Intrinsics::from_fov(70.0, 128, 96).unwrap();
        let left = Camera { name: "a".into(), intrinsics: intr, extrinsics: Extrinsics::looking(40.0, 5.0, [0.0, 0.0, 1.6]) };
        let front = Camera { name: "b".into(), intrinsics: intr, extrinsics: Extrinsics::looking(0.0, 5.0, [0.0, 0.0, 1.6]) };
        let rig = CameraRig::new(vec![left, front]).unwrap();
        let mut scene = flat(8.0);
        let v = Vehicle { center: [12.0, -1.0], yaw: 0.0, length: 4.0, width: 2.0, height: 1.5, color: PAINT };
        scene.vehicles.push(v);
        let mut images = render_all(&scene, &rig);
        // Spoil the first camera so only the second can give the right answer.
        images[0].data.fill(0);
        assert_eq!(cuboid_color(&Cuboid::from_vehicle(&v), &images, &rig).unwrap(), [205, 45, 45]);
    }

    #[test]
    fn paint_layers() {
        let spec = BevGridSpec::new(4.0, 4.0, 1.0, 1.0).unwrap();
        let pts = vec![
            ColoredPoint { position: [-1.5, -1.5, 0.0], color: Some(([10, 20, 30], 0)) },
            ColoredPoint { position: [1.5, 1.5, 0.0], color: Some(([200, 100, 0], 1)) },
            ColoredPoint { position: [0.5, 0.5, 0.0], color: Some(([1, 2, 3], 0)) },
            ColoredPoint { position: [-0.5, 0.5, 0.0], color: None },
        ];
        let cub = Cuboid { center: [0.5, 0.5, 0.5], yaw: 0.0, dims: [0.8, 0.8, 1.0], color: Some([255, 0, 0]) };
        let out = paint_bev(&pts, &[cub], &spec).unwrap();
        let c = spec.cells();
        let k0 = spec.flat_cell_of(-1.5, -1.5).unwrap();
        assert_eq!([0, 1, 2].map(|ch| out.appearance.data()[ch * c + k0]), [10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
        let k2 = spec.flat_cell_of(0.5, 0.5).unwrap();
        assert_eq!([0, 1, 2].map(|ch| out.appearance.data()[ch * c + k2]), [1.0, 0.0, 0.0]);
        assert!(!out.valid[spec.flat_cell_of(-0.5, 0.5).unwrap()]);
        assert_eq!(out.valid.iter().filter(|&&v| v).count(), 3);
        let none = paint_bev(&pts[3..], &[], &spec).unwrap();
        assert!(none.appearance.data().iter().all(|&v| v == 0.0) && none.valid.iter().all(|&v| !v));
    }

    #[test]
    fn mean_of_several_points() {
        let spec = BevGridSpec::new(2.0, 2.0, 1.0, 1.0).unwrap();
        let pts = [[0, 0, 0], [10, 20, 255]].map(|rgb| ColoredPoint { position: [0.2, 0.2, 0.0], color: Some((rgb, 0)) });
        let out = paint_bev(&pts, &[], &spec).unwrap();
        let k = spec.flat_cell_of(0.2, 0.2).unwrap();
        assert_eq!(out.appearance.data()[2 * 4 + k], (127.5f64 / 255.0) as f32);
    }

    /// Full pipeline against the exact top-down colours.
    fn painted_error(seed: u64) -> f64 {
        let spec = BevGridSpec::new(40.0, 40.0, 0.4, 0.4).unwrap();
        let mut cfg = SceneConfig::for_grid(spec);
        cfg.vehicles = Range::new(3, 5);
        let scene = sample_scene(seed, &cfg);
        let rig = CameraRig::surround(352, 128);
        let images = render_all(&scene, &rig);
        let lidar = LidarConfig { channels: 32, azimuths: 1440, elevation_min_deg: -30.0, elevation_max_deg: -1.0 };
        let pts = sample_lidar(&scene, [0.0, 0.0, 1.8], &lidar);
        let colored = colorize_points(&pts, &images, &rig).unwrap();
        let cuboids: Vec<Cuboid> = scene
            .vehicles
            .iter()
            .map(|v| {
                let mut c = Cuboid::from_vehicle(v);
                c.color = Some(cuboid_color(&c, &images, &rig).unwrap());
                c
            })
            .collect();
        let painted = paint_bev(&colored, &cuboids, &spec).unwrap();
        let (_, truth) = render_bev_ground_truth(&scene, &spec);
        let cells = spec.cells();
        let (mut err, mut n) = (0.0f64, 0usize);
        for k in (0..cells).filter(|&k| painted.valid[k]) {
            for c in 0..3 {
                err += (painted.appearance.data()[c * cells + k] - truth.data()[c * cells + k]).abs() as f64;
            }
            n += 3;
        }
        assert!(n > 0);
        err / n as f64
    }

    #[test]
    fn painted_bev_matches_ground_truth() {
        for seed in [1, 2] {
            let e = painted_error(seed);
            assert!(e < 10.0 / 255.0, "seed {seed}: {e}");
        }
    }

    proptest! {
        #[test]
        fn mode_is_a_bin_centre_and_repetition_invariant(vals in proptest::collection::vec(any::<u8>(), 1..60), k in 1usize..5) {
            let m = histogram_mode(&vals).unwrap();
            prop_assert!(m % 10 == 5 && m <= 245);
            let rep: Vec<u8> = vals.iter().cycle().take(vals.len() * k).copied().collect();
            prop_assert_eq!(histogram_mode(&rep).unwrap(), m);
        }

        #[test]
        fn colour_only_from_cameras_in_front(x in -30.0f64..30.0, y in -30.0f64..30.0, z in 0.0f64..3.0) {
            let rig = CameraRig::surround(64, 32);
            let images: Vec<RgbImage> = (0..6).map(|_| RgbImage::new(64, 32)).collect();
            let out = colorize_points(&[[x, y, z]], &images, &rig).unwrap();
            if let Some((_, k)) = out[0].color {
                let cam = &rig.cameras()[k];
                prop_assert!(cam.extrinsics.ego_to_cam(&Vector3::new(x, y, z)).z > 0.0);
                for earlier in &rig.cameras()[..k] {
                    prop_assert!(pixel_of(earlier, &[x, y, z]).is_none());
                }
            }
        }

        #[test]
        fn valid_mask_covers_painted_cells(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = BevGridSpec::new(8.0, 8.0, 0.5, 0.5).unwrap();
            let pts: Vec<ColoredPoint> = (0..40)
                .map(|_| ColoredPoint {
                    position: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 0.0],
                    color: rng.gen_bool(0.7).then(|| ([rng.gen(), rng.gen(), rng.gen()], 0)),
                })
                .collect();
            let cub = Cuboid { center: [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.7], yaw: rng.gen_range(0.0..3.0), dims: [3.0, 1.5, 1.4], color: Some([1, 2, 3]) };
            let out = paint_bev(&pts, &[cub], &spec).unwrap();
            for p in pts.iter().filter(|p| p.color.is_some()) {
                if let Some(k) = spec.flat_cell_of(p.position[0], p.position[1]) {
                    prop_assert!(out.valid[k]);
                }
            }
            for i in 0..spec.grid_x {
                for j in 0..spec.grid_y {
                    let (x, y) = spec.cell_center(i, j);
                    if cub.footprint().contains(x, y) {
                        prop_assert!(out.valid[i * spec.grid_y + j]);
                    }
                }
            }
        }
    }
}
