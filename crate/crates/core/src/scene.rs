//! Procedural driving worlds: flat roads with lane stripes and box-shaped
//! vehicles, rendered by raycasting, with exact top-down ground truth.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixel_ray, Extrinsics, Intrinsics};
use crate::grid::BevGridSpec;
use crate::image::RgbImage;
use crate::par;
use crate::tensor::Tensor;

pub type Rgb = [u8; 3];

/// Occupancy plane order.
pub const CLASSES: [&str; 3] = ["road", "vehicle", "lane"];
pub const ROAD: usize = 0;
pub const VEHICLE: usize = 1;
pub const LANE: usize = 2;

/// Rectangle on the ground, `length` along its heading `yaw` (radians).
/// Membership is half-open in the rectangle's own frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub center: [f64; 2],
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
}

impl Rect {
    pub fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.local(x, y);
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        (-hl..hl).contains(&lx) && (-hw..hw).contains(&ly)
    }

    /// Corners counter-clockwise from rear-right.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)]
            .map(|(a, b)| [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Road {
    pub rect: Rect,
    pub color: Rgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub center: [f64; 2],
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub color: Rgb,
}

impl Vehicle {
    pub fn footprint(&self) -> Rect {
        Rect {
            center: self.center,
            yaw: self.yaw,
            length: self.length,
            width: self.width,
        }
    }

    /// Entry distance of the ray `o + t d` into the box, if it is hit at
    /// `t > 1e-9`.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let (s, c) = self.yaw.sin_cos();
        let (ox, oy) = (o.x - self.center[0], o.y - self.center[1]);
        let lo = [c * ox + s * oy, -s * ox + c * oy, o.z - self.height / 2.0];
        let ld = [c * d.x + s * d.y, -s * d.x + c * d.y, d.z];
        let half = [self.length / 2.0, self.width / 2.0, self.height / 2.0];
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for k in 0..3 {
            if ld[k].abs() < 1e-15 {
                if lo[k].abs() > half[k] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((-half[k] - lo[k]) / ld[k], (half[k] - lo[k]) / ld[k]);
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        if t0 > t1 || t1 <= 1e-9 {
            return None;
        }
        Some(if t0 > 1e-9 { t0 } else { t1 })
    }

    /// The eight box corners in ego coordinates, bottom face first.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let f = self.footprint().corners();
        let mut out = [[0.0; 3]; 8];
        for k in 0..4 {
            out[k] = [f[k][0], f[k][1], 0.0];
            out[k + 4] = [f[k][0], f[k][1], self.height];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub roads: Vec<Road>,
    pub lanes: Vec<Rect>,
    pub lane_color: Rgb,
    pub vehicles: Vec<Vehicle>,
    pub background: Rgb,
    pub sky: Rgb,
}

/// Whichever of a vehicle or the ground a ray meets first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Hit {
    Vehicle { index: usize, t: f64 },
    Ground { t: f64 },
}

impl Hit {
    pub fn t(&self) -> f64 {
        match *self {
            Hit::Vehicle { t, .. } | Hit::Ground { t } => t,
        }
    }
}

impl Scene {
    /// Colour of the ground at `(x, y)`: lane over road over background.
    pub fn ground_color(&self, x: f64, y: f64) -> Rgb {
        if self.lanes.iter().any(|l| l.contains(x, y)) {
            self.lane_color
        } else if let Some(r) = self.roads.iter().find(|r| r.rect.contains(x, y)) {
            r.color
        } else {
            self.background
        }
    }

    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (index, v) in self.vehicles.iter().enumerate() {
            if let Some(t) = v.intersect(o, d) {
                if best.is_none_or(|b| t < b.t()) {
                    best = Some(Hit::Vehicle { index, t });
                }
            }
        }
        if d.z < -1e-12 && o.z > 0.0 {
            let t = -o.z / d.z;
            if best.is_none_or(|b| t < b.t()) {
                best = Some(Hit::Ground { t });
            }
        }
        best
    }

    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Rgb {
        match self.cast(o, d) {
            Some(Hit::Vehicle { index, .. }) => self.vehicles[index].color,
            Some(Hit::Ground { t }) => {
                let p = o + d * t;
                self.ground_color(p.x, p.y)
            }
            None => self.sky,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
    }
}

/// Inclusive sampling range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T: Copy + PartialOrd + rand::distributions::uniform::SampleUniform> Range<T> {
    pub fn new(min: T, max: T) -> Self {
        Range { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> T {
        if self.min >= self.max {
            self.min
        } else {
            rng.gen_range(self.min..=self.max)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarConfig {
    pub channels: usize,
    pub azimuths: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        LidarConfig {
            channels: 32,
            azimuths: 1024,
            elevation_min_deg: -30.0,
            elevation_max_deg: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid: BevGridSpec,
    /// Roads beyond the one the ego vehicle drives on.
    pub extra_roads: Range<usize>,
    pub road_width: Range<f64>,
    pub lanes_per_road: Range<usize>,
    pub lane_width: Range<f64>,
    pub vehicles: Range<usize>,
    pub vehicle_length: Range<f64>,
    pub vehicle_width: Range<f64>,
    pub vehicle_height: Range<f64>,
    /// Radius around the ego origin kept free of vehicles.
    pub ego_clearance: f64,
    pub vehicle_palette: Vec<Rgb>,
    pub lidar: LidarConfig,
}

/// Saturated paints for vehicles.
pub const VEHICLE_PALETTE: [Rgb; 8] = [
    [200, 40, 40],
    [40, 70, 210],
    [235, 200, 30],
    [30, 170, 60],
    [240, 120, 20],
    [160, 40, 180],
    [20, 180, 200],
    [230, 60, 150],
];

impl SceneConfig {
    pub fn for_grid(grid: BevGridSpec) -> Self {
        SceneConfig {
            grid,
            extra_roads: Range::new(0, 2),
            road_width: Range::new(7.0, 12.0),
            lanes_per_road: Range::new(1, 3),
            lane_width: Range::new(0.3, 0.5),
            vehicles: Range::new(1, 8),
            vehicle_length: Range::new(3.8, 5.0),
            vehicle_width: Range::new(1.7, 2.2),
            vehicle_height: Range::new(1.4, 2.0),
            ego_clearance: 4.0,
            vehicle_palette: VEHICLE_PALETTE.to_vec(),
            lidar: LidarConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.extra_roads.min <= self.extra_roads.max
            && self.lanes_per_road.min <= self.lanes_per_road.max
            && self.vehicles.min <= self.vehicles.max
            && [self.road_width, self.lane_width, self.vehicle_length, self.vehicle_width, self.vehicle_height]
                .iter()
                .all(|r| r.min > 0.0 && r.min <= r.max)
            && self.lane_width.max < self.road_width.min
            && !self.vehicle_palette.is_empty()
            && self.lidar.channels > 0
            && self.lidar.azimuths > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("scene ranges must be non-empty and positive".into()))
        }
    }
}

fn gray(rng: &mut impl Rng, lo: u8, hi: u8) -> Rgb {
    let g = rng.gen_range(lo..=hi);
    [g, g, g.saturating_add(4)]
}

fn road(rng: &mut impl Rng, cfg: &SceneConfig, center: [f64; 2], yaw: f64) -> Road {
    let span = 2.5 * cfg.grid.extent_x.max(cfg.grid.extent_y);
    Road {
        rect: Rect {
            center,
            yaw,
            length: span,
            width: cfg.road_width.sample(rng),
        },
        color: gray(rng, 80, 120),
    }
}

fn footprint_in_grid(r: &Rect, grid: &BevGridSpec) -> bool {
    r.corners()
        .iter()
        .all(|c| c[0].abs() < grid.extent_x / 2.0 && c[1].abs() < grid.extent_y / 2.0)
}

fn separated(a: &Rect, b: &Rect) -> bool {
    // Separating-axis test on the four edge normals.
    let (ca, cb) = (a.corners(), b.corners());
    for r in [a, b] {
        let (s, c) = r.yaw.sin_cos();
        for axis in [[c, s], [-s, c]] {
            let proj = |p: &[f64; 2]| p[0] * axis[0] + p[1] * axis[1];
            let (amin, amax) = ca.iter().map(proj).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            let (bmin, bmax) = cb.iter().map(proj).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if amax + 0.5 < bmin || bmax + 0.5 < amin {
                return true;
            }
        }
    }
    false
}

/// Deterministic world for `seed`. The ego vehicle always sits on a road;
/// vehicles stand on roads, clear of the ego vehicle and of each other, with
/// footprints inside the grid.
pub fn sample_scene(seed: u64, cfg: &SceneConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = &cfg.grid;

    let main_yaw = rng.gen_range(-0.2..0.2);
    let mut roads = vec![road(&mut rng, cfg, [0.0, 0.0], main_yaw)];
    let main_offset = rng.gen_range(-0.25..0.25) * roads[0].rect.width;
    roads[0].rect.center = [-main_offset * main_yaw.sin(), main_offset * main_yaw.cos()];
    for _ in 0..cfg.extra_roads.sample(&mut rng) {
        let center = [rng.gen_range(-0.4..0.4) * g.extent_x, rng.gen_range(-0.4..0.4) * g.extent_y];
        let yaw = main_yaw + std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.5..0.5);
        roads.push(road(&mut rng, cfg, center, yaw));
    }

    let mut lanes = Vec::new();
    for r in &roads {
        let n = cfg.lanes_per_road.sample(&mut rng);
        for k in 0..n {
            let w = cfg.lane_width.sample(&mut rng);
            let room = r.rect.width / 2.0 - w;
            // Evenly spread across the road, interior only.
            let offset = -room + 2.0 * room * (k as f64 + 1.0) / (n as f64 + 1.0);
            let (s, c) = r.rect.yaw.sin_cos();
            lanes.push(Rect {
                center: [r.rect.center[0] - s * offset, r.rect.center[1] + c * offset],
                yaw: r.rect.yaw,
                length: r.rect.length,
                width: w,
            });
        }
    }

    let want = cfg.vehicles.sample(&mut rng);
    let mut vehicles: Vec<Vehicle> = Vec::new();
    let ego = Rect {
        center: [0.0, 0.0],
        yaw: 0.0,
        length: 2.0 * cfg.ego_clearance,
        width: cfg.ego_clearance,
    };
    let mut attempts = 0;
    while vehicles.len() < want && attempts < 400 {
        attempts += 1;
        let r = &roads[rng.gen_range(0..roads.len())].rect;
        let along = rng.gen_range(-0.5..0.5) * g.extent_x.max(g.extent_y);
        let width = cfg.vehicle_width.sample(&mut rng);
        let across = rng.gen_range(-0.5..0.5) * (r.width - width - 0.4).max(0.0);
        let (s, c) = r.yaw.sin_cos();
        let flip = if rng.gen_bool(0.5) { std::f64::consts::PI } else { 0.0 };
        let v = Vehicle {
            center: [r.center[0] + c * along - s * across, r.center[1] + s * along + c * across],
            yaw: r.yaw + flip + rng.gen_range(-0.1..0.1),
            length: cfg.vehicle_length.sample(&mut rng),
            width,
            height: cfg.vehicle_height.sample(&mut rng),
            color: cfg.vehicle_palette[rng.gen_range(0..cfg.vehicle_palette.len())],
        };
        let fp = v.footprint();
        if footprint_in_grid(&fp, g)
            && separated(&fp, &ego)
            && vehicles.iter().all(|o| separated(&fp, &o.footprint()))
        {
            vehicles.push(v);
        }
    }

    Scene {
        seed,
        roads,
        lanes,
        lane_color: [rng.gen_range(215..=240), rng.gen_range(215..=240), rng.gen_range(200..=225)],
        vehicles,
        background: [rng.gen_range(50..=80), rng.gen_range(95..=125), rng.gen_range(40..=60)],
        sky: [135, 190, 235],
    }
}

/// Casts one ray through every pixel centre.
pub fn render_image(scene: &Scene, intr: &Intrinsics, extr: &Extrinsics) -> RgbImage {
    let mut img = RgbImage::new(intr.width, intr.height);
    let o = *extr.translation();
    par::for_each_chunk(&mut img.data, intr.width * 3, |v, row| {
        for u in 0..intr.width {
            let d = extr.dir_to_ego(&pixel_ray([u as f64 + 0.5, v as f64 + 0.5], intr));
            row[u * 3..u * 3 + 3].copy_from_slice(&scene.trace(&o, &d));
        }
    });
    img
}

/// `3 × H × W` render in `[0, 1]`.
pub fn render_camera(scene: &Scene, intr: &Intrinsics, extr: &Extrinsics) -> Tensor<f32> {
    render_image(scene, intr, extr).to_tensor()
}

/// Occupancy planes in [`CLASSES`] order plus the top-down colour, both
/// evaluated exactly at cell centres.
pub fn render_bev_ground_truth(scene: &Scene, spec: &BevGridSpec) -> (Tensor<f32>, Tensor<f32>) {
    let cells = spec.cells();
    let mut occ = vec![0.0f32; CLASSES.len() * cells];
    let mut app = vec![0.0f32; 3 * cells];
    for i in 0..spec.grid_x {
        for j in 0..spec.grid_y {
            let k = i * spec.grid_y + j;
            let (x, y) = spec.cell_center(i, j);
            let road = scene.roads.iter().any(|r| r.rect.contains(x, y));
            let lane = scene.lanes.iter().any(|l| l.contains(x, y));
            let vehicle = scene.vehicles.iter().find(|v| v.footprint().contains(x, y));
            occ[ROAD * cells + k] = road as u8 as f32;
            occ[LANE * cells + k] = lane as u8 as f32;
            occ[VEHICLE * cells + k] = vehicle.is_some() as u8 as f32;
            let color = vehicle.map_or_else(|| scene.ground_color(x, y), |v| v.color);
            for c in 0..3 {
                app[c * cells + k] = color[c] as f32 / 255.0;
            }
        }
    }
    (
        Tensor::from_vec(&[CLASSES.len(), spec.grid_x, spec.grid_y], occ).expect("grid shape"),
        Tensor::from_vec(&[3, spec.grid_x, spec.grid_y], app).expect("grid shape"),
    )
}

/// Unit direction for a LiDAR beam; azimuth from +x towards +y.
pub fn lidar_direction(azimuth: f64, elevation: f64) -> Vector3<f64> {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    Vector3::new(ce * ca, ce * sa, se)
}

/// First returns of a spinning sensor: `channels` elevations spread evenly
/// over the configured range (inclusive) times `azimuths` headings.
pub fn sample_lidar(scene: &Scene, origin: [f64; 3], cfg: &LidarConfig) -> Vec<[f64; 3]> {
    let o = Vector3::from(origin);
    let mut out = Vec::new();
    for ch in 0..cfg.channels {
        let e = if cfg.channels == 1 {
            cfg.elevation_min_deg
        } else {
            cfg.elevation_min_deg + (cfg.elevation_max_deg - cfg.elevation_min_deg) * ch as f64 / (cfg.channels - 1) as f64
        };
        for a in 0..cfg.azimuths {
            let az = std::f64::consts::TAU * a as f64 / cfg.azimuths as f64;
            let d = lidar_direction(az, e.to_radians());
            if let Some(hit) = scene.cast(&o, &d) {
                let p = o + d * hit.t();
                // Ground hits land exactly on the plane.
                let z = if matches!(hit, Hit::Ground { .. }) { 0.0 } else { p.z };
                out.push([p.x, p.y, z]);
            }
        }
    }
    out
}

/// Occupancy planes as 0/1 bytes behind an `OCCG` header.
pub fn encode_occupancy(occ: &Tensor<f32>) -> Result<Vec<u8>> {
    let [s, x, y] = match occ.shape() {
        &[s, x, y] => [s, x, y],
        other => return Err(Error::shape("encode_occupancy", format!("expected S×X×Y, got {other:?}"))),
    };
    let mut out = b"OCCG".to_vec();
    for v in [s, x, y] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(occ.data().iter().map(|&v| (v > 0.5) as u8));
    Ok(out)
}

pub fn decode_occupancy(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 16 || &bytes[..4] != b"OCCG" {
        return Err(Error::format(origin, "missing OCCG header"));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (s, x, y) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if s == 0 || x == 0 || y == 0 || body.len() != s * x * y {
        return Err(Error::format(origin, format!("{s}×{x}×{y} planes but {} data bytes", body.len())));
    }
    if body.iter().any(|&b| b > 1) {
        return Err(Error::format(origin, "occupancy bytes must be 0 or 1"));
    }
    Tensor::from_vec(&[s, x, y], body.iter().map(|&b| b as f32).collect())
}

pub fn save_occupancy(occ: &Tensor<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_occupancy(occ)?).map_err(|e| Error::io(path, e))
}

pub fn load_occupancy(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_occupancy(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraRig;
    use proptest::prelude::*;

    const ROAD_GRAY: Rgb = [100, 100, 104];

    /// Everything within the grid is road; no lanes, no vehicles.
    pub(crate) fn all_road() -> Scene {
        Scene {
            seed: 0,
            roads: vec![Road {
                rect: Rect { center: [0.0, 0.0], yaw: 0.0, length: 1e4, width: 1e4 },
                color: ROAD_GRAY,
            }],
            lanes: vec![],
            lane_color: [230, 230, 210],
            vehicles: vec![],
            background: [60, 110, 50],
            sky: [135, 190, 235],
        }
    }

    fn car(center: [f64; 2], yaw: f64) -> Vehicle {
        Vehicle { center, yaw, length: 4.0, width: 2.0, height: 1.5, color: [200, 40, 40] }
    }

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::for_grid(BevGridSpec::surround());
        assert_eq!(sample_scene(9, &cfg), sample_scene(9, &cfg));
        assert_ne!(sample_scene(9, &cfg), sample_scene(10, &cfg));
    }

    #[test]
    fn sixty_four_seeds_all_have_a_vehicle_in_the_grid() {
        for grid in [BevGridSpec::surround(), BevGridSpec::new(16.0, 16.0, 0.25, 0.25).unwrap()] {
            let mut cfg = SceneConfig::for_grid(grid);
            if grid.extent_x < 20.0 {
                cfg.ego_clearance = 2.0;
                cfg.vehicles = Range::new(1, 3);
            }
            for seed in 0..64 {
                let s = sample_scene(seed, &cfg);
                assert!(!s.roads.is_empty());
                assert!(!s.vehicles.is_empty(), "seed {seed}");
                let (occ, _) = render_bev_ground_truth(&s, &grid);
                for v in &s.vehicles {
                    assert!(footprint_in_grid(&v.footprint(), &grid));
                }
                let plane = &occ.data()[grid.cells()..2 * grid.cells()];
                assert!(plane.contains(&1.0));
            }
        }
    }

    #[test]
    fn zero_vehicle_config_gives_empty_vehicle_plane() {
        let grid = BevGridSpec::new(20.0, 20.0, 0.5, 0.5).unwrap();
        let mut cfg = SceneConfig::for_grid(grid);
        cfg.vehicles = Range::new(0, 0);
        let s = sample_scene(3, &cfg);
        assert!(s.vehicles.is_empty());
        let (occ, _) = render_bev_ground_truth(&s, &grid);
        assert!(occ.data()[grid.cells()..2 * grid.cells()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generated_lanes_lie_on_roads() {
        let grid = BevGridSpec::new(40.0, 40.0, 0.5, 0.5).unwrap();
        let cfg = SceneConfig::for_grid(grid);
        for seed in 0..16 {
            let s = sample_scene(seed, &cfg);
            let (occ, _) = render_bev_ground_truth(&s, &grid);
            let c = grid.cells();
            for k in 0..c {
                if occ.data()[LANE * c + k] == 1.0 {
                    assert_eq!(occ.data()[ROAD * c + k], 1.0);
                }
            }
            for l in &s.lanes {
                let on_road = s.roads.iter().any(|r| {
                    l.corners().iter().all(|p| {
                        let (lx, ly) = r.rect.local(p[0], p[1]);
                        lx.abs() <= r.rect.length / 2.0 + 1e-9 && ly.abs() <= r.rect.width / 2.0 + 1e-9
                    })
                });
                assert!(on_road);
            }
        }
    }

    #[test]
    fn top_down_camera_over_road_sees_only_road() {
        let intr = Intrinsics::from_fov(60.0, 32, 32).unwrap();
        let extr = Extrinsics::looking(0.0, 90.0, [0.0, 0.0, 100.0]);
        let img = render_image(&all_road(), &intr, &extr);
        assert!(img.data.chunks(3).all(|p| p == ROAD_GRAY));
    }

    #[test]
    fn level_camera_principal_ray_sees_sky() {
        let intr = Intrinsics::from_fov(70.0, 64, 64).unwrap();
        let extr = Extrinsics::looking(0.0, 0.0, [0.0, 0.0, 1.6]);
        let o = *extr.translation();
        let d = extr.dir_to_ego(&pixel_ray([intr.cx, intr.cy], &intr));
        assert_eq!(all_road().trace(&o, &d), all_road().sky);
        // The pixel row just below the principal point hits the road.
        let img = render_image(&all_road(), &intr, &extr);
        assert_eq!(img.get(32, 32), ROAD_GRAY);
        assert_eq!(img.get(32, 31), all_road().sky);
    }

    #[test]
    fn box_ahead_occludes_ground_behind_it() {
        let mut s = all_road();
        s.vehicles.push(car([10.0, 0.0], 0.0));
        let o = Vector3::new(0.0, 0.0, 1.6);
        // Ray that would hit the ground at x = 16 passes through the box.
        let d = Vector3::new(16.0, 0.0, -1.6);
        match s.cast(&o, &d).unwrap() {
            Hit::Vehicle { index: 0, t } => {
                // Enters the rear face x = 8 at height 1.6 * (1 - 8/16) = 0.8.
                assert!((t - 0.5).abs() < 1e-12);
            }
            h => panic!("expected vehicle hit, got {h:?}"),
        }
        let intr = Intrinsics::from_fov(70.0, 64, 64).unwrap();
        let extr = Extrinsics::looking(0.0, 0.0, [0.0, 0.0, 1.6]);
        let img = render_image(&s, &intr, &extr);
        let without = render_image(&all_road(), &intr, &extr);
        // Every pixel in the centre column whose ray would reach the ground
        // beyond the box front shows the car instead.
        for v in 32..64 {
            let d = extr.dir_to_ego(&pixel_ray([32.5, v as f64 + 0.5], &intr));
            let ground_x = -1.6 / d.z * d.x;
            if ground_x > 8.05 {
                assert_eq!(img.get(32, v), [200, 40, 40]);
                assert_eq!(without.get(32, v), ROAD_GRAY);
            }
        }
    }

    #[test]
    fn all_road_ground_truth() {
        let spec = BevGridSpec::new(10.0, 10.0, 0.5, 0.5).unwrap();
        let (occ, app) = render_bev_ground_truth(&all_road(), &spec);
        let c = spec.cells();
        assert!(occ.data()[..c].iter().all(|&v| v == 1.0));
        assert!(occ.data()[c..].iter().all(|&v| v == 0.0));
        for (ch, &gray) in ROAD_GRAY.iter().enumerate() {
            assert!(app.data()[ch * c..(ch + 1) * c].iter().all(|&v| v == gray as f32 / 255.0));
        }
    }

    #[test]
    fn four_by_two_vehicle_covers_fifty_cells_over_road() {
        let spec = BevGridSpec::surround();
        let mut s = all_road();
        s.vehicles.push(car([0.0, 0.0], 0.0));
        let (occ, app) = render_bev_ground_truth(&s, &spec);
        let c = spec.cells();
        let veh: Vec<usize> = (0..c).filter(|&k| occ.data()[VEHICLE * c + k] == 1.0).collect();
        assert_eq!(veh.len(), 50);
        // Oracle: direct count of cell centres inside [-2, 2) × [-1, 1).
        let oracle = (0..200)
            .flat_map(|i| (0..200).map(move |j| (i, j)))
            .filter(|&(i, j)| {
                let (x, y) = ((i as f64 + 0.5) * 0.4 - 40.0, (j as f64 + 0.5) * 0.4 - 40.0);
                (-2.0..2.0).contains(&x) && (-1.0..1.0).contains(&y)
            })
            .count();
        assert_eq!(oracle, 50);
        for &k in &veh {
            assert_eq!(occ.data()[ROAD * c + k], 1.0);
            assert_eq!(app.data()[k], 200.0 / 255.0);
        }
    }

    #[test]
    fn lidar_over_flat_world_hits_plane() {
        let cfg = LidarConfig { channels: 8, azimuths: 64, elevation_min_deg: -25.0, elevation_max_deg: -2.0 };
        let pts = sample_lidar(&all_road(), [0.0, 0.0, 1.8], &cfg);
        assert_eq!(pts.len(), 8 * 64);
        assert!(pts.iter().all(|p| p[2].abs() < 1e-9));
        let level = LidarConfig { channels: 1, azimuths: 64, elevation_min_deg: 0.0, elevation_max_deg: 0.0 };
        assert!(sample_lidar(&all_road(), [0.0, 0.0, 1.8], &level).is_empty());
    }

    #[test]
    fn lidar_returns_on_vehicle_surface() {
        let mut s = all_road();
        let v = Vehicle { center: [8.0, 3.0], yaw: 0.4, length: 4.5, width: 2.0, height: 1.8, color: [40, 70, 210] };
        s.vehicles.push(v);
        let cfg = LidarConfig { channels: 16, azimuths: 360, elevation_min_deg: -15.0, elevation_max_deg: 5.0 };
        let mut on_box = 0;
        for p in sample_lidar(&s, [0.0, 0.0, 1.0], &cfg) {
            if p[2] > 1e-6 {
                // Distance from the box surface: max over axes of |local| - half.
                let (lx, ly) = v.footprint().local(p[0], p[1]);
                let lz = p[2] - v.height / 2.0;
                let excess = [lx.abs() - 2.25, ly.abs() - 1.0, lz.abs() - 0.9];
                let dist = excess.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(dist.abs() < 1e-9, "{p:?} off surface by {dist}");
                on_box += 1;
            }
        }
        assert!(on_box > 10);
    }

    #[test]
    fn occupancy_file_round_trip() {
        let spec = BevGridSpec::new(8.0, 6.0, 1.0, 1.0).unwrap();
        let mut s = all_road();
        s.vehicles.push(car([1.0, 1.0], 0.3));
        let (occ, _) = render_bev_ground_truth(&s, &spec);
        let bytes = encode_occupancy(&occ).unwrap();
        assert_eq!(&bytes[..4], b"OCCG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6);
        assert_eq!(bytes.len(), 16 + 3 * 48);
        assert_eq!(decode_occupancy(&bytes, Path::new("m")).unwrap().data(), occ.data());
        assert!(decode_occupancy(&bytes[..20], Path::new("m")).is_err());
    }

    #[test]
    fn scene_json_round_trip() {
        let s = sample_scene(4, &SceneConfig::for_grid(BevGridSpec::surround()));
        let back: Scene = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn every_generated_vehicle_occupies_a_cell(seed in 0u64..10_000) {
            let grid = BevGridSpec::new(16.0, 16.0, 0.25, 0.25).unwrap();
            let mut cfg = SceneConfig::for_grid(grid);
            cfg.ego_clearance = 2.0;
            let s = sample_scene(seed, &cfg);
            let c = grid.cells();
            for v in &s.vehicles {
                let fp = v.footprint();
                let hit = (0..c).any(|k| {
                    let (x, y) = grid.cell_center(k / grid.grid_y, k % grid.grid_y);
                    fp.contains(x, y)
                });
                prop_assert!(hit);
            }
        }

        #[test]
        fn rendering_is_pure(seed in 0u64..10_000) {
            let grid = BevGridSpec::new(16.0, 16.0, 0.25, 0.25).unwrap();
            let s = sample_scene(seed, &SceneConfig::for_grid(grid));
            let rig = CameraRig::surround(64, 32);
            let cam = &rig.cameras()[1];
            let a = render_image(&s, &cam.intrinsics, &cam.extrinsics);
            let b = par::with_threads(2, || render_image(&s, &cam.intrinsics, &cam.extrinsics));
            prop_assert_eq!(a, b);
        }
    }
}
