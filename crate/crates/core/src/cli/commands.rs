use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::colorize::{colorize_points, cuboid_color, load_cuboids, paint_bev, parse_points, Cuboid};
use crate::dataset::{
    assign_splits, ipm_composite, make_batch, scene_dir_name, scene_seeds, write_scene, Manifest, ManifestEntry, Sample,
    Split,
};
use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::grid::BevGridSpec;
use crate::image::{bev_pixel, bev_to_image, mask_to_image, RgbImage};
use crate::metrics::{vehicle_centroids, IouAccumulator, MetricsReport, VehicleCentroid};
use crate::model::{BevNet, StepLosses};
use crate::par;
use crate::scene::{load_occupancy, sample_lidar, sample_scene, Rgb, Scene, VEHICLE};
use crate::tensor::{AdamState, Tensor};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn cmd_datagen(cfg: &RunConfig) -> Result<Manifest> {
    let rig = cfg.camera_rig()?;
    let dir = &cfg.data.dir;
    create_dir(dir)?;
    let seeds = scene_seeds(cfg.data.seed, cfg.data.count);
    let splits = assign_splits(cfg.data.count, cfg.data.split, cfg.data.seed)?;
    let mut scenes = Vec::with_capacity(seeds.len());
    for (i, (&seed, &split)) in seeds.iter().zip(&splits).enumerate() {
        let name = scene_dir_name(i);
        write_scene(&dir.join(&name), &sample_scene(seed, &cfg.scene), &rig, &cfg.model.grid)?;
        scenes.push(ManifestEntry { name, seed, split });
    }
    let manifest = Manifest {
        seed: cfg.data.seed,
        config_hash: cfg.data_hash(),
        train_fraction: cfg.data.split,
        grid: cfg.model.grid,
        scenes,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

fn load_split(cfg: &RunConfig, split: Split) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = Manifest::load(&cfg.data.dir.join("manifest.json"))?;
    if manifest.grid != cfg.model.grid {
        return Err(Error::shape(
            "dataset",
            format!(
                "dataset grid {}×{} does not match model grid {}×{}",
                manifest.grid.grid_x, manifest.grid.grid_y, cfg.model.grid.grid_x, cfg.model.grid.grid_y
            ),
        ));
    }
    let entries: Vec<&ManifestEntry> = manifest.entries(split).collect();
    let samples = par::map_indices(entries.len(), |i| Sample::load(&cfg.data.dir.join(&entries[i].name), &cfg.model.grid))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    for s in &samples {
        if s.occupancy.shape()[0] != cfg.model.classes.len() {
            return Err(Error::shape(
                "dataset",
                format!(
                    "{}: {} occupancy classes, model has {}",
                    s.dir.display(),
                    s.occupancy.shape()[0],
                    cfg.model.classes.len()
                ),
            ));
        }
    }
    Ok((manifest, samples))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first: StepLosses,
    pub last: StepLosses,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub config_fingerprint: String,
}

#[derive(Serialize)]
struct LogLine {
    step: usize,
    loss_occ: f64,
    loss_app: f64,
    loss_total: f64,
    wallclock: f64,
}

/// Sample order: concatenated seeded permutations of the training set,
/// `batch` at a time, dropping an epoch's ragged tail.
struct Batches {
    rng: ChaCha8Rng,
    n: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        Batches {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0xba7c4),
            n,
            batch: batch.min(n),
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += self.batch;
        &self.order[self.pos - self.batch..self.pos]
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let (_, samples) = load_split(cfg, Split::Train)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("no training scenes in {}", cfg.data.dir.display())));
    }
    let rig = samples[0].rig.clone();
    let mut net = BevNet::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let mut adam = AdamState::new(cfg.train.lr);

    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("config.json"), &(cfg, cfg.fingerprint()))?;
    let checkpoint = cfg.out.join("model.bevp");
    let log_path = cfg.out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let mut batches = Batches::new(samples.len(), cfg.train.batch, cfg.train.seed);
    let start = Instant::now();
    let mut first = None;
    let mut last = StepLosses { loss_occ: 0.0, loss_app: 0.0, loss_total: 0.0 };
    for step in 0..cfg.train.steps {
        let picked: Vec<&Sample> = batches.next().iter().map(|&i| &samples[i]).collect();
        let batch = make_batch(&picked)?;
        last = net.train_step(&batch.images, &rig, &batch.occupancy, &batch.appearance, &mut adam)?;
        first.get_or_insert(last);
        let line = LogLine {
            step,
            loss_occ: last.loss_occ,
            loss_app: last.loss_app,
            loss_total: last.loss_total,
            wallclock: start.elapsed().as_secs_f64(),
        };
        serde_json::to_writer(&mut log, &line).expect("log line serializes");
        log.write_all(b"\n").and_then(|_| log.flush()).map_err(|e| Error::io(&log_path, e))?;
        if cfg.train.checkpoint_every > 0 && (step + 1) % cfg.train.checkpoint_every == 0 {
            net.save(&checkpoint)?;
        }
    }
    net.save(&checkpoint)?;
    Ok(TrainSummary {
        steps: cfg.train.steps,
        first: first.unwrap_or(last),
        last,
        checkpoint,
        log: log_path,
        config_fingerprint: cfg.fingerprint(),
    })
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Class colours of the occupancy overlay: road, vehicle, lane, in drawing
/// order road < lane < vehicle.
const OVERLAY: [Rgb; 3] = [[110, 110, 110], [220, 40, 40], [240, 220, 60]];
const OVERLAY_EMPTY: Rgb = [25, 25, 25];

/// Top-down class map of an `|S| × X × Y` probability (or binary) grid.
pub fn occupancy_overlay(probs: &[f32], spec: &BevGridSpec, threshold: f32) -> RgbImage {
    let cells = spec.cells();
    let classes = probs.len() / cells;
    let mut img = RgbImage::new(spec.grid_y, spec.grid_x);
    for i in 0..spec.grid_x {
        for j in 0..spec.grid_y {
            let k = i * spec.grid_y + j;
            let mut rgb = OVERLAY_EMPTY;
            for s in [0, 2, 1] {
                if s < classes && probs[s * cells + k] > threshold {
                    rgb = OVERLAY[s];
                }
            }
            let (x, y) = bev_pixel(spec, i, j);
            img.put(x, y, rgb);
        }
    }
    img
}

fn panel(tiles: &[RgbImage]) -> RgbImage {
    let gap = 2;
    let w = tiles.iter().map(|t| t.width).sum::<usize>() + gap * (tiles.len() - 1);
    let h = tiles.iter().map(|t| t.height).max().unwrap_or(0);
    let mut out = RgbImage::new(w, h);
    for x in 0..w {
        for y in 0..h {
            out.put(x, y, [255, 255, 255]);
        }
    }
    let mut x0 = 0;
    for t in tiles {
        out.blit(t, x0, 0);
        x0 += t.width + gap;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneCentroids {
    pub scene: String,
    pub predicted: Vec<VehicleCentroid>,
    pub ground_truth: Vec<VehicleCentroid>,
}

fn vehicle_mask(occ: &[f32], spec: &BevGridSpec, threshold: f32) -> Vec<bool> {
    let cells = spec.cells();
    occ[VEHICLE * cells..(VEHICLE + 1) * cells].iter().map(|&p| p > threshold).collect()
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let (manifest, samples) = load_split(cfg, Split::Test)?;
    let names: Vec<&str> = manifest.entries(Split::Test).map(|e| e.name.as_str()).collect();
    let mut net = BevNet::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    net.load(cfg.eval.checkpoint.as_deref().unwrap_or(&cfg.out.join("model.bevp")))?;

    let spec = cfg.model.grid;
    let threshold = cfg.eval.threshold;
    create_dir(&cfg.out)?;
    let panels = cfg.out.join("panels");
    if cfg.eval.panels > 0 && !samples.is_empty() {
        create_dir(&panels)?;
    }
    let mut acc = IouAccumulator::new(cfg.model.classes.len());
    let mut l1_sum = 0.0;
    let mut centroids = Vec::new();
    let batch = cfg.train.batch.max(1);
    for (chunk_idx, chunk) in samples.chunks(batch).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b = make_batch(&refs)?;
        let out = net.forward(&b.images, &chunk[0].rig)?;
        let occ_len = out.occupancy.numel() / chunk.len();
        for (k, s) in chunk.iter().enumerate() {
            let idx = chunk_idx * batch + k;
            let probs: Vec<f32> = out.occupancy.data()[k * occ_len..(k + 1) * occ_len].iter().map(|&v| sigmoid(v)).collect();
            acc.add(&probs, s.occupancy.data(), threshold)?;
            let app = out.appearance.as_ref().map(|a| {
                let n = a.numel() / chunk.len();
                Tensor::from_vec(&[3, spec.grid_x, spec.grid_y], a.data()[k * n..(k + 1) * n].to_vec()).expect("shape")
            });
            if let Some(a) = &app {
                let n = a.numel() as f64;
                l1_sum += a.data().iter().zip(s.appearance.data()).map(|(p, t)| (p - t).abs() as f64).sum::<f64>() / n;
            }
            centroids.push(SceneCentroids {
                scene: names[idx].to_string(),
                predicted: vehicle_centroids(&vehicle_mask(&probs, &spec, threshold), &spec)?,
                ground_truth: vehicle_centroids(&vehicle_mask(s.occupancy.data(), &spec, 0.5), &spec)?,
            });
            if idx < cfg.eval.panels {
                let blank = RgbImage::new(spec.grid_y, spec.grid_x);
                let tiles = [
                    occupancy_overlay(&probs, &spec, threshold),
                    match &app {
                        Some(a) => bev_to_image(a, &spec)?,
                        None => blank,
                    },
                    bev_to_image(&s.appearance, &spec)?,
                    occupancy_overlay(s.occupancy.data(), &spec, 0.5),
                ];
                panel(&tiles).save_ppm(&panels.join(format!("{}.ppm", names[idx])))?;
            }
        }
    }
    let l1 = cfg
        .model
        .appearance_head
        .then(|| if samples.is_empty() { 0.0 } else { l1_sum / samples.len() as f64 });
    let report = MetricsReport::new(&cfg.model.classes, &acc, l1, samples.len(), threshold, &cfg.fingerprint());
    write_json(&cfg.out.join("metrics.json"), &report)?;
    write_json(&cfg.out.join("centroids.json"), &centroids)?;
    Ok(report)
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<RgbImage>> {
    paths.iter().map(|p| RgbImage::load_ppm(p)).collect()
}

/// Rig and camera images from a scene directory, or from explicit paths.
fn camera_inputs(scene: Option<&Path>, rig: Option<&Path>, images: &[PathBuf], what: &str) -> Result<(CameraRig, Vec<RgbImage>)> {
    let (rig, paths) = match (scene, rig) {
        (_, Some(r)) => (CameraRig::load(r)?, images.to_vec()),
        (Some(dir), None) => {
            let rig = CameraRig::load(&dir.join("rig.json"))?;
            let paths = if images.is_empty() {
                (0..rig.len()).map(|k| dir.join(format!("cam_{k}.ppm"))).collect()
            } else {
                images.to_vec()
            };
            (rig, paths)
        }
        (None, None) => return Err(Error::Config(format!("[{what}] needs either `scene` or `rig` and `images`"))),
    };
    if paths.len() != rig.len() {
        return Err(Error::shape(
            "camera_inputs",
            format!("{} images for a {}-camera rig", paths.len(), rig.len()),
        ));
    }
    Ok((rig, load_images(&paths)?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IpmSummary {
    pub cells: usize,
    pub valid_cells: usize,
    /// Mean absolute error against the scene's ground truth over covered
    /// cells free of vehicles, when ground truth is available.
    pub ground_error: Option<f64>,
}

pub fn cmd_ipm(cfg: &RunConfig) -> Result<IpmSummary> {
    let spec = cfg.model.grid;
    let (rig, images) = camera_inputs(cfg.ipm.scene.as_deref(), cfg.ipm.rig.as_deref(), &cfg.ipm.images, "ipm")?;
    let tensors: Vec<Tensor<f32>> = images.iter().map(|i| i.to_tensor()).collect();
    let bev = ipm_composite(&tensors, &rig, &spec)?;
    create_dir(&cfg.out)?;
    bev_to_image(&bev.appearance, &spec)?.save_ppm(&cfg.out.join("ipm_bev.ppm"))?;
    mask_to_image(&bev.valid, &spec).save_pgm(&cfg.out.join("ipm_mask.pgm"))?;

    let mut ground_error = None;
    if let Some(dir) = &cfg.ipm.scene {
        let (app, occ) = (dir.join("bev_appearance.ppm"), dir.join("bev_occupancy.occg"));
        if app.exists() && occ.exists() {
            let gt = crate::image::image_to_bev(&RgbImage::load_ppm(&app)?, &spec)?;
            let occ = load_occupancy(&occ)?;
            let cells = spec.cells();
            let (mut sum, mut n) = (0.0, 0usize);
            for k in 0..cells {
                if bev.valid[k] && occ.data()[VEHICLE * cells + k] < 0.5 {
                    for c in 0..3 {
                        sum += (bev.appearance.data()[c * cells + k] - gt.data()[c * cells + k]).abs() as f64;
                    }
                    n += 3;
                }
            }
            ground_error = (n > 0).then(|| sum / n as f64);
        }
    }
    let summary = IpmSummary {
        cells: spec.cells(),
        valid_cells: bev.valid_count(),
        ground_error,
    };
    write_json(&cfg.out.join("ipm_summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CuboidColor {
    pub index: usize,
    pub center: [f64; 3],
    /// `None` when no camera sees the cuboid.
    pub color: Option<Rgb>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColorizeSummary {
    pub points: usize,
    pub cuboids: usize,
    /// Cuboids left unpainted because no camera sees them.
    pub unseen_cuboids: usize,
    pub valid_cells: usize,
}

pub fn cmd_colorize(cfg: &RunConfig) -> Result<ColorizeSummary> {
    let c = &cfg.colorize;
    let spec = cfg.model.grid;
    let (rig, images) = camera_inputs(c.scene.as_deref(), c.rig.as_deref(), &c.images, "colorize")?;
    let scene = match &c.scene {
        Some(dir) if c.points.is_none() || c.cuboids.is_none() => Some(Scene::load(&dir.join("scene.json"))?),
        _ => None,
    };
    let points = match (&c.points, &scene) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_points(&text, p)?
        }
        (None, Some(s)) => sample_lidar(s, [0.0, 0.0, c.lidar_height], &cfg.scene.lidar),
        (None, None) => return Err(Error::Config("[colorize] needs `points` or a `scene`".into())),
    };
    let mut cuboids: Vec<Cuboid> = match (&c.cuboids, &scene) {
        (Some(p), _) => load_cuboids(p)?,
        (None, Some(s)) => s.vehicles.iter().map(Cuboid::from_vehicle).collect(),
        (None, None) => Vec::new(),
    };
    // A vehicle no camera sees stays unpainted, like an uncoloured point.
    for cub in cuboids.iter_mut() {
        if cub.color.is_none() {
            cub.color = match cuboid_color(cub, &images, &rig) {
                Ok(rgb) => Some(rgb),
                Err(Error::UncolorableCuboid) => None,
                Err(e) => return Err(e),
            };
        }
    }
    let colored = colorize_points(&points, &images, &rig)?;
    let paintable: Vec<Cuboid> = cuboids.iter().filter(|c| c.color.is_some()).cloned().collect();
    let painted = paint_bev(&colored, &paintable, &spec)?;
    create_dir(&cfg.out)?;
    bev_to_image(&painted.appearance, &spec)?.save_ppm(&cfg.out.join("bev_appearance.ppm"))?;
    mask_to_image(&painted.valid, &spec).save_pgm(&cfg.out.join("mask.pgm"))?;
    let colors: Vec<CuboidColor> = cuboids
        .iter()
        .enumerate()
        .map(|(index, cub)| CuboidColor {
            index,
            center: cub.center,
            color: cub.color,
        })
        .collect();
    write_json(&cfg.out.join("cuboid_colors.json"), &colors)?;
    Ok(ColorizeSummary {
        points: points.len(),
        cuboids: cuboids.len(),
        unseen_cuboids: cuboids.len() - paintable.len(),
        valid_cells: painted.valid.iter().filter(|v| **v).count(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub iou: Vec<(String, f64)>,
    pub appearance_l1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Classes on which the joint arm scores at least the occupancy-only arm.
    pub joint_at_least_occupancy_only: Vec<(String, bool)>,
}

pub fn ablation_report(joint: &MetricsReport, occ_only: &MetricsReport) -> AblationReport {
    let row = |arm: &str, r: &MetricsReport| AblationRow {
        arm: arm.into(),
        iou: r.iou.iter().map(|c| (c.class.clone(), c.iou)).collect(),
        appearance_l1: r.appearance_l1,
    };
    let cmp = joint
        .iou
        .iter()
        .map(|c| (c.class.clone(), occ_only.class_iou(&c.class).is_none_or(|o| c.iou >= o)))
        .collect();
    AblationReport {
        rows: vec![row("occupancy + appearance", joint), row("occupancy only", occ_only)],
        joint_at_least_occupancy_only: cmp,
    }
}

pub fn render_ablation(report: &AblationReport) -> String {
    let classes: Vec<&str> = report.rows[0].iou.iter().map(|(c, _)| c.as_str()).collect();
    let mut s = format!("| arm | {} |\n|---|{}\n", classes.join(" | "), "---|".repeat(classes.len()));
    for r in &report.rows {
        let vals: Vec<String> = r.iou.iter().map(|(_, v)| format!("{v:.4}")).collect();
        s += &format!("| {} | {} |\n", r.arm, vals.join(" | "));
    }
    s += "\njoint >= occupancy-only:";
    for (c, ok) in &report.joint_at_least_occupancy_only {
        s += &format!(" {c}={}", if *ok { "yes" } else { "no" });
    }
    s + "\n"
}

pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let (Some(j), Some(o)) = (&cfg.report.joint, &cfg.report.occupancy_only) else {
        return Err(Error::Config("[report] needs `joint` and `occupancy_only` metrics files".into()));
    };
    let (joint, occ): (MetricsReport, MetricsReport) = (read_json(j)?, read_json(o)?);
    let report = ablation_report(&joint, &occ);
    let text = render_ablation(&report);
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("ablation.json"), &report)?;
    std::fs::write(cfg.out.join("ablation.md"), &text).map_err(|e| Error::io(cfg.out.join("ablation.md"), e))?;
    Ok(text)
}
