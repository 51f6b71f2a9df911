//! INI run configuration.
//!
//! ```ini
//! [run]
//! preset = toy          ; surround | front | toy
//! out = runs/toy
//!
//! [train]
//! steps = 2000
//! ```
//!
//! Every key is optional; missing keys take the preset's value. Relative
//! paths are resolved against the config file's directory.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, DepthBins};
use crate::grid::BevGridSpec;
use crate::model::ModelConfig;
use crate::scene::{Range, SceneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Surround,
    Front,
    Toy,
}

impl FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "surround" => Ok(Preset::Surround),
            "front" => Ok(Preset::Front),
            "toy" => Ok(Preset::Toy),
            _ => Err(format!("unknown preset `{s}` (surround, front, toy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub count: usize,
    pub split: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only at exit.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    /// Defaults to `model.bevp` in the output directory.
    pub checkpoint: Option<PathBuf>,
    pub threshold: f32,
    /// Number of test scenes that get a PPM panel.
    pub panels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IpmConfig {
    /// Scene directory supplying `rig.json` and `cam_k.ppm`.
    pub scene: Option<PathBuf>,
    pub images: Vec<PathBuf>,
    pub rig: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColorizeConfig {
    /// Scene directory; points and cuboids default to ones derived from its
    /// `scene.json`.
    pub scene: Option<PathBuf>,
    pub points: Option<PathBuf>,
    pub cuboids: Option<PathBuf>,
    pub images: Vec<PathBuf>,
    pub rig: Option<PathBuf>,
    pub lidar_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportConfig {
    pub joint: Option<PathBuf>,
    pub occupancy_only: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RigSource {
    Preset(String),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub out: PathBuf,
    pub data: DataConfig,
    pub rig: RigSource,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ipm: IpmConfig,
    pub colorize: ColorizeConfig,
    pub report: ReportConfig,
}

struct Reader<'a> {
    ini: &'a Ini,
    base: &'a Path,
    used: RefCell<BTreeSet<(String, String)>>,
}

impl Reader<'_> {
    fn raw(&self, section: &str, key: &str) -> Option<&str> {
        let v = self.ini.section(Some(section))?.get(key)?;
        self.used.borrow_mut().insert((section.to_string(), key.to_string()));
        Some(v.trim())
    }

    fn get<T: FromStr>(&self, section: &str, key: &str, into: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.raw(section, key) {
            *into = v
                .parse()
                .map_err(|e| Error::Config(format!("[{section}] {key} = {v}: {e}")))?;
        }
        Ok(())
    }

    fn flag(&self, section: &str, key: &str, into: &mut bool) -> Result<()> {
        if let Some(v) = self.raw(section, key) {
            *into = match v {
                "true" | "yes" | "on" | "1" => true,
                "false" | "no" | "off" | "0" => false,
                _ => return Err(Error::Config(format!("[{section}] {key} = {v}: expected true or false"))),
            };
        }
        Ok(())
    }

    fn path(&self, section: &str, key: &str) -> Option<PathBuf> {
        self.raw(section, key).map(|v| self.base.join(v))
    }

    fn paths(&self, section: &str, key: &str) -> Vec<PathBuf> {
        self.raw(section, key)
            .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| self.base.join(s)).collect())
            .unwrap_or_default()
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(section, key) else { return Ok(None) };
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::Config(format!("[{section}] {key} = {v}: {e}")))
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// `a..b` or a single value.
    fn range<T>(&self, section: &str, key: &str, into: &mut Range<T>) -> Result<()>
    where
        T: FromStr + Copy + PartialOrd + rand::distributions::uniform::SampleUniform,
        T::Err: std::fmt::Display,
    {
        let Some(v) = self.raw(section, key) else { return Ok(()) };
        let bad = |e: String| Error::Config(format!("[{section}] {key} = {v}: {e}"));
        let (lo, hi) = v.split_once("..").unwrap_or((v, v));
        let lo: T = lo.trim().parse().map_err(|e: T::Err| bad(e.to_string()))?;
        let hi: T = hi.trim().parse().map_err(|e: T::Err| bad(e.to_string()))?;
        if lo > hi {
            return Err(bad("empty range".into()));
        }
        *into = Range::new(lo, hi);
        Ok(())
    }

    fn reject_unknown(&self) -> Result<()> {
        let used = self.used.borrow();
        for (section, props) in self.ini {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key `{k}` outside any section")));
                }
                continue;
            };
            for (k, _) in props.iter() {
                if !used.contains(&(section.to_string(), k.to_string())) {
                    return Err(Error::Config(format!("unknown key `{k}` in [{section}]")));
                }
            }
        }
        Ok(())
    }
}

impl RunConfig {
    /// Built-in defaults for a preset.
    pub fn preset(preset: Preset) -> Self {
        let (model, rig, count, batch, steps) = match preset {
            Preset::Surround => (ModelConfig::surround(), "surround", 100, 20, 20_000),
            Preset::Front => {
                let mut m = ModelConfig::surround();
                m.grid = BevGridSpec::front_half();
                (m, "front", 100, 20, 20_000)
            }
            Preset::Toy => (ModelConfig::toy(), "front_rear", 80, 8, 2000),
        };
        let mut scene = SceneConfig::for_grid(model.grid);
        if preset == Preset::Toy {
            scene.extra_roads = Range::new(0, 0);
            scene.vehicles = Range::new(1, 4);
            scene.ego_clearance = 2.0;
        }
        RunConfig {
            preset,
            out: PathBuf::from("out"),
            data: DataConfig {
                dir: PathBuf::from("data"),
                count,
                split: 0.8,
                seed: 0,
            },
            rig: RigSource::Preset(rig.into()),
            scene,
            model,
            train: TrainConfig {
                lr: 1e-3,
                batch,
                steps,
                seed: 0,
                checkpoint_every: 500,
            },
            eval: EvalConfig {
                checkpoint: None,
                threshold: 0.5,
                panels: 8,
            },
            ipm: IpmConfig {
                scene: None,
                images: Vec::new(),
                rig: None,
            },
            colorize: ColorizeConfig {
                scene: None,
                points: None,
                cuboids: None,
                images: Vec::new(),
                rig: None,
                lidar_height: 1.8,
            },
            report: ReportConfig {
                joint: None,
                occupancy_only: None,
            },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let r = Reader {
            ini: &ini,
            base,
            used: RefCell::new(BTreeSet::new()),
        };
        let mut preset = Preset::Surround;
        r.get("run", "preset", &mut preset)?;
        let mut c = Self::preset(preset);
        c.out = r.path("run", "out").unwrap_or_else(|| base.join(&c.out));
        c.data.dir = r.path("data", "dir").unwrap_or_else(|| base.join(&c.data.dir));

        r.get("data", "count", &mut c.data.count)?;
        r.get("data", "split", &mut c.data.split)?;
        r.get("data", "seed", &mut c.data.seed)?;

        if let Some(v) = r.raw("rig", "layout") {
            c.rig = RigSource::Preset(v.to_string());
        }
        if let Some(p) = r.path("rig", "file") {
            c.rig = RigSource::File(p);
        }

        let m = &mut c.model;
        r.get("model", "context_channels", &mut m.context_channels)?;
        r.get("model", "image_width", &mut m.image_width)?;
        r.get("model", "image_height", &mut m.image_height)?;
        let (mut dmin, mut dmax, mut dstep) = (m.depth.min, m.depth.max, m.depth.step);
        r.get("model", "depth_min", &mut dmin)?;
        r.get("model", "depth_max", &mut dmax)?;
        r.get("model", "depth_step", &mut dstep)?;
        m.depth = DepthBins::new(dmin, dmax, dstep).map_err(|e| Error::Config(e.to_string()))?;
        let g = m.grid;
        let (mut ex, mut ey, mut rx, mut ry) = (g.extent_x, g.extent_y, g.res_x, g.res_y);
        r.get("model", "extent_x", &mut ex)?;
        r.get("model", "extent_y", &mut ey)?;
        r.get("model", "res_x", &mut rx)?;
        r.get("model", "res_y", &mut ry)?;
        m.grid = BevGridSpec::new(ex, ey, rx, ry).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(classes) = r.list::<String>("model", "classes")? {
            m.classes = classes;
        }
        if let Some(w) = r.list::<usize>("model", "encoder_widths")? {
            m.encoder_widths = w
                .try_into()
                .map_err(|_| Error::Config("[model] encoder_widths needs four values".into()))?;
        }
        r.get("model", "decoder_width", &mut m.decoder_width)?;
        r.get("model", "lambda_occ", &mut m.lambda_occ)?;
        r.get("model", "lambda_app", &mut m.lambda_app)?;
        r.flag("model", "appearance_head", &mut m.appearance_head)?;
        m.validate()?;

        let s = &mut c.scene;
        s.grid = c.model.grid;
        r.range("scene", "extra_roads", &mut s.extra_roads)?;
        r.range("scene", "road_width", &mut s.road_width)?;
        r.range("scene", "lanes_per_road", &mut s.lanes_per_road)?;
        r.range("scene", "lane_width", &mut s.lane_width)?;
        r.range("scene", "vehicles", &mut s.vehicles)?;
        r.range("scene", "vehicle_length", &mut s.vehicle_length)?;
        r.range("scene", "vehicle_width", &mut s.vehicle_width)?;
        r.range("scene", "vehicle_height", &mut s.vehicle_height)?;
        r.get("scene", "ego_clearance", &mut s.ego_clearance)?;
        r.get("scene", "lidar_channels", &mut s.lidar.channels)?;
        r.get("scene", "lidar_azimuths", &mut s.lidar.azimuths)?;
        s.validate()?;

        let t = &mut c.train;
        r.get("train", "lr", &mut t.lr)?;
        r.get("train", "batch", &mut t.batch)?;
        r.get("train", "steps", &mut t.steps)?;
        r.get("train", "seed", &mut t.seed)?;
        r.get("train", "checkpoint_every", &mut t.checkpoint_every)?;

        c.eval.checkpoint = r.path("eval", "checkpoint");
        r.get("eval", "threshold", &mut c.eval.threshold)?;
        r.get("eval", "panels", &mut c.eval.panels)?;

        c.ipm.scene = r.path("ipm", "scene");
        c.ipm.images = r.paths("ipm", "images");
        c.ipm.rig = r.path("ipm", "rig");

        c.colorize.scene = r.path("colorize", "scene");
        c.colorize.points = r.path("colorize", "points");
        c.colorize.cuboids = r.path("colorize", "cuboids");
        c.colorize.images = r.paths("colorize", "images");
        c.colorize.rig = r.path("colorize", "rig");
        r.get("colorize", "lidar_height", &mut c.colorize.lidar_height)?;

        c.report.joint = r.path("report", "joint");
        c.report.occupancy_only = r.path("report", "occupancy_only");

        r.reject_unknown()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        if !(self.data.split > 0.0 && self.data.split < 1.0) {
            return Err(Error::Config(format!("[data] split {} must lie in (0, 1)", self.data.split)));
        }
        if !(self.train.lr > 0.0) || self.train.batch == 0 {
            return Err(Error::Config("[train] lr and batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.eval.threshold) {
            return Err(Error::Config("[eval] threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Camera rig sized to the model's input resolution.
    pub fn camera_rig(&self) -> Result<CameraRig> {
        let (w, h) = (self.model.image_width, self.model.image_height);
        match &self.rig {
            RigSource::Preset(name) => match name.as_str() {
                "surround" => Ok(CameraRig::surround(w, h)),
                "front" => Ok(CameraRig::front_three(w, h)),
                "front_rear" => Ok(CameraRig::front_rear(w, h)),
                _ => Err(Error::Config(format!(
                    "unknown rig layout `{name}` (surround, front, front_rear)"
                ))),
            },
            RigSource::File(p) => CameraRig::load(p),
        }
    }

    /// Hash of everything that shapes results; output locations are left out.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            data: (usize, f64, u64),
            rig: &'a RigSource,
            scene: &'a SceneConfig,
            model: &'a ModelConfig,
            train: &'a TrainConfig,
            eval_threshold: f32,
        }
        let key = Key {
            data: (self.data.count, self.data.split, self.data.seed),
            rig: &self.rig,
            scene: &self.scene,
            model: &self.model,
            train: &self.train,
            eval_threshold: self.eval.threshold,
        };
        let bytes = serde_json::to_vec(&key).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of what determines the generated dataset.
    pub fn data_hash(&self) -> String {
        let key = (self.data.count, self.data.split, self.data.seed, &self.rig, &self.scene, self.model.image_width, self.model.image_height);
        let digest = Sha256::digest(serde_json::to_vec(&key).expect("config serializes"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
