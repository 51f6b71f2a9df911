//! Camera encoder, lift/splat onto the BEV grid, and the two BEV decoders.

use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_frustum, CameraRig, DepthBins, FrustumPoints};
use crate::grid::BevGridSpec;
use crate::liftsplat::{lift, PoolPlan, PoolSource};
use crate::metrics::{bce_occupancy, l1_appearance};
use crate::scene::CLASSES;
use crate::tensor::io::{read_checkpoint, write_checkpoint, NamedArray};
use crate::tensor::{
    adam_update, add, conv2d, narrow_channels, relu, scale, sigmoid, softmax_over_channels, upsample_bilinear_x2,
    AdamState, Parameter, Scalar, Tensor,
};

/// Image-to-feature downsampling factor of the encoder.
pub const DOWNSAMPLE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context_channels: usize,
    pub depth: DepthBins,
    pub image_height: usize,
    pub image_width: usize,
    pub grid: BevGridSpec,
    pub classes: Vec<String>,
    pub color_channels: usize,
    /// Output widths of the four stride-2 encoder convolutions.
    pub encoder_widths: [usize; 4],
    /// Width of the first decoder stage; later stages double it.
    pub decoder_width: usize,
    pub lambda_occ: f64,
    pub lambda_app: f64,
    pub appearance_head: bool,
}

impl ModelConfig {
    /// Six 128×352 cameras, C = 64, 41 depth bins, 200×200 grid.
    pub fn surround() -> Self {
        ModelConfig {
            context_channels: 64,
            depth: DepthBins::surround(),
            image_height: 128,
            image_width: 352,
            grid: BevGridSpec::surround(),
            classes: CLASSES.iter().map(|s| s.to_string()).collect(),
            color_channels: 3,
            encoder_widths: [32, 64, 128, 128],
            decoder_width: 64,
            lambda_occ: 1.0,
            lambda_app: 1.0,
            appearance_head: true,
        }
    }

    /// Desk-scale setting: 64×64 images, C = 16, 8 bins from 1 m, 64×64 grid
    /// at 0.25 m.
    pub fn toy() -> Self {
        ModelConfig {
            context_channels: 16,
            depth: DepthBins::new(1.0, 17.0, 2.0).expect("valid bins"),
            image_height: 64,
            image_width: 64,
            grid: BevGridSpec::new(16.0, 16.0, 0.25, 0.25).expect("valid grid"),
            classes: CLASSES.iter().map(|s| s.to_string()).collect(),
            color_channels: 3,
            encoder_widths: [16, 32, 32, 32],
            decoder_width: 16,
            lambda_occ: 1.0,
            lambda_app: 1.0,
            appearance_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.image_height.is_multiple_of(DOWNSAMPLE) || !self.image_width.is_multiple_of(DOWNSAMPLE) || self.image_height == 0 || self.image_width == 0 {
            return bad(format!(
                "image {}×{} must be a positive multiple of {DOWNSAMPLE}",
                self.image_height, self.image_width
            ));
        }
        if !self.grid.grid_x.is_multiple_of(4) || !self.grid.grid_y.is_multiple_of(4) {
            return bad(format!("grid {}×{} must be divisible by 4", self.grid.grid_x, self.grid.grid_y));
        }
        if self.classes.is_empty() || self.context_channels == 0 || self.color_channels == 0 || self.decoder_width == 0 {
            return bad("classes, channels and widths must be non-empty".into());
        }
        if self.encoder_widths.contains(&0) {
            return bad("encoder widths must be positive".into());
        }
        if !(self.lambda_occ >= 0.0 && self.lambda_app >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_height / DOWNSAMPLE, self.image_width / DOWNSAMPLE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Occupancy,
    Appearance,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn apply<T: Scalar>(&self, p: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &p[self.weight], Some(&p[self.bias]), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
struct Residual {
    a: Conv,
    b: Conv,
    skip: Option<Conv>,
}

impl Residual {
    fn apply<T: Scalar>(&self, p: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = relu(&self.a.apply(p, x)?);
        let h = self.b.apply(p, &h)?;
        let s = match &self.skip {
            Some(c) => c.apply(p, x)?,
            None => x.clone(),
        };
        Ok(relu(&add(&h, &s)?))
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    stages: [Residual; 3],
    up: [Conv; 2],
    out: Conv,
}

impl Decoder {
    fn apply<T: Scalar>(&self, p: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for s in &self.stages {
            h = s.apply(p, &h)?;
        }
        for u in &self.up {
            h = relu(&u.apply(p, &upsample_bilinear_x2(&h)?)?);
        }
        self.out.apply(p, &h)
    }
}

struct Builder<'a, T: Scalar> {
    params: Vec<Parameter<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    /// Fan-in scaled uniform weights (variance 2 / fan_in), zero bias.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let a = (6.0 / fan_in).sqrt();
        let w: Vec<T> = (0..cout * cin * k * k)
            .map(|_| if zero { T::zero() } else { T::of(self.rng.gen_range(-a..a)) })
            .collect();
        let weight = self.params.len();
        self.params.push(Parameter::new(format!("{name}.weight"), &[cout, cin, k, k], w).expect("shape"));
        self.params
            .push(Parameter::new(format!("{name}.bias"), &[cout], vec![T::zero(); cout]).expect("shape"));
        Conv {
            weight,
            bias: weight + 1,
            stride,
            pad: k / 2,
        }
    }

    fn residual(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Residual {
        let a = self.conv(&format!("{name}.conv1"), cin, cout, 3, stride, false);
        let b = self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false);
        let skip = (cin != cout || stride != 1).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, stride, false));
        Residual { a, b, skip }
    }

    fn decoder(&mut self, name: &str, cin: usize, width: usize, out: usize) -> Decoder {
        let (w1, w2, w3) = (width, 2 * width, 4 * width);
        Decoder {
            stages: [
                self.residual(&format!("{name}.stage1"), cin, w1, 1),
                self.residual(&format!("{name}.stage2"), w1, w2, 2),
                self.residual(&format!("{name}.stage3"), w2, w3, 2),
            ],
            up: [
                self.conv(&format!("{name}.up1"), w3, w2, 3, 1, false),
                self.conv(&format!("{name}.up2"), w2, w1, 3, 1, false),
            ],
            out: self.conv(&format!("{name}.out"), w1, out, 1, 1, true),
        }
    }
}

/// Output of a forward pass over a batch.
#[derive(Debug, Clone)]
pub struct BevOutput<T: Scalar = f32> {
    /// `B × C × grid_x × grid_y` pooled features.
    pub bev: Tensor<T>,
    /// `B × |S| × grid_x × grid_y` logits.
    pub occupancy: Tensor<T>,
    /// `B × n_c × grid_x × grid_y` in `[0, 1]`, absent when the head is off.
    pub appearance: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub loss_occ: f64,
    pub loss_app: f64,
    pub loss_total: f64,
}

struct CachedPlan {
    rig: CameraRig,
    batch: usize,
    plan: Arc<PoolPlan>,
}

pub struct BevNet<T: Scalar = f32> {
    config: ModelConfig,
    params: Vec<Parameter<T>>,
    encoder: [Conv; 5],
    head: Conv,
    occupancy: Decoder,
    appearance: Decoder,
    /// Index of the first appearance-decoder parameter; all later ones
    /// belong to it too.
    appearance_start: usize,
    plan: Mutex<Option<CachedPlan>>,
}

impl<T: Scalar> BevNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::<T> { params: Vec::new(), rng: &mut rng };
        let e = config.encoder_widths;
        let encoder = [
            b.conv("encoder.down1", 3, e[0], 3, 2, false),
            b.conv("encoder.down2", e[0], e[1], 3, 2, false),
            b.conv("encoder.down3", e[1], e[2], 3, 2, false),
            b.conv("encoder.down4", e[2], e[3], 3, 2, false),
            b.conv("encoder.mix", e[3], e[3], 3, 1, false),
        ];
        let depth_bins = config.depth.count();
        let head = b.conv("encoder.head", e[3], config.context_channels + depth_bins, 1, 1, false);
        let occupancy = b.decoder("occupancy", config.context_channels, config.decoder_width, config.classes.len());
        let appearance_start = b.params.len();
        let appearance = b.decoder("appearance", config.context_channels, config.decoder_width, config.color_channels);
        Ok(BevNet {
            params: b.params,
            config,
            encoder,
            head,
            occupancy,
            appearance,
            appearance_start,
            plan: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    /// Parameters updated by training under the current configuration.
    pub fn trainable_mut(&mut self) -> &mut [Parameter<T>] {
        let end = if self.config.appearance_head { self.params.len() } else { self.appearance_start };
        &mut self.params[..end]
    }

    pub fn is_encoder_parameter(&self, index: usize) -> bool {
        self.params[index].name().starts_with("encoder.")
    }

    fn tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.tensor().clone()).collect()
    }

    fn encode_with(&self, p: &[Tensor<T>], images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w) = (self.config.image_height, self.config.image_width);
        match images.shape() {
            &[_, 3, ih, iw] if (ih, iw) == (h, w) => {}
            s => {
                return Err(Error::shape(
                    "encode",
                    format!("images {s:?} do not match N×3×{h}×{w}"),
                ))
            }
        }
        let mut x = images.clone();
        for c in &self.encoder {
            x = relu(&c.apply(p, &x)?);
        }
        let f = self.head.apply(p, &x)?;
        let c = self.config.context_channels;
        let d = self.config.depth.count();
        Ok((narrow_channels(&f, 0, c)?, softmax_over_channels(&f, c, c + d)?))
    }

    /// Context `C × H' × W'` and depth distribution `D × H' × W'` of one
    /// `3 × H × W` image.
    pub fn encode(&self, image: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(Error::shape("encode", format!("expected 3×H×W, got {s:?}")));
        }
        let batched = crate::tensor::reshape(image, &[1, s[0], s[1], s[2]])?;
        let (ctx, depth) = self.encode_with(&self.tensors(), &batched)?;
        let (h, w) = self.config.feature_size();
        Ok((
            crate::tensor::reshape(&ctx, &[self.config.context_channels, h, w])?,
            crate::tensor::reshape(&depth, &[self.config.depth.count(), h, w])?,
        ))
    }

    /// Batched encoder output: `N × C × H' × W'` and `N × D × H' × W'`.
    pub fn encode_batch(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.encode_with(&self.tensors(), images)
    }

    fn plan_for(&self, rig: &CameraRig, batch: usize) -> Result<Arc<PoolPlan>> {
        let mut cache = self.plan.lock().expect("plan cache");
        if let Some(c) = cache.as_ref() {
            if c.batch == batch && &c.rig == rig {
                return Ok(Arc::clone(&c.plan));
            }
        }
        let frusta: Vec<FrustumPoints> = rig
            .iter()
            .map(|c| build_frustum(&c.intrinsics, &c.extrinsics, DOWNSAMPLE, &self.config.depth))
            .collect::<Result<_>>()?;
        let keys = rig.canonical_keys();
        let mut sources = Vec::with_capacity(batch * rig.len());
        for b in 0..batch {
            for (k, f) in frusta.iter().enumerate() {
                sources.push(PoolSource {
                    sample: b,
                    camera_key: keys[k],
                    points: &f.points,
                });
            }
        }
        let plan = Arc::new(PoolPlan::new(&self.config.grid, batch, &sources)?);
        *cache = Some(CachedPlan {
            rig: rig.clone(),
            batch,
            plan: Arc::clone(&plan),
        });
        Ok(plan)
    }

    fn splat_with(&self, p: &[Tensor<T>], images: &Tensor<T>, rig: &CameraRig) -> Result<Tensor<T>> {
        let shape = images.shape();
        let n = rig.len();
        if shape.len() != 5 || shape[1] != n {
            return Err(Error::shape(
                "forward",
                format!("images {shape:?} do not match B×{n}×3×H×W for a {n}-camera rig"),
            ));
        }
        for cam in rig.iter() {
            let i = &cam.intrinsics;
            if (i.height, i.width) != (self.config.image_height, self.config.image_width) {
                return Err(Error::shape(
                    "forward",
                    format!("camera `{}` is {}×{}, model expects {}×{}", cam.name, i.width, i.height, self.config.image_width, self.config.image_height),
                ));
            }
        }
        let batch = shape[0];
        let flat = crate::tensor::reshape(images, &[batch * n, 3, shape[3], shape[4]])?;
        let (ctx, depth) = self.encode_with(p, &flat)?;
        let lifted = lift(&ctx, &depth)?;
        self.plan_for(rig, batch)?.pool(&lifted)
    }

    /// Decodes a `B × C × grid_x × grid_y` map with one head.
    pub fn bev_decode(&self, bev: &Tensor<T>, head: Head) -> Result<Tensor<T>> {
        self.decode_with(&self.tensors(), bev, head)
    }

    fn decode_with(&self, p: &[Tensor<T>], bev: &Tensor<T>, head: Head) -> Result<Tensor<T>> {
        let g = &self.config.grid;
        match bev.shape() {
            &[_, c, x, y] if (c, x, y) == (self.config.context_channels, g.grid_x, g.grid_y) => {}
            s => {
                return Err(Error::shape(
                    "bev_decode",
                    format!("features {s:?} do not match B×{}×{}×{}", self.config.context_channels, g.grid_x, g.grid_y),
                ))
            }
        }
        Ok(match head {
            Head::Occupancy => self.occupancy.apply(p, bev)?,
            Head::Appearance => sigmoid(&self.appearance.apply(p, bev)?),
        })
    }

    fn forward_with(&self, p: &[Tensor<T>], images: &Tensor<T>, rig: &CameraRig) -> Result<BevOutput<T>> {
        let bev = self.splat_with(p, images, rig)?;
        let occupancy = self.decode_with(p, &bev, Head::Occupancy)?;
        let appearance = if self.config.appearance_head {
            Some(self.decode_with(p, &bev, Head::Appearance)?)
        } else {
            None
        };
        Ok(BevOutput { bev, occupancy, appearance })
    }

    /// Full pass over `B × N × 3 × H × W` images from `rig`.
    pub fn forward(&self, images: &Tensor<T>, rig: &CameraRig) -> Result<BevOutput<T>> {
        self.forward_with(&self.tensors(), images, rig)
    }

    /// Forward pass with caller-supplied parameter values (same order and
    /// shapes as [`BevNet::parameters`]); used for gradient checks.
    pub fn forward_with_parameters(&self, p: &[Tensor<T>], images: &Tensor<T>, rig: &CameraRig) -> Result<BevOutput<T>> {
        if p.len() != self.params.len() || p.iter().zip(&self.params).any(|(t, q)| t.shape() != q.shape()) {
            return Err(Error::shape("forward", "parameter list does not match the model"));
        }
        self.forward_with(p, images, rig)
    }

    /// Weighted training loss of one batch and its parts.
    pub fn loss(&self, out: &BevOutput<T>, occ_target: &Tensor<T>, app_target: &Tensor<T>) -> Result<(Tensor<T>, StepLosses)> {
        let occ = bce_occupancy(&out.occupancy, occ_target)?;
        let mut total = scale(&occ, T::of(self.config.lambda_occ));
        let mut loss_app = 0.0;
        if let Some(app) = &out.appearance {
            let l1 = l1_appearance(app, app_target)?;
            loss_app = l1.item().as_f64();
            if self.config.lambda_app != 0.0 {
                total = add(&total, &scale(&l1, T::of(self.config.lambda_app)))?;
            }
        }
        let parts = StepLosses {
            loss_occ: occ.item().as_f64(),
            loss_app,
            loss_total: total.item().as_f64(),
        };
        Ok((total, parts))
    }

    /// One optimiser step on a batch. Parameters are left untouched when the
    /// loss is not finite.
    pub fn train_step(
        &mut self,
        images: &Tensor<T>,
        rig: &CameraRig,
        occ_target: &Tensor<T>,
        app_target: &Tensor<T>,
        adam: &mut AdamState,
    ) -> Result<StepLosses> {
        let out = self.forward(images, rig)?;
        let (total, parts) = self.loss(&out, occ_target, app_target)?;
        if ![parts.loss_occ, parts.loss_app, parts.loss_total].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: adam.step as usize,
                detail: format!("occ {} app {} total {}", parts.loss_occ, parts.loss_app, parts.loss_total),
            });
        }
        total.backward()?;
        adam_update(self.trainable_mut(), adam)?;
        Ok(parts)
    }

    pub fn to_records(&self) -> Vec<NamedArray> {
        self.params
            .iter()
            .map(|p| NamedArray {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                data: p.tensor().data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }

    /// Replaces every parameter from checkpoint records, which must match
    /// the model's names and shapes exactly.
    pub fn load_records(&mut self, records: &[NamedArray]) -> Result<()> {
        for p in self.params.iter() {
            let r = records.iter().find(|r| r.name == p.name()).ok_or_else(|| {
                Error::shape("load_checkpoint", format!("tensor `{}` missing from checkpoint", p.name()))
            })?;
            if r.shape != p.shape() {
                return Err(Error::shape(
                    "load_checkpoint",
                    format!("tensor `{}` has shape {:?} in checkpoint, model expects {:?}", p.name(), r.shape, p.shape()),
                ));
            }
        }
        if let Some(extra) = records.iter().find(|r| !self.params.iter().any(|p| p.name() == r.name)) {
            return Err(Error::shape("load_checkpoint", format!("checkpoint tensor `{}` is not in the model", extra.name)));
        }
        for p in self.params.iter_mut() {
            let r = records.iter().find(|r| r.name == p.name()).expect("checked");
            p.set_data(r.data.iter().map(|&v| T::of(v as f64)).collect())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_records())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.load_records(&read_checkpoint(path)?)
    }
}
