//! Pinhole cameras, rigs, lift frustums and ground-plane homographies.
//!
//! Frames: ego is x forward, y left, z up with the origin on the ground at the
//! vehicle centre. Camera frames have z along the optical axis, x right and
//! y down. Pixel `(u, v)` grows right and down from the top-left corner, with
//! pixel centres at integer + 0.5.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BevGridSpec;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let ok = fx > 0.0
            && fy > 0.0
            && cx > 0.0
            && cx < width as f64
            && cy > 0.0
            && cy < height as f64;
        if !ok {
            return Err(Error::invalid(
                "intrinsics",
                format!("fx={fx} fy={fy} cx={cx} cy={cy} for a {width}x{height} image"),
            ));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square pixels, principal point at the image centre.
    pub fn from_fov(horizontal_fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(horizontal_fov_deg > 0.0 && horizontal_fov_deg < 180.0) {
            return Err(Error::invalid(
                "intrinsics_from_fov",
                format!("field of view {horizontal_fov_deg} deg outside (0, 180)"),
            ));
        }
        let f = width as f64 / (2.0 * (horizontal_fov_deg.to_radians() / 2.0).tan());
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }

    /// Integer pixel whose centre is nearest to `(u, v)`, if inside the image.
    pub fn pixel_at(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        self.contains(u, v).then(|| (u.floor() as usize, v.floor() as usize))
    }
}

/// Rigid camera-to-ego transform: `p_ego = R * p_cam + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Extrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "extrinsics",
                format!("rotation is not proper orthonormal (|RtR-I|={ortho:e}, det={det})"),
            ));
        }
        Ok(Extrinsics {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Extrinsics {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `position` looking along heading `yaw` (counter-clockwise
    /// from ego-forward), tilted `pitch_down` below the horizon.
    pub fn looking(yaw_deg: f64, pitch_down_deg: f64, position: [f64; 3]) -> Self {
        // Columns are the camera x/y/z axes in ego coordinates for a level,
        // forward-facing camera.
        let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let (sp, cp) = pitch_down_deg.to_radians().sin_cos();
        let pitch = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
        let (sy, cy) = yaw_deg.to_radians().sin_cos();
        let yaw = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
        Extrinsics {
            rotation: yaw * pitch * base,
            translation: Vector3::from(position),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn cam_to_ego(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn ego_to_cam(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Ego-frame direction of a camera-frame direction.
    pub fn dir_to_ego(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }
}

pub fn cam_to_ego(p: &Vector3<f64>, extr: &Extrinsics) -> Vector3<f64> {
    extr.cam_to_ego(p)
}

/// Pixel coordinates of a camera-frame point, or `None` when the point is not
/// in front of the camera (`z <= 1e-9`).
pub fn project(p: &Vector3<f64>, intr: &Intrinsics) -> Option<[f64; 2]> {
    if p.z <= 1e-9 {
        return None;
    }
    Some([intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy])
}

/// Camera-frame point at `depth` along the optical axis through pixel `(u, v)`.
pub fn unproject(pixel: [f64; 2], depth: f64, intr: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::invalid("unproject", format!("depth must be positive, got {depth}")));
    }
    Ok(Vector3::new(
        (pixel[0] - intr.cx) / intr.fx * depth,
        (pixel[1] - intr.cy) / intr.fy * depth,
        depth,
    ))
}

/// Camera-frame direction (unnormalised, z = 1) through pixel `(u, v)`.
pub fn pixel_ray(pixel: [f64; 2], intr: &Intrinsics) -> Vector3<f64> {
    Vector3::new((pixel[0] - intr.cx) / intr.fx, (pixel[1] - intr.cy) / intr.fy, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub name: String,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

/// Ordered cameras. Order is significant for colorization priority.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
}

/// Placement of one camera on a generated rig.
#[derive(Debug, Clone, Copy)]
pub struct Mount<'a> {
    pub name: &'a str,
    pub yaw_deg: f64,
    pub fov_deg: f64,
    pub pitch_down_deg: f64,
    pub position: [f64; 3],
}

/// Mounting height of generated rigs, metres above ground.
pub const DEFAULT_MOUNT_HEIGHT: f64 = 1.6;

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::invalid("camera_rig", "a rig needs at least one camera"));
        }
        let mut names: Vec<&str> = cameras.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("camera_rig", "camera names must be unique"));
        }
        Ok(CameraRig { cameras })
    }

    pub fn from_mounts(mounts: &[Mount<'_>], width: usize, height: usize) -> Result<Self> {
        let cameras = mounts
            .iter()
            .map(|m| {
                Ok(Camera {
                    name: m.name.to_string(),
                    intrinsics: Intrinsics::from_fov(m.fov_deg, width, height)?,
                    extrinsics: Extrinsics::looking(m.yaw_deg, m.pitch_down_deg, m.position),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras)
    }

    /// Six-camera surround rig: five 70° cameras at yaws 55, 0, -55, 110,
    /// -110 and a 110° rear camera at 180, level, 1.6 m up on the vehicle
    /// perimeter.
    pub fn surround(width: usize, height: usize) -> Self {
        let layout = [
            ("front_left", 55.0, 70.0),
            ("front", 0.0, 70.0),
            ("front_right", -55.0, 70.0),
            ("rear_left", 110.0, 70.0),
            ("rear_right", -110.0, 70.0),
            ("rear", 180.0, 110.0),
        ];
        let mounts: Vec<Mount> = layout
            .iter()
            .map(|&(name, yaw, fov)| Mount {
                name,
                yaw_deg: yaw,
                fov_deg: fov,
                pitch_down_deg: 0.0,
                position: perimeter_position(yaw),
            })
            .collect();
        Self::from_mounts(&mounts, width, height).expect("valid surround rig")
    }

    /// The three forward cameras of [`CameraRig::surround`].
    pub fn front_three(width: usize, height: usize) -> Self {
        let full = Self::surround(width, height);
        Self::new(full.cameras.into_iter().take(3).collect()).expect("valid rig")
    }

    /// Two 100° cameras looking forward and backward, pitched 10° down.
    pub fn front_rear(width: usize, height: usize) -> Self {
        let mounts = [("front", 0.0, [1.5, 0.0]), ("rear", 180.0, [-1.5, 0.0])].map(|(name, yaw, [x, y])| Mount {
            name,
            yaw_deg: yaw,
            fov_deg: 100.0,
            pitch_down_deg: 10.0,
            position: [x, y, DEFAULT_MOUNT_HEIGHT],
        });
        Self::from_mounts(&mounts, width, height).expect("valid rig")
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Camera> {
        self.cameras.iter()
    }

    /// Position of each camera in name order; a key that does not change when
    /// the list is permuted.
    pub fn canonical_keys(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.cameras.len()).collect();
        order.sort_by(|&a, &b| self.cameras[a].name.cmp(&self.cameras[b].name));
        let mut keys = vec![0; order.len()];
        for (rank, &idx) in order.iter().enumerate() {
            keys[idx] = rank;
        }
        keys
    }

    pub fn to_file(&self) -> RigFile {
        RigFile {
            cameras: self
                .cameras
                .iter()
                .map(|c| {
                    let r = c.extrinsics.rotation();
                    let t = c.extrinsics.translation();
                    CameraRecord {
                        name: c.name.clone(),
                        fx: c.intrinsics.fx,
                        fy: c.intrinsics.fy,
                        cx: c.intrinsics.cx,
                        cy: c.intrinsics.cy,
                        width: c.intrinsics.width,
                        height: c.intrinsics.height,
                        rotation: [
                            r[(0, 0)],
                            r[(0, 1)],
                            r[(0, 2)],
                            r[(1, 0)],
                            r[(1, 1)],
                            r[(1, 2)],
                            r[(2, 0)],
                            r[(2, 1)],
                            r[(2, 2)],
                        ],
                        translation: [t.x, t.y, t.z],
                    }
                })
                .collect(),
        }
    }

    pub fn from_file(file: &RigFile) -> Result<Self> {
        let cameras = file
            .cameras
            .iter()
            .map(|c| {
                Ok(Camera {
                    name: c.name.clone(),
                    intrinsics: Intrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)?,
                    extrinsics: Extrinsics::new(
                        Matrix3::from_row_slice(&c.rotation),
                        Vector3::from(c.translation),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cameras)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("rig serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RigFile = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_file(&file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Same cameras, reordered so that `perm[k]` becomes position `k`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(perm.iter().map(|&i| self.cameras[i].clone()).collect())
    }
}

/// Mount point on a 3.0 m × 1.6 m rectangle around the ego origin.
fn perimeter_position(yaw_deg: f64) -> [f64; 3] {
    let (s, c) = yaw_deg.to_radians().sin_cos();
    let (hx, hy) = (1.5, 0.8);
    let scale = 1.0 / (c.abs() / hx).max(s.abs() / hy);
    [c * scale, s * scale, DEFAULT_MOUNT_HEIGHT]
}

/// On-disk rig: rotation (row-major) and translation map camera to ego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub cameras: Vec<CameraRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub name: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

/// Discrete depths `min + k*step` for `k in 0..count()`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBins {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl DepthBins {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self> {
        if !(min > 0.0 && max > min && step > 0.0) {
            return Err(Error::invalid(
                "depth_bins",
                format!("need max > min > 0 and step > 0 (min={min}, max={max}, step={step})"),
            ));
        }
        let n = (max - min) / step;
        if (n - n.round()).abs() > 1e-9 {
            return Err(Error::invalid(
                "depth_bins",
                format!("range {min}..{max} is not a whole number of {step} m steps"),
            ));
        }
        Ok(DepthBins { min, max, step })
    }

    /// 4 m to 45 m in 1 m steps.
    pub fn surround() -> Self {
        Self::new(4.0, 45.0, 1.0).expect("valid bins")
    }

    pub fn count(&self) -> usize {
        ((self.max - self.min) / self.step).round() as usize
    }

    pub fn depth(&self, k: usize) -> f64 {
        self.min + k as f64 * self.step
    }
}

/// Ego-frame points for every depth bin and downsampled pixel, laid out
/// `(d, h, w)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumPoints {
    pub depth_bins: usize,
    pub height: usize,
    pub width: usize,
    pub points: Vec<[f64; 3]>,
}

impl FrustumPoints {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn at(&self, d: usize, h: usize, w: usize) -> [f64; 3] {
        self.points[(d * self.height + h) * self.width + w]
    }
}

pub fn build_frustum(
    intr: &Intrinsics,
    extr: &Extrinsics,
    downsample: usize,
    bins: &DepthBins,
) -> Result<FrustumPoints> {
    if downsample == 0 || !intr.width.is_multiple_of(downsample) || !intr.height.is_multiple_of(downsample) {
        return Err(Error::shape(
            "build_frustum",
            format!(
                "image {}x{} is not divisible by downsample factor {downsample}",
                intr.width, intr.height
            ),
        ));
    }
    let (hs, ws) = (intr.height / downsample, intr.width / downsample);
    let d_count = bins.count();
    let mut points = Vec::with_capacity(d_count * hs * ws);
    let s = downsample as f64;
    for k in 0..d_count {
        let depth = bins.depth(k);
        for h in 0..hs {
            for w in 0..ws {
                let pixel = [(w as f64 + 0.5) * s, (h as f64 + 0.5) * s];
                let p = extr.cam_to_ego(&unproject(pixel, depth, intr)?);
                points.push([p.x, p.y, p.z]);
            }
        }
    }
    Ok(FrustumPoints {
        depth_bins: d_count,
        height: hs,
        width: ws,
        points,
    })
}

/// Maps ground-plane ego coordinates `(x, y, 1)` to homogeneous pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub matrix: Matrix3<f64>,
}

impl Homography {
    /// Homogeneous image point of ground point `(x, y)`.
    pub fn apply(&self, x: f64, y: f64) -> Vector3<f64> {
        self.matrix * Vector3::new(x, y, 1.0)
    }

    /// Pixel of ground point `(x, y)`, or `None` behind the camera.
    pub fn to_pixel(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let q = self.apply(x, y);
        (q.z > 1e-9).then(|| [q.x / q.z, q.y / q.z])
    }

    /// Ground point seen at pixel `(u, v)`.
    pub fn to_ground(&self, u: f64, v: f64) -> Option<[f64; 2]> {
        let inv = self.matrix.try_inverse()?;
        let q = inv * Vector3::new(u, v, 1.0);
        (q.z.abs() > 1e-15).then(|| [q.x / q.z, q.y / q.z])
    }
}

/// Closed-form homography of the plane `z = ground_z` from calibration.
pub fn ipm_homography(intr: &Intrinsics, extr: &Extrinsics, ground_z: f64) -> Result<Homography> {
    let height = extr.translation().z - ground_z;
    if height <= 1e-6 {
        return Err(Error::DegenerateGeometry(format!(
            "camera is {height} m above the ground plane"
        )));
    }
    let m = extr.rotation().transpose();
    let offset = m.column(2) * ground_z - m * extr.translation();
    let mut cols = Matrix3::zeros();
    cols.set_column(0, &m.column(0));
    cols.set_column(1, &m.column(1));
    cols.set_column(2, &offset);
    let h = intr.matrix() * cols;
    let det = h.determinant();
    if det.abs() <= 1e-12 {
        return Err(Error::DegenerateGeometry(format!("ground homography is singular (det {det:e})")));
    }
    Ok(Homography { matrix: h })
}

/// BEV raster with a per-cell validity flag.
#[derive(Debug, Clone)]
pub struct MaskedBev {
    /// `3 × grid_x × grid_y` colours in `[0, 1]`; invalid cells are black.
    pub appearance: Tensor<f32>,
    pub valid: Vec<bool>,
}

impl MaskedBev {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Nearest-neighbour inverse perspective warp of one `3×H×W` image.
pub fn ipm_warp(image: &Tensor<f32>, homography: &Homography, spec: &BevGridSpec) -> Result<MaskedBev> {
    let (h, w) = match image.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::shape("ipm_warp", format!("expected a 3×H×W image, got {s:?}"))),
    };
    let cells = spec.cells();
    let mut out = vec![0.0f32; 3 * cells];
    let mut valid = vec![false; cells];
    let px = image.data();
    for (idx, (x, y)) in spec.centers().enumerate() {
        let Some([u, v]) = homography.to_pixel(x, y) else {
            continue;
        };
        if !(u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64) {
            continue;
        }
        let (iu, iv) = (u.floor() as usize, v.floor() as usize);
        for c in 0..3 {
            out[c * cells + idx] = px[(c * h + iv) * w + iu];
        }
        valid[idx] = true;
    }
    Ok(MaskedBev {
        appearance: Tensor::from_vec(&[3, spec.grid_x, spec.grid_y], out)?,
        valid,
    })
}
