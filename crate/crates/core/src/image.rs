//! 8-bit raster images and binary PPM (P6) / PGM (P5) files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::BevGridSpec;
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB, row-major from the top-left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar `3×H×W` tensor with values `v / 255`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0f32; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], out).expect("image shape")
    }

    /// Quantises a planar `3×H×W` tensor in `[0, 1]`.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w) = match t.shape() {
            &[3, h, w] => (h, w),
            s => return Err(Error::shape("image", format!("expected 3×H×W, got {s:?}"))),
        };
        let plane = h * w;
        let mut img = RgbImage::new(w, h);
        for p in 0..plane {
            for c in 0..3 {
                img.data[p * 3 + c] = quantize(t.data()[c * plane + p]);
            }
        }
        Ok(img)
    }

    /// Places `other` with its top-left corner at `(x0, y0)`, clipped.
    pub fn blit(&mut self, other: &RgbImage, x0: usize, y0: usize) {
        for y in 0..other.height.min(self.height.saturating_sub(y0)) {
            for x in 0..other.width.min(self.width.saturating_sub(x0)) {
                self.put(x0 + x, y0 + y, other.get(x, y));
            }
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (w, h, body) = parse_header(bytes, b"P6", origin)?;
        if body.len() != w * h * 3 {
            return Err(Error::format(origin, format!("expected {} pixel bytes, got {}", w * h * 3, body.len())));
        }
        Ok(RgbImage {
            width: w,
            height: h,
            data: body.to_vec(),
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_ppm(&bytes, path)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit single channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_pgm(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (w, h, body) = parse_header(bytes, b"P5", origin)?;
        if body.len() != w * h {
            return Err(Error::format(origin, "pixel data length does not match header"));
        }
        Ok(GrayImage {
            width: w,
            height: h,
            data: body.to_vec(),
        })
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Parses a binary netpbm header with maxval 255, skipping `#` comments.
fn parse_header<'a>(bytes: &'a [u8], magic: &[u8], origin: &Path) -> Result<(usize, usize, &'a [u8])> {
    if !bytes.starts_with(magic) {
        return Err(Error::format(origin, format!("expected {} magic", String::from_utf8_lossy(magic))));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::format(origin, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(origin, "malformed header number"))?;
    }
    if fields[2] != 255 {
        return Err(Error::format(origin, format!("only maxval 255 is supported, got {}", fields[2])));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::format(origin, "missing whitespace after header"));
    }
    Ok((fields[0], fields[1], &bytes[pos + 1..]))
}

/// Top-down display of a BEV raster: forward (+x) is up, left (+y) is left.
/// Cell `(i, j)` lands on row `grid_x - 1 - i`, column `grid_y - 1 - j`.
pub fn bev_pixel(spec: &BevGridSpec, i: usize, j: usize) -> (usize, usize) {
    (spec.grid_y - 1 - j, spec.grid_x - 1 - i)
}

/// Renders a `3 × grid_x × grid_y` appearance tensor as a top-down image.
pub fn bev_to_image(appearance: &Tensor<f32>, spec: &BevGridSpec) -> Result<RgbImage> {
    if appearance.shape() != [3, spec.grid_x, spec.grid_y] {
        return Err(Error::shape(
            "bev_to_image",
            format!("appearance {:?} does not match grid {}×{}", appearance.shape(), spec.grid_x, spec.grid_y),
        ));
    }
    let cells = spec.cells();
    let mut img = RgbImage::new(spec.grid_y, spec.grid_x);
    for i in 0..spec.grid_x {
        for j in 0..spec.grid_y {
            let idx = i * spec.grid_y + j;
            let rgb = [0, 1, 2].map(|c| quantize(appearance.data()[c * cells + idx]));
            let (x, y) = bev_pixel(spec, i, j);
            img.put(x, y, rgb);
        }
    }
    Ok(img)
}

/// Inverse of [`bev_to_image`].
pub fn image_to_bev(img: &RgbImage, spec: &BevGridSpec) -> Result<Tensor<f32>> {
    if img.width != spec.grid_y || img.height != spec.grid_x {
        return Err(Error::shape(
            "image_to_bev",
            format!("image {}×{} does not match grid {}×{}", img.width, img.height, spec.grid_y, spec.grid_x),
        ));
    }
    let cells = spec.cells();
    let mut out = vec![0.0f32; 3 * cells];
    for i in 0..spec.grid_x {
        for j in 0..spec.grid_y {
            let (x, y) = bev_pixel(spec, i, j);
            let px = img.get(x, y);
            for c in 0..3 {
                out[c * cells + i * spec.grid_y + j] = px[c] as f32 / 255.0;
            }
        }
    }
    Tensor::from_vec(&[3, spec.grid_x, spec.grid_y], out)
}

/// Top-down mask image (255 = set).
pub fn mask_to_image(mask: &[bool], spec: &BevGridSpec) -> GrayImage {
    let mut data = vec![0u8; spec.cells()];
    for i in 0..spec.grid_x {
        for j in 0..spec.grid_y {
            let (x, y) = bev_pixel(spec, i, j);
            if mask[i * spec.grid_y + j] {
                data[y * spec.grid_y + x] = 255;
            }
        }
    }
    GrayImage {
        width: spec.grid_y,
        height: spec.grid_x,
        data,
    }
}
