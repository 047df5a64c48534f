//! RGB float images, file IO, bilinear resampling and augmentation.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Row-major `(h, w, 3)` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(shape_err!("image {height}×{width} with {} values", data.len()));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Image {
            height,
            width,
            data: (0..height * width).flat_map(|_| rgb).collect(),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x));
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Bilinear sample at continuous pixel coordinates; outside points take the nearest edge.
    fn sample(&self, sy: f64, sx: f64) -> [f32; 3] {
        let sy = sy.clamp(0.0, (self.height - 1) as f64);
        let sx = sx.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let (a, b, c, d) = (self.pixel(y0, x0), self.pixel(y0, x1), self.pixel(y1, x0), self.pixel(y1, x1));
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
            let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
            out[ch] = ((top * (1.0 - fy) + bottom * fy) as f32).clamp(0.0, 1.0);
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .into_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image::new(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Write as PNG, or binary PPM when the extension is `ppm`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("ppm") => image::ImageFormat::Pnm,
            _ => image::ImageFormat::Png,
        };
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, format).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Place images side by side. Heights must match.
    pub fn hconcat(parts: &[&Image]) -> Result<Self> {
        let height = parts.first().map(|p| p.height).unwrap_or(0);
        if height == 0 || parts.iter().any(|p| p.height != height) {
            return Err(shape_err!("hconcat needs non-empty images of equal height"));
        }
        let width = parts.iter().map(|p| p.width).sum();
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for p in parts {
                data.extend_from_slice(&p.data[y * p.width * 3..(y + 1) * p.width * 3]);
            }
        }
        Ok(Image { height, width, data })
    }

    /// Flip left-right.
    pub fn flip_horizontal(&self) -> Self {
        Image::from_fn(self.height, self.width, |y, x| self.pixel(y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Image::from_fn(self.height, self.width, |y, x| self.pixel(self.height - 1 - y, x))
    }
}

/// Bilinear resize with half-pixel centres.
pub fn resize(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!("resize target {height}×{width}")));
    }
    if (height, width) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    Ok(Image::from_fn(height, width, |y, x| {
        img.sample((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5)
    }))
}

/// Bilinear resize of a single-channel `(h, w)` map with half-pixel centres.
pub fn resize_plane(values: &[f64], h: usize, w: usize, height: usize, width: usize) -> Vec<f64> {
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = values[y0 * w + x0] * (1.0 - tx) + values[y0 * w + x1] * tx;
            let bottom = values[y1 * w + x0] * (1.0 - tx) + values[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// One draw of the geometric augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    /// Fraction of the width, positive to the right.
    pub shift_x: f64,
    /// Fraction of the height, positive downwards.
    pub shift_y: f64,
    pub zoom: f64,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl AugmentParams {
    pub const MAX_ROTATION_DEG: f64 = 180.0;
    pub const MAX_SHIFT: f64 = 0.1;
    pub const ZOOM_RANGE: (f64, f64) = (0.9, 1.1);

    pub fn identity() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            shift_x: 0.0,
            shift_y: 0.0,
            zoom: 1.0,
            flip_h: false,
            flip_v: false,
        }
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        AugmentParams {
            rotation_deg: rng.gen_range(0.0..=Self::MAX_ROTATION_DEG),
            shift_x: rng.gen_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
            shift_y: rng.gen_range(-Self::MAX_SHIFT..=Self::MAX_SHIFT),
            zoom: rng.gen_range(Self::ZOOM_RANGE.0..=Self::ZOOM_RANGE.1),
            flip_h: rng.gen_bool(0.5),
            flip_v: rng.gen_bool(0.5),
        }
    }

    /// Flip, then rotate and zoom about the centre, then shift.
    pub fn apply(&self, img: &Image) -> Image {
        let (h, w) = (img.height as f64, img.width as f64);
        let (cy, cx) = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let (ty, tx) = (self.shift_y * h, self.shift_x * w);
        Image::from_fn(img.height, img.width, |y, x| {
            // Invert the forward map for destination pixel (y, x).
            let dy = (y as f64 - cy - ty) / self.zoom;
            let dx = (x as f64 - cx - tx) / self.zoom;
            let mut sy = -sin * dx + cos * dy + cy;
            let mut sx = cos * dx + sin * dy + cx;
            if self.flip_h {
                sx = w - 1.0 - sx;
            }
            if self.flip_v {
                sy = h - 1.0 - sy;
            }
            img.sample(sy, sx)
        })
    }
}

/// Pixels for training: a class, the record it came from, and how it was augmented.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub pixels: Image,
    pub class_index: usize,
    pub record_id: usize,
    pub augmentation: Option<AugmentParams>,
}

/// Random geometric augmentation, deterministic in `seed`.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = crate::seed::rng(seed, "augment", &[]);
    let params = AugmentParams::draw(&mut rng);
    Sample {
        pixels: params.apply(&sample.pixels),
        class_index: sample.class_index,
        record_id: sample.record_id,
        augmentation: Some(params),
    }
}

/// Stack images into an `(n, h, w, 3)` tensor.
pub fn to_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| shape_err!("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(shape_err!("batch mixes {h}×{w} and {}×{}", img.height, img.width));
        }
        data.extend(img.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::from_vec(Shape::new(images.len(), h, w, 3), data)
}
