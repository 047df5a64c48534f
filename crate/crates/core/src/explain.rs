//! Grad-CAM maps and heat-map overlays.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{Model, DEFAULT_LAYER};
use crate::data::{resize_plane, to_tensor, Image};
use crate::error::{shape_err, Error, Result};
use crate::layers::Mode;
use crate::scalar::Scalar;

/// Nonnegative `(h, w)` map with maximum 1, or all zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub target_class: usize,
    pub layer: String,
}

impl AttentionMap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Grad-CAM of `score` against the `(1, h, w, c)` activation `act`, whose
/// gradients must already be on `tape`, upsampled to `height × width`.
pub fn cam_from_tape<T: Scalar>(tape: &Tape<T>, act: Var, height: usize, width: usize) -> Result<Vec<f64>> {
    let s = tape.shape(act);
    if s.n() != 1 {
        return Err(shape_err!("Grad-CAM needs a single sample, got {s}"));
    }
    let (h, w, c) = (s.h(), s.w(), s.c());
    let Some(grad) = tape.grad(act) else {
        return Ok(vec![0.0; height * width]);
    };
    let a = tape.value(act).data();
    let g = grad.data();
    let mut alpha = vec![0.0f64; c];
    for p in 0..h * w {
        for ch in 0..c {
            alpha[ch] += g[p * c + ch].to_f64_lossy();
        }
    }
    alpha.iter_mut().for_each(|v| *v /= (h * w) as f64);
    let coarse: Vec<f64> = (0..h * w)
        .map(|p| {
            let v: f64 = (0..c).map(|ch| alpha[ch] * a[p * c + ch].to_f64_lossy()).sum();
            v.max(0.0)
        })
        .collect();
    let mut map = resize_plane(&coarse, h, w, height, width);
    normalize(&mut map);
    Ok(map)
}

fn normalize(values: &mut [f64]) {
    let max = values.iter().copied().fold(0.0, f64::max);
    for v in values.iter_mut() {
        *v = if max > 0.0 { (*v / max).max(0.0) } else { 0.0 };
    }
}

/// Grad-CAM for `target_class` at the named activation (see [`Model::activation_names`]).
pub fn grad_cam<T: Scalar>(model: &Model<T>, image: &Image, target_class: usize, layer: Option<&str>) -> Result<AttentionMap> {
    let layer = layer.unwrap_or(DEFAULT_LAYER);
    if target_class >= model.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "target class {target_class} out of range for {} classes",
            model.num_classes()
        )));
    }
    let names = model.activation_names();
    if !names.iter().any(|n| n == layer) {
        return Err(Error::InvalidArgument(format!(
            "unknown layer {layer:?}; available: {}",
            names.join(", ")
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(to_tensor::<T>(&[image])?);
    let fp = model.forward(&mut tape, x, Mode::Eval)?;
    let act = fp.activation(layer).expect("name listed by the model");
    let score = tape.select_channel(fp.logits, &[target_class])?;
    tape.backward(score)?;
    Ok(AttentionMap {
        height: image.height(),
        width: image.width(),
        values: cam_from_tape(&tape, act, image.height(), image.width())?,
        target_class,
        layer: layer.to_string(),
    })
}

/// Heat colour for `v ∈ [0, 1]`: blue at 0, red at 1.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [v, 0.0, 1.0 - v]
}

/// Weight of the heat colour in the overlay.
pub const OVERLAY_ALPHA: f64 = 0.4;

/// `[original | blend]` where blend is `0.6·original + 0.4·colormap(map)`.
pub fn overlay(map: &AttentionMap, image: &Image) -> Result<Image> {
    if (map.height, map.width) != (image.height(), image.width()) {
        return Err(shape_err!(
            "map {}×{} vs image {}×{}",
            map.height,
            map.width,
            image.height(),
            image.width()
        ));
    }
    let blend = Image::from_fn(image.height(), image.width(), |y, x| {
        let px = image.pixel(y, x);
        let heat = colormap(map.at(y, x));
        [0, 1, 2].map(|c| ((1.0 - OVERLAY_ALPHA) * px[c] as f64 + OVERLAY_ALPHA * heat[c]) as f32)
    });
    Image::hconcat(&[image, &blend])
}

pub fn export_overlay(map: &AttentionMap, image: &Image, out_path: &Path) -> Result<()> {
    overlay(map, image)?.save(out_path)
}

/// `<image_id>_<class>_<layer>.png`
pub fn overlay_file_name(image_id: &str, class: &str, layer: &str) -> String {
    let stem = Path::new(image_id)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or(image_id);
    format!("{stem}_{class}_{layer}.png")
}
