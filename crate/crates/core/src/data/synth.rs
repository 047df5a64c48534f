//! Synthetic lesion-like images with class-dependent shape families.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use super::DatasetManifest;
use crate::error::{Error, Result};

const FAMILIES: [&str; 4] = ["ellipse", "ring", "blobs", "streak"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub counts: Vec<usize>,
    pub image_size: usize,
    pub seed: u64,
}

impl SynthConfig {
    /// Four imbalanced classes of 32×32 images.
    pub fn desk(seed: u64) -> Self {
        SynthConfig {
            num_classes: 4,
            counts: vec![600, 120, 60, 30],
            image_size: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be ≥ 1".into()));
        }
        if self.counts.len() != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "{} counts given for {} classes",
                self.counts.len(),
                self.num_classes
            )));
        }
        if self.counts.contains(&0) {
            return Err(Error::InvalidArgument("every class count must be ≥ 1".into()));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidArgument("image_size must be ≥ 8".into()));
        }
        Ok(())
    }

    /// Names sort in class order, so a reloaded manifest keeps the indices.
    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| format!("c{c:02}_{}", FAMILIES[c % FAMILIES.len()]))
            .collect()
    }
}

/// Render the dataset into `out_dir` (PNG files plus `manifest.csv`).
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names = cfg.class_names();
    let mut items = Vec::new();
    for (c, &n) in cfg.counts.iter().enumerate() {
        for i in 0..n {
            let mut rng = crate::seed::rng(cfg.seed, "synth", &[c as u64, i as u64]);
            let img = render(c, cfg.image_size, &mut rng);
            let file = format!("{}_{i:04}.png", names[c]);
            img.save(&out_dir.join(&file))?;
            items.push((file, names[c].clone()));
        }
    }
    let manifest = DatasetManifest::new(names, out_dir.to_path_buf(), items)?;
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn smoothstep(edge: f64, softness: f64, d: f64) -> f64 {
    (0.5 - (d - edge) / softness).clamp(0.0, 1.0)
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, cy: f64, cx: f64, r: f64, ratio: (f64, f64)) -> Self {
        let theta = rng.gen_range(0.0..PI);
        Ellipse {
            cy,
            cx,
            a: r,
            b: r * rng.gen_range(ratio.0..ratio.1),
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Normalized radius (1 on the boundary) and coordinate along the major axis.
    fn radius(&self, y: f64, x: f64) -> (f64, f64) {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = self.cos * dx + self.sin * dy;
        let v = -self.sin * dx + self.cos * dy;
        (((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt(), u)
    }
}

type Mask = Box<dyn Fn(f64, f64) -> f64>;

/// Soft coverage mask of one shape family centred at `(cy, cx)` with scale `r`.
fn shape_mask(family: usize, cy: f64, cx: f64, r: f64, softness: f64, rng: &mut ChaCha8Rng) -> Mask {
    match family {
        0 => {
            let e = Ellipse::random(rng, cy, cx, r, (0.55, 1.0));
            Box::new(move |y, x| smoothstep(1.0, softness, e.radius(y, x).0))
        }
        1 => {
            let e = Ellipse::random(rng, cy, cx, r * 1.1, (0.7, 1.0));
            let inner = rng.gen_range(0.4..0.75);
            let fill = rng.gen_range(0.15..0.45);
            Box::new(move |y, x| {
                let d = e.radius(y, x).0;
                smoothstep(1.0, softness, d) - smoothstep(inner, softness, d) * (1.0 - fill)
            })
        }
        2 => {
            let blobs: Vec<Ellipse> = (0..rng.gen_range(2..=5))
                .map(|_| {
                    let (dy, dx) = (rng.gen_range(-1.0..1.0) * r, rng.gen_range(-1.0..1.0) * r);
                    let br = r * rng.gen_range(0.3..0.55);
                    Ellipse::random(rng, cy + dy, cx + dx, br, (0.7, 1.0))
                })
                .collect();
            Box::new(move |y, x| {
                blobs
                    .iter()
                    .map(|b| smoothstep(1.0, softness * 2.0, b.radius(y, x).0))
                    .fold(0.0, f64::max)
            })
        }
        _ => {
            let e = Ellipse::random(rng, cy, cx, r * 1.25, (0.3, 0.6));
            let freq = rng.gen_range(0.6..1.2) * 8.0 / r.max(1.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            Box::new(move |y, x| {
                let (d, u) = e.radius(y, x);
                smoothstep(1.0, softness, d) * (0.7 + 0.3 * (freq * u + phase).sin())
            })
        }
    }
}

fn lesion_colour(family: usize, group: usize, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let centre = 0.2 + 0.2 * family as f64 + 0.1 * group as f64;
    let hue = (centre + rng.gen_range(-0.25..0.25)).clamp(0.0, 1.0);
    lerp3([0.48, 0.28, 0.17], [0.32, 0.14, 0.30], hue)
}

fn render(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f64;
    let family = class % FAMILIES.len();
    let group = class / FAMILIES.len();

    let skin = [
        0.86 + rng.gen_range(-0.05..0.05),
        0.66 + rng.gen_range(-0.05..0.05),
        0.56 + rng.gen_range(-0.05..0.05),
    ];
    let shade = (rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08));

    // Small, fainter shapes of any family scattered over the background.
    let mut layers: Vec<(Mask, [f64; 3], f64)> = Vec::new();
    for _ in 0..rng.gen_range(2..=4) {
        let f = rng.gen_range(0..FAMILIES.len());
        let (dy, dx) = (rng.gen_range(0.1..0.9) * s, rng.gen_range(0.1..0.9) * s);
        let r = rng.gen_range(0.08..0.13) * s;
        let colour = lesion_colour(f, group, rng);
        let opacity = rng.gen_range(0.3..0.55);
        layers.push((shape_mask(f, dy, dx, r, 0.3, rng), colour, opacity));
    }

    let cy = s / 2.0 + rng.gen_range(-0.15..0.15) * s;
    let cx = s / 2.0 + rng.gen_range(-0.15..0.15) * s;
    let r = rng.gen_range(0.16..0.24) * s;
    let colour = lesion_colour(family, group, rng);
    let opacity = rng.gen_range(0.6..0.9);
    let softness = rng.gen_range(0.08..0.2);
    layers.push((shape_mask(family, cy, cx, r, softness, rng), colour, opacity));

    let noise: Vec<f64> = (0..size * size * 3).map(|_| rng.gen_range(-0.06..0.06)).collect();
    Image::from_fn(size, size, |y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let light = 1.0 + shade.0 * (fy / s - 0.5) + shade.1 * (fx / s - 0.5);
        let mut px = skin.map(|v| v * light);
        for (mask, colour, opacity) in &layers {
            px = lerp3(px, *colour, mask(fy, fx).clamp(0.0, 1.0) * opacity);
        }
        let o = (y * size + x) * 3;
        [0, 1, 2].map(|ch| (px[ch] + noise[o + ch]).clamp(0.0, 1.0) as f32)
    })
}
