//! Synthetic imbalanced-segmentation dataset generator.
//!
//! Produces small RGB rasters whose background is textured noise with
//! low-contrast clutter blobs (unlabeled hard negatives) and whose
//! foreground is a controlled, tiny fraction of simple shapes: rectangles,
//! ellipses, and elongated rotated bars, cycling by class id. The masks are
//! exact: a pixel is labeled with a class if and only if the renderer
//! painted that shape there. Everything is a pure function of the seed.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::nn::mix_seed;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub image_size: (usize, usize),
    /// Including background, so >= 2.
    pub num_classes: usize,
    /// Fraction of pixels covered by foreground shapes, in (0, 1).
    pub target_foreground_ratio: f64,
    /// Min/max object diameter in pixels.
    pub scale_range: (f64, f64),
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::Config("num_images must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.num_classes > 200 {
            return Err(Error::Config("num_classes must fit 8-bit masks (< 200)".into()));
        }
        if !(self.target_foreground_ratio > 0.0 && self.target_foreground_ratio < 1.0) {
            return Err(Error::Config(format!(
                "target_foreground_ratio must lie in (0, 1), got {}",
                self.target_foreground_ratio
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo >= 2.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "scale_range must satisfy 2 <= min <= max, got ({lo}, {hi})"
            )));
        }
        let (h, w) = self.image_size;
        if hi >= h.min(w) as f64 {
            return Err(Error::Config(format!(
                "max object diameter {hi} does not fit the {h}x{w} image"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Bar,
}

/// Classes cycle through the shape kinds, so class 1 is always rectangles.
pub fn kind_for_class(class: u8) -> ShapeKind {
    match (class as usize - 1) % 3 {
        0 => ShapeKind::Rectangle,
        1 => ShapeKind::Ellipse,
        _ => ShapeKind::Bar,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ShapeRecord {
    pub class: u8,
    pub kind: ShapeKind,
    /// Pixels this shape contributed to the mask (exact, after overlap).
    pub area_px: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ImageRecord {
    pub stem: String,
    pub foreground_pixels: usize,
    pub foreground_ratio: f64,
    pub shapes: Vec<ShapeRecord>,
}

/// Written as `manifest.json` next to the generated data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub realized_foreground_ratio: f64,
    pub images: Vec<ImageRecord>,
}

pub struct SynthDataset {
    pub samples: Vec<LabeledSample>,
    pub manifest: SynthManifest,
}

struct Canvas {
    image: Array3<u8>,
    mask: Array2<u8>,
    h: usize,
    w: usize,
    foreground: usize,
}

impl Canvas {
    fn paint_shape(
        &mut self,
        class: u8,
        kind: ShapeKind,
        center: (f64, f64),
        size: (f64, f64),
        angle: f64,
        color: [f64; 3],
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let (cy, cx) = center;
        let (sy, sx) = size;
        let reach = sy.max(sx) * 0.5 + 1.0;
        let y0 = ((cy - reach).floor().max(0.0)) as usize;
        let y1 = ((cy + reach).ceil().min(self.h as f64 - 1.0)) as usize;
        let x0 = ((cx - reach).floor().max(0.0)) as usize;
        let x1 = ((cx + reach).ceil().min(self.w as f64 - 1.0)) as usize;
        let (sin_a, cos_a) = angle.sin_cos();
        let mut painted = 0usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = (y as f64 + 0.5) - cy;
                let dx = (x as f64 + 0.5) - cx;
                let inside = match kind {
                    ShapeKind::Rectangle => dx.abs() <= sx * 0.5 && dy.abs() <= sy * 0.5,
                    ShapeKind::Ellipse => {
                        let a = sx * 0.5;
                        let b = sy * 0.5;
                        (dx / a) * (dx / a) + (dy / b) * (dy / b) <= 1.0
                    }
                    ShapeKind::Bar => {
                        let u = cos_a * dx + sin_a * dy;
                        let v = -sin_a * dx + cos_a * dy;
                        u.abs() <= sx * 0.5 && v.abs() <= sy * 0.5
                    }
                };
                if !inside {
                    continue;
                }
                if class > 0 {
                    if self.mask[[y, x]] == 0 {
                        self.foreground += 1;
                    }
                    self.mask[[y, x]] = class;
                    painted += 1;
                }
                for ci in 0..3 {
                    let noise: f64 = rng.random_range(-6.0..6.0);
                    self.image[[y, x, ci]] = clamp_u8(color[ci] + noise);
                }
            }
        }
        painted
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Foreground palette: strong offsets from the background in a
/// class-dependent channel, so classes are separable by color but sit close
/// enough to the clutter to stay non-trivial.
fn class_color(class: u8, bg: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let c = class as usize;
    let mut color = bg;
    color[(c + 2) % 3] += 52.0;
    color[c % 3] -= 18.0;
    color[(c + 1) % 3] += 8.0;
    for ch in color.iter_mut() {
        *ch += rng.random_range(-12.0..12.0);
    }
    color
}

fn render_background(canvas: &mut Canvas, cfg: &SynthConfig, rng: &mut ChaCha8Rng) {
    let bg: [f64; 3] = [
        rng.random_range(70.0..115.0),
        rng.random_range(80.0..120.0),
        rng.random_range(65.0..110.0),
    ];
    // two plane waves of low-frequency texture, shared across channels
    let mut waves = Vec::new();
    for _ in 0..2 {
        let wavelength: f64 = rng.random_range(16.0..64.0);
        let dir: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.random_range(4.0..10.0);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let fy = dir.sin() / wavelength * std::f64::consts::TAU;
        let fx = dir.cos() / wavelength * std::f64::consts::TAU;
        waves.push((fy, fx, amp, phase));
    }
    for y in 0..canvas.h {
        for x in 0..canvas.w {
            let mut t = 0.0;
            for &(fy, fx, amp, phase) in &waves {
                t += amp * (fy * y as f64 + fx * x as f64 + phase).sin();
            }
            for ci in 0..3 {
                canvas.image[[y, x, ci]] = clamp_u8(bg[ci] + t);
            }
        }
    }
    // clutter: unlabeled low-contrast blobs (hard background negatives)
    let n_clutter = rng.random_range(5..11);
    for _ in 0..n_clutter {
        let d1: f64 = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1 * 1.5);
        let d2: f64 = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1 * 1.5);
        let kind = if rng.random_bool(0.5) {
            ShapeKind::Ellipse
        } else {
            ShapeKind::Rectangle
        };
        let lum: f64 = rng.random_range(-26.0..26.0);
        let color = [
            bg[0] + lum + rng.random_range(-6.0..6.0),
            bg[1] + lum + rng.random_range(-6.0..6.0),
            bg[2] + lum + rng.random_range(-6.0..6.0),
        ];
        let cy = rng.random_range(0.0..canvas.h as f64);
        let cx = rng.random_range(0.0..canvas.w as f64);
        canvas.paint_shape(0, kind, (cy, cx), (d1, d2), 0.0, color, rng);
    }
    // per-pixel sensor noise
    for v in canvas.image.iter_mut() {
        let noise: f64 = rng.random_range(-7.0..7.0);
        *v = clamp_u8(*v as f64 + noise);
    }
}

/// One attempt at an image; `Err` means the foreground budget could not be
/// met and the caller should retry with a fresh substream.
fn render_image(
    cfg: &SynthConfig,
    index: usize,
    retry: u64,
) -> std::result::Result<(LabeledSample, ImageRecord), ()> {
    let (h, w) = cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0x5359, index as u64, retry]));
    let mut canvas = Canvas {
        image: Array3::zeros((h, w, 3)),
        mask: Array2::zeros((h, w)),
        h,
        w,
        foreground: 0,
    };
    render_background(&mut canvas, cfg, &mut rng);
    let bg_probe = [
        canvas.image[[h / 2, w / 2, 0]] as f64,
        canvas.image[[h / 2, w / 2, 1]] as f64,
        canvas.image[[h / 2, w / 2, 2]] as f64,
    ];

    let target = cfg.target_foreground_ratio * (h * w) as f64;
    let lo = 0.84 * target;
    let hi = 1.18 * target;
    let mut shapes = Vec::new();
    let mut class_cursor: u8 = 1 + (index % (cfg.num_classes - 1)) as u8;
    let (dmin, dmax) = cfg.scale_range;
    for _attempt in 0..200 {
        if (canvas.foreground as f64) >= lo {
            break;
        }
        let class = class_cursor;
        class_cursor = if class_cursor as usize >= cfg.num_classes - 1 {
            1
        } else {
            class_cursor + 1
        };
        let kind = kind_for_class(class);
        let remaining = target - canvas.foreground as f64;
        // draw a size, shrinking toward the minimum when the budget is tight
        let mut d1: f64 = rng.random_range(dmin..=dmax);
        let mut d2: f64 = rng.random_range(dmin..=dmax);
        let (mut size, mut angle) = match kind {
            ShapeKind::Rectangle => {
                d1 = d1.round().max(2.0);
                d2 = d2.round().max(2.0);
                ((d1, d2), 0.0)
            }
            ShapeKind::Ellipse => ((d1, d2), 0.0),
            ShapeKind::Bar => {
                let short = (d1 * 0.35).max(2.0);
                let long = d1 * 1.7;
                ((short, long), rng.random_range(0.0..std::f64::consts::PI))
            }
        };
        let mut est = estimate_area(kind, size);
        let mut shrink_guard = 0;
        while est > remaining.max(estimate_area(kind, minimal_size(kind, dmin))) * 1.4
            && shrink_guard < 8
        {
            size = (size.0 * 0.8, size.1 * 0.8);
            if size.0 < 2.0 || size.1 < 2.0 {
                size = minimal_size(kind, dmin);
                break;
            }
            est = estimate_area(kind, size);
            shrink_guard += 1;
        }
        if kind == ShapeKind::Rectangle {
            size = (size.0.round().max(2.0), size.1.round().max(2.0));
        }
        if kind != ShapeKind::Bar {
            angle = 0.0;
        }
        if canvas.foreground as f64 + estimate_area(kind, size) > hi {
            // cannot fit even the shrunken shape inside the band
            if (canvas.foreground as f64) >= 0.8 * target {
                break;
            }
            continue;
        }
        let reach = size.0.max(size.1) * 0.5 + 1.0;
        if 2.0 * reach + 2.0 >= h.min(w) as f64 {
            continue;
        }
        let cy = rng.random_range(reach..(h as f64 - reach));
        let cx = rng.random_range(reach..(w as f64 - reach));
        let color = class_color(class, bg_probe, &mut rng);
        let painted = canvas.paint_shape(class, kind, (cy, cx), (size.1, size.0), angle, color, &mut rng);
        if painted > 0 {
            shapes.push(ShapeRecord {
                class,
                kind,
                area_px: painted,
            });
        }
    }

    let fg = canvas.foreground as f64;
    if fg < 0.8 * target || fg > 1.2 * target {
        return Err(());
    }
    let stem = format!("synth_{index:05}");
    let record = ImageRecord {
        stem: stem.clone(),
        foreground_pixels: canvas.foreground,
        foreground_ratio: fg / (h * w) as f64,
        shapes,
    };
    Ok((
        LabeledSample {
            stem,
            image: canvas.image,
            mask: canvas.mask,
        },
        record,
    ))
}

fn minimal_size(kind: ShapeKind, dmin: f64) -> (f64, f64) {
    match kind {
        ShapeKind::Rectangle | ShapeKind::Ellipse => (dmin.max(2.0), dmin.max(2.0)),
        ShapeKind::Bar => ((dmin * 0.35).max(2.0), dmin * 1.2),
    }
}

fn estimate_area(kind: ShapeKind, size: (f64, f64)) -> f64 {
    match kind {
        ShapeKind::Rectangle => size.0 * size.1,
        ShapeKind::Ellipse => std::f64::consts::FRAC_PI_4 * size.0 * size.1,
        ShapeKind::Bar => size.0 * size.1,
    }
}

/// Generates the dataset; fails if some image cannot reach the foreground
/// budget within the retry allowance (infeasible ratio/scale combinations).
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.num_images);
    let mut records = Vec::with_capacity(cfg.num_images);
    let mut fg_total = 0u64;
    for index in 0..cfg.num_images {
        let mut produced = None;
        for retry in 0..25u64 {
            if let Ok(ok) = render_image(cfg, index, retry) {
                produced = Some(ok);
                break;
            }
        }
        let (sample, record) = produced.ok_or_else(|| {
            Error::Data(format!(
                "image {index}: could not reach foreground ratio {} with diameters in {:?} after 25 retries",
                cfg.target_foreground_ratio, cfg.scale_range
            ))
        })?;
        fg_total += record.foreground_pixels as u64;
        samples.push(sample);
        records.push(record);
    }
    let (h, w) = cfg.image_size;
    let realized = fg_total as f64 / (cfg.num_images * h * w) as f64;
    let rel = (realized - cfg.target_foreground_ratio).abs() / cfg.target_foreground_ratio;
    if rel > 0.2 {
        return Err(Error::Data(format!(
            "realized foreground ratio {realized:.5} deviates more than 20% from target {}",
            cfg.target_foreground_ratio
        )));
    }
    Ok(SynthDataset {
        samples,
        manifest: SynthManifest {
            config: cfg.clone(),
            realized_foreground_ratio: realized,
            images: records,
        },
    })
}
