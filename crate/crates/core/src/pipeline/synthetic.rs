use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{BoundingBox, FrameSequence, GroundTruthObject, Image, LabeledImage};
use crate::error::{ensure, Result};
use crate::exec::Execution;
use crate::nn;

/// Shape drawn for each class, in class-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Cross,
    Diamond,
    Ring,
    Frame,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Square,
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::Ring,
        ShapeKind::Frame,
        ShapeKind::Bar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disk => "disk",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::Ring => "ring",
            ShapeKind::Frame => "frame",
            ShapeKind::Bar => "bar",
        }
    }

    /// Whether the point `(u, v)` of the unit box belongs to the shape.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            ShapeKind::Square | ShapeKind::Bar => true,
            ShapeKind::Disk => r2 <= 0.25,
            ShapeKind::Triangle => du.abs() <= v / 2.0,
            ShapeKind::Cross => du.abs() <= 1.0 / 6.0 || dv.abs() <= 1.0 / 6.0,
            ShapeKind::Diamond => du.abs() + dv.abs() <= 0.5,
            ShapeKind::Ring => (0.09..=0.25).contains(&r2),
            ShapeKind::Frame => du.abs() >= 0.3 || dv.abs() >= 0.3,
        }
    }

    /// Box height for a box of width `size`.
    fn height_for(self, size: usize) -> usize {
        match self {
            ShapeKind::Bar => (size / 2).max(4),
            _ => size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Box side range in pixels (inclusive).
    pub min_size: usize,
    pub max_size: usize,
    pub max_objects: usize,
    pub seed: u64,
    /// Ids are `{prefix}{index:06}`.
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_images: 100,
            num_classes: 3,
            height: 48,
            width: 48,
            min_size: 12,
            max_size: 22,
            max_objects: 3,
            seed: 0,
            id_prefix: "syn".into(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (2..=8).contains(&self.num_classes),
            Argument,
            "num_classes must be in [2, 8], got {}",
            self.num_classes
        );
        ensure!(
            self.min_size >= 4 && self.min_size <= self.max_size,
            Argument,
            "invalid size range {}..={}",
            self.min_size,
            self.max_size
        );
        ensure!(
            self.max_size + 2 <= self.height.min(self.width),
            Argument,
            "shapes of size {} do not fit a {}x{} image",
            self.max_size,
            self.height,
            self.width
        );
        ensure!(self.max_objects >= 1, Argument, "max_objects must be at least 1");
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        ShapeKind::ALL[..self.num_classes].iter().map(|k| k.name().to_string()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Placed {
    kind: ShapeKind,
    label: usize,
    x0: i64,
    y0: i64,
    w: usize,
    h: usize,
    color: [f32; 3],
}

impl Placed {
    fn bbox(&self) -> BoundingBox {
        BoundingBox::new(
            self.x0 as f64,
            self.y0 as f64,
            (self.x0 + self.w as i64) as f64,
            (self.y0 + self.h as i64) as f64,
        )
        .expect("positive size")
    }

    /// Boxes apart by at least one pixel.
    fn separated(&self, other: &Placed) -> bool {
        self.x0 + self.w as i64 + 1 <= other.x0
            || other.x0 + other.w as i64 + 1 <= self.x0
            || self.y0 + self.h as i64 + 1 <= other.y0
            || other.y0 + other.h as i64 + 1 <= self.y0
    }

    fn covers(&self, x: usize, y: usize) -> bool {
        let u = (x as f64 + 0.5 - self.x0 as f64) / self.w as f64;
        let v = (y as f64 + 0.5 - self.y0 as f64) / self.h as f64;
        (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) && self.kind.contains(u, v)
    }
}

/// Smooth two-wave texture on a dark base colour.
#[derive(Clone, Copy, Debug)]
struct Background {
    base: [f32; 3],
    waves: [(f64, f64, f64, f64); 2],
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut wave = || {
            (
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.03..0.08),
            )
        };
        let waves = [wave(), wave()];
        Self {
            base: [0; 3].map(|_| rng.random_range(0.1..0.4)),
            waves,
        }
    }

    fn value(&self, c: usize, x: usize, y: usize) -> f32 {
        let t: f64 = self
            .waves
            .iter()
            .map(|&(fx, fy, phase, amp)| amp * (fx * x as f64 + fy * y as f64 + phase + c as f64).sin())
            .sum();
        self.base[c] + t as f32
    }
}

fn sample_shape(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Placed {
    let label = rng.random_range(0..config.num_classes);
    shape_of_class(config, label, rng)
}

fn shape_of_class(config: &SyntheticConfig, label: usize, rng: &mut ChaCha8Rng) -> Placed {
    let kind = ShapeKind::ALL[label];
    let w = rng.random_range(config.min_size..=config.max_size);
    let h = kind.height_for(w);
    Placed {
        kind,
        label,
        x0: rng.random_range(0..=(config.width - w)) as i64,
        y0: rng.random_range(0..=(config.height - h)) as i64,
        w,
        h,
        color: [0; 3].map(|_| rng.random_range(0.6..1.0)),
    }
}

fn render(
    id: String,
    config: &SyntheticConfig,
    background: &Background,
    shapes: &[Placed],
    rng: &mut ChaCha8Rng,
) -> Result<(Image, Vec<Vec<bool>>)> {
    let (h, w) = (config.height, config.width);
    let mut px = vec![0f32; 3 * h * w];
    let mut masks = vec![vec![false; h * w]; shapes.len()];
    for y in 0..h {
        for x in 0..w {
            let owner = shapes.iter().position(|s| s.covers(x, y));
            if let Some(k) = owner {
                masks[k][y * w + x] = true;
            }
            for c in 0..3 {
                let v = match owner {
                    Some(k) => shapes[k].color[c],
                    None => background.value(c, x, y),
                };
                let noise = rng.random_range(-0.03f32..0.03);
                px[(c * h + y) * w + x] = (v + noise).clamp(0.0, 1.0);
            }
        }
    }
    Ok((Image::new(id, h, w, px)?, masks))
}

/// A rendered image with one pixel mask per object, in annotation order.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub labeled: LabeledImage,
    pub masks: Vec<Vec<bool>>,
}

/// Renders image `index` of the dataset described by `config`. Each image
/// draws from its own seeded stream, so any subset renders identically.
pub fn render_sample(config: &SyntheticConfig, index: usize) -> Result<SyntheticSample> {
    config.validate()?;
    let mut rng = nn::seeded_rng(nn::mix_seed(config.seed, &[index as u64]));
    let background = Background::sample(&mut rng);
    let count = rng.random_range(1..=config.max_objects);
    let mut shapes: Vec<Placed> = Vec::with_capacity(count);
    for _ in 0..count {
        for _ in 0..50 {
            let s = sample_shape(config, &mut rng);
            if shapes.iter().all(|o| o.separated(&s)) {
                shapes.push(s);
                break;
            }
        }
    }
    let id = format!("{}{index:06}", config.id_prefix);
    let (image, masks) = render(id, config, &background, &shapes, &mut rng)?;
    let objects = shapes
        .iter()
        .map(|s| GroundTruthObject {
            bbox: s.bbox(),
            label: s.label,
        })
        .collect();
    Ok(SyntheticSample {
        labeled: LabeledImage { image, objects },
        masks,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub classes: Vec<String>,
    pub samples: Vec<LabeledImage>,
}

/// Images of 1 to `max_objects` separated shapes (class = shape) on
/// textured backgrounds, with exact boxes. Deterministic in the seed.
pub fn generate_synthetic_dataset(config: &SyntheticConfig, exec: Execution) -> Result<SyntheticDataset> {
    config.validate()?;
    let indices: Vec<usize> = (0..config.num_images).collect();
    let samples = exec.try_map(&indices, |&i| render_sample(config, i).map(|s| s.labeled))?;
    Ok(SyntheticDataset {
        classes: config.class_names(),
        samples,
    })
}

/// A clip of shapes drifting over a fixed background, with per-frame boxes.
/// Shapes stay inside the frame and never touch each other. Each track has
/// its own class, so a clip covers as many classes as `max_objects` allows
/// and its mAP averages over the same classes as a full image set.
pub fn synthetic_video(
    config: &SyntheticConfig,
    num_frames: usize,
    fps: f64,
) -> Result<(FrameSequence, Vec<Vec<GroundTruthObject>>)> {
    config.validate()?;
    let mut rng = nn::seeded_rng(nn::mix_seed(config.seed, &[u64::MAX]));
    let background = Background::sample(&mut rng);
    let mut classes: Vec<usize> = (0..config.num_classes).collect();
    classes.shuffle(&mut rng);
    classes.truncate(config.max_objects);
    let position = |p: &Placed, vx: f64, vy: f64, t: usize| -> Placed {
        let max_x = (config.width - p.w) as f64;
        let max_y = (config.height - p.h) as f64;
        let bounce = |start: f64, v: f64, max: f64| -> i64 {
            if max == 0.0 {
                return 0;
            }
            let period = 2.0 * max;
            let z = (start + v * t as f64).rem_euclid(period);
            (if z > max { period - z } else { z }).round() as i64
        };
        Placed {
            x0: bounce(p.x0 as f64, vx, max_x),
            y0: bounce(p.y0 as f64, vy, max_y),
            ..*p
        }
    };
    // Each round places every track at a lower speed than the last; the
    // final round is static. A track that still does not fit is dropped.
    const ROUNDS: usize = 20;
    const TRIES: usize = 50;
    let mut tracks: Vec<(Placed, f64, f64)> = Vec::new();
    for round in 0..ROUNDS {
        let speed = 0.8 * (1.0 - round as f64 / (ROUNDS - 1) as f64);
        tracks.clear();
        for &label in &classes {
            for _ in 0..TRIES {
                let s = shape_of_class(config, label, &mut rng);
                let (vx, vy) = (rng.random_range(-1.0..1.0) * speed, rng.random_range(-1.0..1.0) * speed);
                let clear = (0..num_frames).all(|t| {
                    let a = position(&s, vx, vy, t);
                    tracks.iter().all(|(o, ovx, ovy)| position(o, *ovx, *ovy, t).separated(&a))
                });
                if clear {
                    tracks.push((s, vx, vy));
                    break;
                }
            }
        }
        if tracks.len() == classes.len() {
            break;
        }
    }
    let mut frames = Vec::with_capacity(num_frames);
    let mut truth = Vec::with_capacity(num_frames);
    for t in 0..num_frames {
        let shapes: Vec<Placed> = tracks.iter().map(|(p, vx, vy)| position(p, *vx, *vy, t)).collect();
        let (img, _) = render(format!("{:06}", t + 1), config, &background, &shapes, &mut rng)?;
        frames.push(img);
        truth.push(
            shapes
                .iter()
                .map(|s| GroundTruthObject {
                    bbox: s.bbox(),
                    label: s.label,
                })
                .collect(),
        );
    }
    Ok((FrameSequence::new(frames, fps)?, truth))
}
