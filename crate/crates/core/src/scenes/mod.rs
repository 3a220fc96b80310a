//! Procedural detection scenes.
//!
//! A scene is a 64x64 RGB image with 1 to 6 axis-aligned objects drawn over
//! a noisy background. Each of the five classes has its own pattern and base
//! color, so grayscale and color jitter make classification harder without
//! making it impossible:
//!
//! | class | pattern                       | base color |
//! |-------|-------------------------------|------------|
//! | 0     | solid rectangle               | red        |
//! | 1     | horizontal stripes, period 4  | green      |
//! | 2     | checkerboard, 3 px cells      | blue       |
//! | 3     | filled ellipse                | yellow     |
//! | 4     | hollow frame, 2 px border     | magenta    |
//!
//! Classes are drawn uniformly, object counts uniformly from `1..=max_objects`,
//! box sides from `[min_side, max_side]` px. Every object is alpha-blended
//! with an opacity in `[0.45, 1]` so some boundaries are faint, and objects
//! overlap each other up to IoU 0.3. Later objects occlude earlier ones.
//!
//! Scenes are pure functions of `(seed, id)`; images never need to be stored.

mod augment;
mod manifest;

pub use augment::{apply_augmentation, AugKind, AugmentationSpec, AugmentedView, StrongParams, TransformRecord};
pub use manifest::{read_manifest, write_manifest, write_ppm, Manifest, ManifestRecord};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::seeds;

pub const IMAGE_SIZE: usize = 64;
pub const CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 5;
pub const MAX_OBJECTS: usize = 6;
pub const MIN_BOX_AREA: f64 = 16.0;
pub const MAX_OVERLAP_IOU: f64 = 0.3;

const CLASS_COLORS: [[f64; 3]; NUM_CLASSES] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.80, 0.25],
    [0.20, 0.30, 0.90],
    [0.90, 0.85, 0.20],
    [0.85, 0.25, 0.85],
];

/// Row-major HWC image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.idx(y, x, c);
        self.data[i] = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub split: Split,
    pub image: Image,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub max_objects: usize,
    pub min_side: f64,
    pub max_side: f64,
    pub max_overlap_iou: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: IMAGE_SIZE,
            max_objects: MAX_OBJECTS,
            min_side: 8.0,
            max_side: 22.0,
            max_overlap_iou: MAX_OVERLAP_IOU,
        }
    }
}

/// Draws the annotations of scene `id` (no pixels).
fn sample_layout(cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<Annotation> {
    let count = rng.random_range(1..=cfg.max_objects);
    let s = cfg.size as f64;
    let mut out: Vec<Annotation> = Vec::with_capacity(count);
    while out.len() < count {
        let class_id = rng.random_range(0..NUM_CLASSES);
        // placement is retried until the overlap constraint holds; the class
        // draw stays fixed so the class distribution is untouched
        loop {
            let w = rng.random_range(cfg.min_side..=cfg.max_side);
            let h = (w * rng.random_range(0.6..1.6)).clamp(cfg.min_side * 0.75, cfg.max_side);
            let x1 = rng.random_range(0.0..=(s - w));
            let y1 = rng.random_range(0.0..=(s - h));
            let bbox = BBox::new(x1, y1, x1 + w, y1 + h);
            if bbox.area() >= MIN_BOX_AREA
                && out.iter().all(|a| a.bbox.iou(&bbox) <= cfg.max_overlap_iou)
            {
                out.push(Annotation { class_id, bbox });
                break;
            }
        }
    }
    out
}

fn pattern_mask(class_id: usize, b: &BBox, px: f64, py: f64) -> Option<f64> {
    if px < b.x1 || px >= b.x2 || py < b.y1 || py >= b.y2 {
        return None;
    }
    let (lx, ly) = (px - b.x1, py - b.y1);
    let on = match class_id {
        0 => true,
        1 => (ly / 2.0).floor() as i64 % 2 == 0,
        2 => ((lx / 3.0).floor() as i64 + (ly / 3.0).floor() as i64) % 2 == 0,
        3 => {
            let (cx, cy) = b.center();
            let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
            let d = ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2);
            if d > 1.0 {
                return None;
            }
            true
        }
        _ => {
            let t = 2.0;
            lx < t || ly < t || b.x2 - px <= t || b.y2 - py <= t
        }
    };
    // "off" pixels of textured classes are a darkened version of the color
    Some(if on { 1.0 } else { 0.35 })
}

/// Renders the pixels for a layout.
fn render(cfg: &SceneConfig, annotations: &[Annotation], rng: &mut impl Rng) -> Image {
    let n = cfg.size;
    let mut img = Image::filled(n, n, CHANNELS, 0.0);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.5));
    let gradient = rng.random_range(-0.15..0.15);
    for y in 0..n {
        for x in 0..n {
            let g = gradient * (x as f64 / n as f64 - 0.5);
            for (c, b) in base.iter().enumerate() {
                let noise = rng.random_range(-0.06..0.06);
                img.set(y, x, c, (b + g + noise).clamp(0.0, 1.0));
            }
        }
    }
    for a in annotations {
        let color: [f64; 3] =
            std::array::from_fn(|c| (CLASS_COLORS[a.class_id][c] + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
        let opacity = rng.random_range(0.45..=1.0);
        let b = a.bbox;
        let (y0, y1) = (b.y1.floor().max(0.0) as usize, (b.y2.ceil() as usize).min(n));
        let (x0, x1) = (b.x1.floor().max(0.0) as usize, (b.x2.ceil() as usize).min(n));
        for y in y0..y1 {
            for x in x0..x1 {
                let Some(level) = pattern_mask(a.class_id, &b, x as f64 + 0.5, y as f64 + 0.5) else {
                    continue;
                };
                for (c, col) in color.iter().enumerate() {
                    let old = img.get(y, x, c);
                    let v = (1.0 - opacity) * old + opacity * col * level;
                    img.set(y, x, c, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    img
}

/// Deterministic image and annotations of scene `id` under `seed`.
pub fn render_scene(cfg: &SceneConfig, seed: u64, id: u64) -> (Image, Vec<Annotation>) {
    let mut rng = seeds::rng_for(seed, &[seeds::SCENE, id]);
    let annotations = sample_layout(cfg, &mut rng);
    let image = render(cfg, &annotations, &mut rng);
    (image, annotations)
}

/// Scenes `0..num_scenes`; exactly `round(num_scenes * labeled_fraction)` of
/// them, chosen by a seeded shuffle, are labeled.
pub fn generate_dataset(num_scenes: usize, labeled_fraction: f64, seed: u64) -> Result<Vec<Scene>> {
    generate_dataset_with(&SceneConfig::default(), num_scenes, labeled_fraction, seed)
}

pub fn generate_dataset_with(
    cfg: &SceneConfig,
    num_scenes: usize,
    labeled_fraction: f64,
    seed: u64,
) -> Result<Vec<Scene>> {
    if num_scenes == 0 {
        return Err(Error::invalid("num_scenes must be positive"));
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::invalid(format!("labeled_fraction must be in (0, 1], got {labeled_fraction}")));
    }
    let labeled = labeled_mask(num_scenes, labeled_fraction, seed);
    Ok((0..num_scenes)
        .map(|i| {
            let (image, annotations) = render_scene(cfg, seed, i as u64);
            Scene {
                id: i as u64,
                split: if labeled[i] { Split::Labeled } else { Split::Unlabeled },
                image,
                annotations,
            }
        })
        .collect())
}

pub fn labeled_count(num_scenes: usize, labeled_fraction: f64) -> usize {
    ((num_scenes as f64 * labeled_fraction).round() as usize).min(num_scenes)
}

fn labeled_mask(num_scenes: usize, labeled_fraction: f64, seed: u64) -> Vec<bool> {
    let mut ids: Vec<usize> = (0..num_scenes).collect();
    ids.shuffle(&mut seeds::rng_for(seed, &[seeds::SPLIT]));
    let mut mask = vec![false; num_scenes];
    for &i in &ids[..labeled_count(num_scenes, labeled_fraction)] {
        mask[i] = true;
    }
    mask
}
