//! Weak and strong augmentations.
//!
//! Weak: horizontal flip with probability 0.5.
//!
//! Strong, applied in this order:
//!
//! | stage          | prob | parameters                                   |
//! |----------------|------|----------------------------------------------|
//! | flip           | 0.5  |                                              |
//! | channel jitter | 0.8  | per-channel gain in [0.6, 1.4]               |
//! | grayscale      | 0.2  | luma weights 0.299 / 0.587 / 0.114           |
//! | blur           | 0.5  | 3x3 gaussian, sigma in [0.1, 2.0]            |
//! | cutout 1       | 0.7  | scale (0.05, 0.2), ratio (0.3, 3.3)          |
//! | cutout 2       | 0.5  | scale (0.02, 0.2), ratio (0.1, 6)            |
//! | cutout 3       | 0.3  | scale (0.02, 0.2), ratio (0.05, 8)           |
//!
//! Cutout scale is the fraction of image area erased, ratio the h/w aspect,
//! sampled log-uniformly. Erased pixels are filled with uniform noise.
//! Only the flip moves boxes.

use rand::Rng;

use super::{Annotation, Image, Scene};
use crate::boxes::BBox;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugKind {
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutout {
    pub prob: f64,
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrongParams {
    pub jitter_prob: f64,
    pub jitter_range: (f64, f64),
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub cutouts: [Cutout; 3],
}

impl Default for StrongParams {
    fn default() -> Self {
        StrongParams {
            jitter_prob: 0.8,
            jitter_range: (0.6, 1.4),
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            cutouts: [
                Cutout { prob: 0.7, scale: (0.05, 0.2), ratio: (0.3, 3.3) },
                Cutout { prob: 0.5, scale: (0.02, 0.2), ratio: (0.1, 6.0) },
                Cutout { prob: 0.3, scale: (0.02, 0.2), ratio: (0.05, 8.0) },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    pub kind: AugKind,
    pub seed: u64,
    pub flip_prob: f64,
    pub strong: StrongParams,
}

impl AugmentationSpec {
    pub fn weak(seed: u64) -> Self {
        AugmentationSpec { kind: AugKind::Weak, seed, flip_prob: 0.5, strong: StrongParams::default() }
    }

    pub fn strong(seed: u64) -> Self {
        AugmentationSpec { kind: AugKind::Strong, ..AugmentationSpec::weak(seed) }
    }

    /// Spec for view `view` of scene `scene_id` at training step `step`.
    pub fn for_view(kind: AugKind, base_seed: u64, scene_id: u64, step: u64, view: u64) -> Self {
        let seed = seeds::derive_seed(base_seed, &[seeds::AUGMENT, scene_id, step, view]);
        match kind {
            AugKind::Weak => AugmentationSpec::weak(seed),
            AugKind::Strong => AugmentationSpec::strong(seed),
        }
    }
}

/// Geometry of a view relative to its source scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformRecord {
    pub flipped: bool,
    pub width: f64,
}

impl TransformRecord {
    pub fn identity(width: f64) -> Self {
        TransformRecord { flipped: false, width }
    }

    /// Source coordinates to view coordinates.
    pub fn forward(&self, b: &BBox) -> BBox {
        if self.flipped {
            b.hflip(self.width)
        } else {
            *b
        }
    }

    /// View coordinates back to source coordinates.
    pub fn inverse(&self, b: &BBox) -> BBox {
        // a flip is its own inverse
        self.forward(b)
    }

    /// Maps a box from the view described by `self` into the view described
    /// by `to`.
    pub fn map_to(&self, to: &TransformRecord, b: &BBox) -> BBox {
        to.forward(&self.inverse(b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub image: Image,
    pub annotations: Vec<Annotation>,
    pub record: TransformRecord,
}

pub fn apply_augmentation(scene: &Scene, spec: &AugmentationSpec) -> AugmentedView {
    let mut rng = seeds::rng_for(spec.seed, &[]);
    let mut img = scene.image.clone();
    let record = TransformRecord { flipped: rng.random_bool(spec.flip_prob), width: img.width as f64 };
    if record.flipped {
        hflip_image(&mut img);
    }
    if spec.kind == AugKind::Strong {
        let p = &spec.strong;
        // every draw happens regardless of the coin so that streams stay
        // aligned across specs that differ only in probabilities
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(p.jitter_range.0..=p.jitter_range.1));
        if rng.random_bool(p.jitter_prob) {
            for px in img.data.chunks_mut(img.channels) {
                for (v, g) in px.iter_mut().zip(jitter.iter().cycle()) {
                    *v = (*v * g).clamp(0.0, 1.0);
                }
            }
        }
        if rng.random_bool(p.grayscale_prob) {
            grayscale(&mut img);
        }
        let sigma = rng.random_range(p.blur_sigma.0..=p.blur_sigma.1);
        if rng.random_bool(p.blur_prob) {
            blur3(&mut img, sigma);
        }
        for c in &p.cutouts {
            if rng.random_bool(c.prob) {
                cutout(&mut img, c, &mut rng);
            }
        }
    }
    let annotations = scene
        .annotations
        .iter()
        .map(|a| Annotation { class_id: a.class_id, bbox: record.forward(&a.bbox) })
        .collect();
    AugmentedView { image: img, annotations, record }
}

fn hflip_image(img: &mut Image) {
    let (w, c) = (img.width, img.channels);
    for row in img.data.chunks_mut(w * c) {
        for x in 0..w / 2 {
            for ch in 0..c {
                row.swap(x * c + ch, (w - 1 - x) * c + ch);
            }
        }
    }
}

fn grayscale(img: &mut Image) {
    if img.channels != 3 {
        return;
    }
    for px in img.data.chunks_mut(3) {
        let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        px.fill(l);
    }
}

fn blur3(img: &mut Image, sigma: f64) {
    let k1: [f64; 3] = {
        let e = (-1.0 / (2.0 * sigma * sigma)).exp();
        let s = 1.0 + 2.0 * e;
        [e / s, 1.0 / s, e / s]
    };
    let (h, w, c) = (img.height, img.width, img.channels);
    let src = img.data.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (dy, ky) in k1.iter().enumerate() {
                    // replicate-pad at the border
                    let yy = (y + dy).saturating_sub(1).min(h - 1);
                    for (dx, kx) in k1.iter().enumerate() {
                        let xx = (x + dx).saturating_sub(1).min(w - 1);
                        acc += ky * kx * src[(yy * w + xx) * c + ch];
                    }
                }
                img.data[(y * w + x) * c + ch] = acc.clamp(0.0, 1.0);
            }
        }
    }
}

fn cutout(img: &mut Image, spec: &Cutout, rng: &mut impl Rng) {
    let (h, w) = (img.height as f64, img.width as f64);
    let area = h * w;
    for _ in 0..10 {
        let target = area * rng.random_range(spec.scale.0..=spec.scale.1);
        let log_r = rng.random_range(spec.ratio.0.ln()..=spec.ratio.1.ln());
        let ratio = log_r.exp();
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= img.height || ew >= img.width {
            continue;
        }
        let y0 = rng.random_range(0..=img.height - eh);
        let x0 = rng.random_range(0..=img.width - ew);
        let c = img.channels;
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                for ch in 0..c {
                    img.data[(y * img.width + x) * c + ch] = rng.random();
                }
            }
        }
        return;
    }
}
