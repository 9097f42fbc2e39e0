//! Synthetic planted-patch dataset: bright squares over a speckled
//! background, where only positives have a checkered one.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::bmp::encode_bmp_gray8;
use super::image::ImageBuffer;
use super::manifest::{Label, IMAGE_DIR};
use crate::error::{Error, Result};

/// Half-open pixel box `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl BoundingBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }

    /// Grows each side by `margin` pixels, clipped to `size×size`.
    pub fn dilate(&self, margin: usize, size: usize) -> BoundingBox {
        BoundingBox {
            y0: self.y0.saturating_sub(margin),
            x0: self.x0.saturating_sub(margin),
            y1: (self.y1 + margin).min(size),
            x1: (self.x1 + margin).min(size),
        }
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub subjects: usize,
    /// Each subject gets between 1 and this many views.
    pub max_views: usize,
    pub size: usize,
    pub positive_fraction: f64,
    /// Patch side as a fraction of the image side.
    pub patch_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            subjects: 40,
            max_views: 3,
            size: 64,
            positive_fraction: 0.5,
            patch_fraction: 0.25,
            seed: 0,
        }
    }
}

fn disjoint(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.y1 <= b.y0 || b.y1 <= a.y0 || a.x1 <= b.x0 || b.x1 <= a.x0
}

fn random_box(size: usize, side: usize, rng: &mut impl Rng) -> BoundingBox {
    let y0 = rng.random_range(0..=size - side);
    let x0 = rng.random_range(0..=size - side);
    BoundingBox {
        y0,
        x0,
        y1: y0 + side,
        x1: x0 + side,
    }
}

/// Draws one image; returns the lesion box for positives.
///
/// Every image holds two equally bright squares that do not overlap (when
/// they fit). In positives the first is checkered, which is the only thing
/// that tells the classes apart: global intensity statistics match, and a
/// network that merely finds bright regions picks the wrong square half the
/// time.
pub fn planted_patch_image(size: usize, positive: bool, patch_fraction: f64, rng: &mut impl Rng) -> (ImageBuffer, Option<BoundingBox>) {
    let tilt: f32 = rng.random_range(-0.1..0.1);
    let mut data = ImageBuffer::from_fn(size, size, |y, x| {
        let speckle: f64 = rng.sample(StandardNormal);
        let ramp = tilt * (x as f32 + y as f32) / (2 * size) as f32;
        (0.3 + ramp + 0.06 * speckle as f32).clamp(0.0, 1.0)
    })
    .data()
    .to_vec();
    let side = ((size as f64 * patch_fraction).round() as usize).clamp(1, size);
    let lesion = random_box(size, side, rng);
    let mut decoy = random_box(size, side, rng);
    if 2 * side <= size {
        while !disjoint(&lesion, &decoy) {
            decoy = random_box(size, side, rng);
        }
    }
    let cell = (side / 4).max(2);
    for (b, textured) in [(decoy, false), (lesion, positive)] {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let checker = match (textured, ((y - b.y0) / cell + (x - b.x0) / cell).is_multiple_of(2)) {
                    (false, _) => 0.0,
                    (true, true) => 0.1,
                    (true, false) => -0.1,
                };
                let jitter: f64 = rng.sample(StandardNormal);
                data[y * size + x] = (0.8 + checker + 0.03 * jitter as f32).clamp(0.0, 1.0);
            }
        }
    }
    let img = ImageBuffer::new(size, size, data).expect("same shape");
    (img, positive.then_some(lesion))
}

/// Linearly separable toy set: alternating bright (`true`) and dark squares
/// of side `3/8·size` on a noisy mid-grey background.
pub fn square_images(n: usize, size: usize, seed: u64) -> Vec<(ImageBuffer, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = size * 3 / 8;
    (0..n)
        .map(|i| {
            let bright = i % 2 == 0;
            let (y0, x0) = (rng.random_range(0..=size - side), rng.random_range(0..=size - side));
            let img = ImageBuffer::from_fn(size, size, |y, x| {
                let inside = (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x);
                let base: f32 = 0.5 + rng.random_range(-0.05..0.05);
                match (inside, bright) {
                    (true, true) => 0.95,
                    (true, false) => 0.05,
                    _ => base,
                }
            });
            (img, bright)
        })
        .collect()
}

/// One generated view.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub subject_id: u32,
    pub view_index: u32,
    pub label: Label,
    pub image: ImageBuffer,
    pub bbox: Option<BoundingBox>,
}

/// Generates the whole dataset in memory.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    if cfg.subjects < 2 || cfg.max_views == 0 || cfg.size < 2 || !(0.0..=1.0).contains(&cfg.patch_fraction) {
        return Err(Error::Config(format!("invalid synthetic dataset settings {cfg:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let positives = ((cfg.subjects as f64 * cfg.positive_fraction).round() as usize).clamp(1, cfg.subjects - 1);
    let mut out = Vec::new();
    for s in 0..cfg.subjects {
        let label = if s < positives {
            Label::Appendicitis
        } else {
            Label::NoAppendicitis
        };
        let views = rng.random_range(1..=cfg.max_views);
        for v in 1..=views {
            let (image, bbox) = planted_patch_image(cfg.size, label == Label::Appendicitis, cfg.patch_fraction, &mut rng);
            out.push(SynthSample {
                subject_id: s as u32,
                view_index: v as u32,
                label,
                image,
                bbox,
            });
        }
    }
    Ok(out)
}

/// Writes `US_Pictures/*.bmp`, `labels.csv` and `boxes.csv` under `root`.
pub fn write_dataset(root: &Path, cfg: &SynthConfig) -> Result<Vec<SynthSample>> {
    let samples = generate(cfg)?;
    let dir = root.join(IMAGE_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut labels = String::from("subject_id,diagnosis\n");
    let mut boxes = String::from("subject_id,view_index,y0,x0,y1,x1\n");
    let mut last = None;
    for s in &samples {
        let path = dir.join(format!("{}.{}.bmp", s.subject_id, s.view_index));
        std::fs::write(&path, encode_bmp_gray8(&s.image)).map_err(|e| Error::io(&path, e))?;
        if last != Some(s.subject_id) {
            let _ = writeln!(labels, "{},{}", s.subject_id, s.label);
            last = Some(s.subject_id);
        }
        if let Some(b) = s.bbox {
            let _ = writeln!(boxes, "{},{},{},{},{},{}", s.subject_id, s.view_index, b.y0, b.x0, b.y1, b.x1);
        }
    }
    for (name, text) in [("labels.csv", labels), ("boxes.csv", boxes)] {
        let p = root.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let cfg = SynthConfig {
            subjects: 6,
            size: 16,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.bbox, y.bbox);
        }
        assert_eq!(a.iter().filter(|s| s.view_index == 1 && s.label == Label::Appendicitis).count(), 3);
    }

    #[test]
    fn patch_is_brighter_than_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (img, b) = planted_patch_image(32, true, 0.25, &mut rng);
        let b = b.unwrap();
        assert_eq!(b.area(), 64);
        let (mut inside, mut outside) = (0.0, 0.0);
        for y in 0..32 {
            for x in 0..32 {
                if b.contains(y, x) {
                    inside += img.get(y, x) / 64.0;
                } else {
                    outside += img.get(y, x) / (1024.0 - 64.0);
                }
            }
        }
        assert!(inside > outside + 0.3, "{inside} vs {outside}");
        let (_, none) = planted_patch_image(32, false, 0.25, &mut rng);
        assert!(none.is_none());
    }

    #[test]
    fn dilation_clips_to_image() {
        let b = BoundingBox {
            y0: 2,
            x0: 10,
            y1: 6,
            x1: 15,
        };
        assert_eq!(
            b.dilate(4, 16),
            BoundingBox {
                y0: 0,
                x0: 6,
                y1: 10,
                x1: 16
            }
        );
    }

    #[test]
    fn writes_a_loadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            subjects: 4,
            size: 8,
            ..Default::default()
        };
        let samples = write_dataset(dir.path(), &cfg).unwrap();
        let labels = super::super::manifest::read_labels(&dir.path().join("labels.csv")).unwrap();
        assert_eq!(labels.len(), 4);
        let imgs = super::super::manifest::scan_images(dir.path()).unwrap();
        assert_eq!(imgs.len(), samples.len());
    }
}
