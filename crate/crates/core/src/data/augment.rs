use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation angle is drawn from `U(-rotation_degrees, +rotation_degrees)`.
    pub rotation_degrees: f64,
    pub flip_probability: f64,
    /// Contrast multiplier range `(lo, hi)`.
    pub contrast_range: (f64, f64),
    /// Noise sigma is drawn from `U(0, noise_sigma_max)`.
    pub noise_sigma_max: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_degrees: 10.0,
            flip_probability: 0.5,
            contrast_range: (0.8, 1.2),
            noise_sigma_max: 0.05,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn disabled() -> Self {
        AugmentConfig {
            rotation_degrees: 0.0,
            flip_probability: 0.0,
            contrast_range: (1.0, 1.0),
            noise_sigma_max: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.contrast_range;
        let ok = self.rotation_degrees >= 0.0
            && self.rotation_degrees.is_finite()
            && (0.0..=1.0).contains(&self.flip_probability)
            && lo.is_finite()
            && hi.is_finite()
            && lo <= hi
            && self.noise_sigma_max >= 0.0
            && self.noise_sigma_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation settings {self:?}")))
        }
    }
}

/// The random draws for one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_degrees: f64,
    pub flip: bool,
    pub contrast: f64,
    pub noise_sigma: f64,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// The generator for sample `index` of `epoch`: a pure function of the key.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(b"augment\0");
    ChaCha8Rng::from_seed(key)
}

fn draw(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> AugmentParams {
    let r = cfg.rotation_degrees;
    AugmentParams {
        angle_degrees: uniform(rng, -r, r),
        flip: rng.random::<f64>() < cfg.flip_probability,
        contrast: uniform(rng, cfg.contrast_range.0, cfg.contrast_range.1),
        noise_sigma: uniform(rng, 0.0, cfg.noise_sigma_max),
    }
}

/// The transform parameters `augment` would use for this key.
pub fn sample_params(cfg: &AugmentConfig, epoch: u64, index: u64) -> AugmentParams {
    draw(cfg, &mut sample_rng(cfg.seed, epoch, index))
}

/// Rotates every channel of a C×H×W tensor by `degrees` (counter-clockwise
/// in image coordinates) about the image centre, bilinear, filling with 0.
pub fn rotate(t: &Tensor, degrees: f64) -> Result<Tensor> {
    let (c, h, w) = chw(t)?;
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0f32; t.numel()];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            // inverse rotation maps each output pixel back to its source
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            for ch in 0..c {
                let p = &t.data()[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[ch * h * w + y * w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            op: "augment",
            detail: format!("expected C×H×W, got {:?}", t.shape()),
        }),
    }
}

/// Rotation, horizontal flip, contrast scaling and Gaussian noise, in that
/// order, all drawn from the `(cfg.seed, epoch, index)` key. The same noise
/// field is added to every channel so replicated grayscale stays grayscale.
pub fn augment(t: &Tensor, cfg: &AugmentConfig, epoch: u64, index: u64) -> Result<Tensor> {
    let (c, h, w) = chw(t)?;
    let mut rng = sample_rng(cfg.seed, epoch, index);
    let p = draw(cfg, &mut rng);

    let mut out = if p.angle_degrees != 0.0 {
        rotate(t, p.angle_degrees)?
    } else {
        t.clone()
    };
    if p.flip {
        for row in out.data_mut().chunks_mut(w) {
            row.reverse();
        }
    }
    if p.contrast != 1.0 {
        let k = p.contrast as f32;
        out.data_mut().iter_mut().for_each(|v| *v *= k);
    }
    if p.noise_sigma > 0.0 {
        let noise: Vec<f32> = (0..h * w)
            .map(|_| (p.noise_sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        for plane in out.data_mut().chunks_mut(h * w).take(c) {
            plane.iter_mut().zip(&noise).for_each(|(v, n)| *v += n);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(s: usize) -> Tensor {
        let plane: Vec<f32> = (0..s * s).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect();
        let mut data = plane.clone();
        data.extend_from_slice(&plane);
        data.extend_from_slice(&plane);
        Tensor::new(vec![3, s, s], data).unwrap()
    }

    #[test]
    fn disabled_is_identity() {
        let t = image(24);
        let cfg = AugmentConfig::disabled();
        for i in 0..20 {
            assert_eq!(augment(&t, &cfg, 3, i).unwrap(), t);
        }
    }

    #[test]
    fn same_key_same_output_different_epoch_differs() {
        let t = image(24);
        let cfg = AugmentConfig {
            seed: 5,
            ..Default::default()
        };
        let a = augment(&t, &cfg, 1, 9).unwrap();
        assert_eq!(a, augment(&t, &cfg, 1, 9).unwrap());
        assert_ne!(a, augment(&t, &cfg, 2, 9).unwrap());
        assert_ne!(a, augment(&t, &cfg, 1, 10).unwrap());
    }

    #[test]
    fn flip_only_mirrors_rows() {
        let t = image(6);
        let cfg = AugmentConfig {
            flip_probability: 1.0,
            ..AugmentConfig::disabled()
        };
        let out = augment(&t, &cfg, 0, 0).unwrap();
        for ch in 0..3 {
            for y in 0..6 {
                for x in 0..6 {
                    let i = ch * 36 + y * 6;
                    assert_eq!(out.data()[i + x], t.data()[i + 5 - x]);
                }
            }
        }
    }

    #[test]
    fn rotate_quarter_turn_is_exact_permutation() {
        let t = image(5);
        let r = rotate(&t, 90.0).unwrap();
        let back = rotate(&rotate(&rotate(&r, 90.0).unwrap(), 90.0).unwrap(), 90.0).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_ne!(r, t);
    }

    #[test]
    fn rotation_fills_corners_with_zero() {
        let t = Tensor::full(&[1, 21, 21], 1.0f32);
        let r = rotate(&t, 45.0).unwrap();
        assert_eq!(r.data()[0], 0.0);
        assert_eq!(r.data()[10 * 21 + 10], 1.0);
    }

    #[test]
    fn contrast_scales_and_noise_is_shared_across_channels() {
        let t = image(8);
        let cfg = AugmentConfig {
            contrast_range: (2.0, 2.0),
            noise_sigma_max: 0.1,
            ..AugmentConfig::disabled()
        };
        let out = augment(&t, &cfg, 0, 1).unwrap();
        let d = out.data();
        assert_eq!(&d[..64], &d[64..128]);
        assert_eq!(&d[..64], &d[128..]);
        let no_noise = augment(
            &t,
            &AugmentConfig {
                noise_sigma_max: 0.0,
                ..cfg.clone()
            },
            0,
            1,
        )
        .unwrap();
        for (a, b) in no_noise.data().iter().zip(t.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn validate_rejects_bad_settings() {
        assert!(AugmentConfig::default().validate().is_ok());
        for bad in [
            AugmentConfig {
                rotation_degrees: -1.0,
                ..Default::default()
            },
            AugmentConfig {
                flip_probability: 1.5,
                ..Default::default()
            },
            AugmentConfig {
                contrast_range: (1.2, 0.8),
                ..Default::default()
            },
            AugmentConfig {
                noise_sigma_max: -0.1,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
