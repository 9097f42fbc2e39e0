use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on the standard deviation used for z-normalization.
pub const STD_FLOOR: f64 = 1e-6;

/// A single-channel image, row-major, values nominally in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                op: "image",
                detail: format!("{height}x{width} image with {} values", data.len()),
            });
        }
        Ok(ImageBuffer { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        ImageBuffer { height, width, data }
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

    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }
}

/// Bilinear resample of an `h×w` plane to `oh×ow` with half-pixel centres
/// and edge clamping.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(h, oh);
    let xs = axis(w, ow);
    let mut out = Vec::with_capacity(oh * ow);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Per-image z-normalization with population standard deviation, floored at
/// [`STD_FLOOR`]. Statistics are accumulated in double precision.
pub fn z_normalize(values: &mut [f32]) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    for v in values {
        *v = ((*v as f64 - mean) / std) as f32;
    }
}

/// Resize to `size×size`, z-normalize, and replicate to three channels.
pub fn preprocess(img: &ImageBuffer, size: usize) -> Result<Tensor> {
    if img.height < 2 || img.width < 2 {
        return Err(Error::DegenerateImage {
            height: img.height,
            width: img.width,
        });
    }
    if size == 0 {
        return Err(Error::Config("preprocess size must be positive".into()));
    }
    let mut plane = resize_bilinear(&img.data, img.height, img.width, size, size);
    z_normalize(&mut plane);
    let mut data = Vec::with_capacity(3 * plane.len());
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    Tensor::new(vec![3, size, size], data)
}
