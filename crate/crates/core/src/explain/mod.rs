//! Grad-CAM: where in the input the network looks when it scores a view.
//!
//! The map for one input is `ReLU(Σ_k α_k A_k)`, where `A_k` are the channels
//! of a convolutional activation and `α_k` is the spatial mean of
//! `∂logit/∂A_k`. It is bilinearly upsampled to the input size and divided by
//! its maximum.

mod render;

use rayon::prelude::*;

pub use render::{read_pnm, render_overlay, write_pgm, write_ppm, OverlayFiles, Pnm, OVERLAY_ALPHA};

use crate::data::resize_bilinear;
use crate::data::synth::BoundingBox;
use crate::error::{Error, Result};
use crate::model::{Mode, Network};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Anything Grad-CAM can be run against: one eval-mode forward that exposes a
/// named activation and the pre-sigmoid score.
pub trait CamModel<T: Real>: Sync {
    /// Layer used when none is requested.
    fn default_layer(&self) -> String;

    /// Runs a 1×C×H×W `input` on `tape` and returns `(logit, activation)`,
    /// where the logit has a single element and the activation is 1×K×h×w.
    fn cam_forward(&self, tape: &mut Tape<T>, input: Var, layer: &str) -> Result<(Var, Var)>;
}

impl<T: Real> CamModel<T> for Network<T> {
    fn default_layer(&self) -> String {
        self.last_conv_name()
    }

    fn cam_forward(&self, tape: &mut Tape<T>, input: Var, layer: &str) -> Result<(Var, Var)> {
        if !self.layer_names().iter().any(|n| n == layer) {
            return Err(Error::UnknownLayer(layer.to_string()));
        }
        let bound = self.bind_all(tape, false);
        let pass = self.forward(tape, input, &bound, Mode::Eval)?;
        let act = pass.capture(layer).ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        Ok((pass.logit, act))
    }
}

#[derive(Clone, Debug, Default)]
pub struct CamOptions {
    /// Defaults to [`CamModel::default_layer`].
    pub target_layer: Option<String>,
    /// Explain the negative class by differentiating `-logit`.
    pub negate: bool,
    /// `(subject_id, view_index)` carried into the heatmap for file naming.
    pub input_ref: Option<(u32, u32)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Row-major H×W values in [0,1]; the maximum is exactly 1 unless all are 0.
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// The rectified map before upsampling and normalization, h×w.
    pub raw: Vec<f64>,
    pub raw_height: usize,
    pub raw_width: usize,
    pub source_layer: String,
    pub input_ref: Option<(u32, u32)>,
    /// Sigmoid of the logit.
    pub predicted_score: f64,
}

impl Heatmap {
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Row-major position of the first maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let i = argmax(&self.values);
        (i / self.width, i % self.width)
    }

    /// The maximal pixel nearest the centroid of all maximal pixels.
    ///
    /// Upsampling clamps at the border, so a peak in an edge cell of the raw
    /// map becomes a flat plateau and the first maximum sits on its corner
    /// rather than its middle.
    pub fn peak(&self) -> (usize, usize) {
        let top = self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let ties: Vec<(usize, usize)> = (0..self.values.len())
            .filter(|&i| self.values[i] == top)
            .map(|i| (i / self.width, i % self.width))
            .collect();
        if ties.is_empty() {
            return self.argmax();
        }
        let n = ties.len() as f64;
        let cy = ties.iter().map(|t| t.0 as f64).sum::<f64>() / n;
        let cx = ties.iter().map(|t| t.1 as f64).sum::<f64>() / n;
        let dist = |t: &(usize, usize)| (t.0 as f64 - cy).powi(2) + (t.1 as f64 - cx).powi(2);
        // min_by keeps the first of equally near candidates
        *ties.iter().min_by(|a, b| dist(a).total_cmp(&dist(b))).expect("nonempty")
    }
}

/// Index of the first maximum; 0 for an empty slice.
pub fn argmax<F: PartialOrd + Copy>(v: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Computes the Grad-CAM heatmap of one C×H×W (or 1×C×H×W) input.
pub fn gradcam<T: Real, M: CamModel<T> + ?Sized>(model: &M, input: &Tensor<T>, opts: &CamOptions) -> Result<Heatmap> {
    let input = match input.rank() {
        3 => input.clone().reshape(&[1, input.shape()[0], input.shape()[1], input.shape()[2]])?,
        4 if input.shape()[0] == 1 => input.clone(),
        _ => {
            return Err(Error::InvalidShape {
                op: "gradcam",
                detail: format!("expected one C×H×W input, got {:?}", input.shape()),
            })
        }
    };
    let (height, width) = (input.shape()[2], input.shape()[3]);
    let layer = opts.target_layer.clone().unwrap_or_else(|| model.default_layer());

    let mut tape = Tape::new();
    // the input is the only leaf that needs a gradient; that keeps every
    // activation on the differentiated path without touching the parameters
    let x = tape.leaf(input, true);
    let (logit, act) = model.cam_forward(&mut tape, x, &layer)?;
    let z = tape
        .value(logit)
        .item()
        .ok_or_else(|| Error::NotScalar(tape.value(logit).shape().to_vec()))?
        .as_f64();
    let root = if opts.negate { tape.scale(logit, -T::one())? } else { logit };
    tape.backward(root)?;

    let (_, k, h, w) = tape.value(act).dims4("gradcam activation")?;
    let a = tape.value(act).data();
    let mut raw = vec![0.0f64; h * w];
    if let Some(g) = tape.grad(act) {
        let g = g.data();
        for c in 0..k {
            let plane = c * h * w..(c + 1) * h * w;
            let alpha = g[plane.clone()].iter().map(|v| v.as_f64()).sum::<f64>() / (h * w) as f64;
            for (r, &v) in raw.iter_mut().zip(&a[plane]) {
                *r += alpha * v.as_f64();
            }
        }
    }
    raw.iter_mut().for_each(|r| *r = r.max(0.0));

    let small: Vec<f32> = raw.iter().map(|&r| r as f32).collect();
    let mut values = resize_bilinear(&small, h, w, height, width);
    let peak = values.iter().copied().fold(0.0f32, f32::max);
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(Heatmap {
        values,
        height,
        width,
        raw,
        raw_height: h,
        raw_width: w,
        source_layer: layer,
        input_ref: opts.input_ref,
        predicted_score: 1.0 / (1.0 + (-z).exp()),
    })
}

/// One positive view with a known lesion box.
#[derive(Clone, Debug)]
pub struct ProbeCase<T = f32> {
    pub input: Tensor<T>,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// Positives scored at or above the threshold.
    pub evaluated: usize,
    /// Of those, heatmap peak inside the dilated box.
    pub hits: usize,
    /// `hits / evaluated`, 0 when nothing was evaluated.
    pub rate: f64,
    pub skipped: usize,
}

/// Fraction of correctly classified positives whose heatmap [`Heatmap::peak`] falls in
/// the lesion box grown by `margin_fraction` of the image width per side.
pub fn localization_probe<T: Real, M: CamModel<T>>(
    model: &M,
    cases: &[ProbeCase<T>],
    margin_fraction: f64,
    threshold: f64,
    opts: &CamOptions,
) -> Result<ProbeReport> {
    let outcomes = cases
        .par_iter()
        .map(|case| {
            let hm = gradcam(model, &case.input, opts)?;
            if hm.predicted_score < threshold {
                return Ok(None);
            }
            let margin = (margin_fraction * hm.width as f64).round() as usize;
            let (y, x) = hm.peak();
            Ok(Some(case.bbox.dilate(margin, hm.height.max(hm.width)).contains(y, x)))
        })
        .collect::<Result<Vec<_>>>()?;
    let evaluated = outcomes.iter().flatten().count();
    let hits = outcomes.iter().flatten().filter(|&&h| h).count();
    Ok(ProbeReport {
        evaluated,
        hits,
        rate: if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 },
        skipped: cases.len() - evaluated,
    })
}
