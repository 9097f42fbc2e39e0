use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sonoresnet::data::synth::{generate, BoundingBox, SynthConfig, SynthSample};
use sonoresnet::data::{preprocess, resize_bilinear, AugmentConfig, ImageBuffer, Label, Sample};
use sonoresnet::explain::{
    argmax, gradcam, localization_probe, read_pnm, render_overlay, CamModel, CamOptions, Heatmap, ProbeCase,
};
use sonoresnet::model::{Network, NetworkConfig};
use sonoresnet::tensor::{Tape, Tensor, Var};
use sonoresnet::train::{predict_samples, run_training, RunOptions, TrainConfig};
use sonoresnet::{Error, Result};

fn noise(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `A = c · conv3x3(x)` with `K` channels, `logit = Σ_k w_k · mean(A_k) + b`.
struct LinearHead {
    kernel: Tensor<f64>,
    weights: Vec<f64>,
    bias: f64,
    scale: f64,
    /// Route the logit around the activation entirely.
    disconnected: bool,
}

impl LinearHead {
    fn new(channels: usize, weights: Vec<f64>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LinearHead {
            kernel: noise(&[channels, 1, 3, 3], &mut rng),
            weights,
            bias: 0.25,
            scale: 1.0,
            disconnected: false,
        }
    }

    fn activation(&self, x: &Tensor<f64>) -> Vec<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let k = tape.constant(self.kernel.clone());
        let a = tape.conv2d(xv, k, None, 1, 1).unwrap();
        let a = tape.scale(a, self.scale).unwrap();
        tape.value(a).data().to_vec()
    }
}

impl CamModel<f64> for LinearHead {
    fn default_layer(&self) -> String {
        "features".into()
    }

    fn cam_forward(&self, tape: &mut Tape<f64>, input: Var, layer: &str) -> Result<(Var, Var)> {
        if layer != "features" {
            return Err(Error::UnknownLayer(layer.into()));
        }
        let k = tape.constant(self.kernel.clone());
        let a = tape.conv2d(input, k, None, 1, 1)?;
        let a = tape.scale(a, self.scale)?;
        let pooled = tape.global_avg_pool(a)?;
        let flat = tape.flatten(pooled)?;
        let w = tape.constant(Tensor::new(vec![self.weights.len(), 1], self.weights.clone())?);
        let b = tape.constant(Tensor::new(vec![1], vec![self.bias])?);
        let logit = if self.disconnected {
            let s = tape.sum(input)?;
            tape.reshape(s, &[1, 1])?
        } else {
            tape.dense(flat, w, Some(b))?
        };
        Ok((logit, a))
    }
}

fn check_normalized(hm: &Heatmap, h: usize, w: usize) {
    assert_eq!((hm.height, hm.width, hm.values.len()), (h, w, h * w));
    assert!(hm.values.iter().all(|v| (0.0..=1.0).contains(v)), "value outside [0,1]");
    let max = hm.values.iter().copied().fold(0.0f32, f32::max);
    assert!(max == 0.0 || max == 1.0, "max {max}");
    assert!(hm.raw.iter().all(|&r| r >= 0.0));
}

#[test]
fn heatmaps_are_nonnegative_and_normalized_on_random_inputs() {
    let mut cfg = NetworkConfig::desk();
    cfg.seed = 11;
    let net = Network::<f32>::build(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs: Vec<Tensor> = (0..100).map(|_| noise(&[3, 64, 64], &mut rng).cast()).collect();
    let maps: Vec<Heatmap> = inputs
        .par_iter()
        .map(|x| gradcam(&net, x, &CamOptions::default()).unwrap())
        .collect();
    let mut nonzero = 0;
    for hm in &maps {
        check_normalized(hm, 64, 64);
        assert!((0.0..=1.0).contains(&hm.predicted_score));
        nonzero += hm.values.iter().any(|&v| v > 0.0) as usize;
    }
    // the check is vacuous if every map is empty
    assert!(nonzero >= 50, "{nonzero} nonzero maps");
}

#[test]
fn single_channel_map_peaks_where_the_activation_does() {
    let model = LinearHead::new(1, vec![1.7], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut checked = 0;
    for _ in 0..50 {
        let x = noise(&[1, 1, 16, 16], &mut rng);
        let a = model.activation(&x);
        let hm = gradcam(&model, &x, &CamOptions::default()).unwrap();
        check_normalized(&hm, 16, 16);
        let top = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(top > 0.0);
        assert_eq!(argmax(&hm.values), argmax(&a));
        for (v, &ai) in hm.values.iter().zip(&a) {
            assert!((*v as f64 - ai.max(0.0) / top).abs() < 1e-6);
        }
        checked += 1;
    }
    assert_eq!(checked, 50);
}

#[test]
fn negated_logit_highlights_the_opposite_evidence() {
    let model = LinearHead::new(1, vec![0.9], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = noise(&[1, 1, 12, 12], &mut rng);
    let a = model.activation(&x);
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    let opts = CamOptions {
        negate: true,
        ..Default::default()
    };
    let hm = gradcam(&model, &x, &opts).unwrap();
    assert_eq!(argmax(&hm.values), argmax(&neg));
}

#[test]
fn disconnected_or_zero_gradient_gives_zero_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = noise(&[1, 1, 8, 8], &mut rng);
    let mut model = LinearHead::new(2, vec![0.0, 0.0], 1);
    let hm = gradcam(&model, &x, &CamOptions::default()).unwrap();
    assert!(hm.values.iter().all(|&v| v == 0.0));
    model.weights = vec![1.0, -1.0];
    model.disconnected = true;
    let hm = gradcam(&model, &x, &CamOptions::default()).unwrap();
    assert!(hm.values.iter().all(|&v| v == 0.0));
    assert!(hm.raw.iter().all(|&v| v == 0.0));
}

#[test]
fn scaling_activations_scales_raw_map_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = noise(&[1, 1, 10, 10], &mut rng);
    let mut model = LinearHead::new(4, vec![0.8, -0.3, 0.5, 1.1], 6);
    let base = gradcam(&model, &x, &CamOptions::default()).unwrap();
    assert!(base.raw.iter().any(|&r| r > 0.0));
    for c in [0.5, 2.0, 10.0] {
        model.scale = c;
        let hm = gradcam(&model, &x, &CamOptions::default()).unwrap();
        for (r, r0) in hm.raw.iter().zip(&base.raw) {
            assert!((r - c * r0).abs() <= 1e-9 * (1.0 + c * r0.abs()), "{r} vs {c}·{r0}");
        }
        for (v, v0) in hm.values.iter().zip(&base.values) {
            assert!((v - v0).abs() <= 1e-6);
        }
    }
}

#[test]
fn identical_inputs_give_identical_maps() {
    let net = Network::<f32>::build(&NetworkConfig::desk()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<Tensor> = (0..8).map(|_| noise(&[3, 64, 64], &mut rng).cast()).collect();
    let serial: Vec<Heatmap> = inputs.iter().map(|x| gradcam(&net, x, &CamOptions::default()).unwrap()).collect();
    let parallel: Vec<Heatmap> = inputs.par_iter().map(|x| gradcam(&net, x, &CamOptions::default()).unwrap()).collect();
    let again: Vec<Heatmap> = inputs.iter().map(|x| gradcam(&net, x, &CamOptions::default()).unwrap()).collect();
    for ((a, b), c) in serial.iter().zip(&parallel).zip(&again) {
        let bits = |h: &Heatmap| h.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
        assert_eq!(bits(a), bits(c));
        assert_eq!(a.predicted_score.to_bits(), b.predicted_score.to_bits());
    }
}

#[test]
fn unknown_target_layer_is_rejected() {
    let net = Network::<f32>::build(&NetworkConfig::desk()).unwrap();
    let opts = CamOptions {
        target_layer: Some("no_such_layer".into()),
        ..Default::default()
    };
    let err = gradcam(&net, &Tensor::zeros(&[3, 64, 64]), &opts).unwrap_err();
    assert!(matches!(err, Error::UnknownLayer(ref n) if n == "no_such_layer"));
}

#[test]
fn any_capture_point_can_be_targeted() {
    let net = Network::<f32>::build(&NetworkConfig::desk()).unwrap();
    let x = Tensor::full(&[3, 64, 64], 0.2);
    for layer in net.layer_names() {
        let opts = CamOptions {
            target_layer: Some(layer.clone()),
            ..Default::default()
        };
        let hm = gradcam(&net, &x, &opts).unwrap();
        assert_eq!(hm.source_layer, layer);
        check_normalized(&hm, 64, 64);
    }
}

fn to_sample(s: &SynthSample, size: usize) -> Sample {
    Sample {
        subject_id: s.subject_id,
        view_index: s.view_index,
        input: preprocess(&s.image, size).unwrap(),
        target: (s.label == Label::Appendicitis) as u8 as f32,
    }
}

struct Trained {
    net: Network,
    train_acc: f64,
    cases: Vec<ProbeCase>,
}

const PROBE_SIZE: usize = 224;

/// Desk network trained on 224×224 planted-patch images, where the final
/// stage is a 7×7 grid. Shared by the tests that need a trained model.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let synth = |seed| {
            generate(&SynthConfig {
                subjects: 40,
                size: PROBE_SIZE,
                seed,
                ..Default::default()
            })
            .unwrap()
        };
        let train: Vec<Sample> = synth(0).iter().map(|s| to_sample(s, PROBE_SIZE)).collect();
        let mut cfg = NetworkConfig::desk();
        cfg.input_size = PROBE_SIZE;
        cfg.frozen_stages.clear();
        let tc = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 12,
            patience: 12,
            ..Default::default()
        };
        let out = run_training(
            Network::build(&cfg).unwrap(),
            &train,
            &train,
            &AugmentConfig::disabled(),
            &tc,
            &RunOptions::default(),
        )
        .unwrap();
        let probs = predict_samples(&out.last, &train, 32).unwrap();
        let correct = probs
            .iter()
            .zip(&train)
            .filter(|(p, s)| (**p >= 0.5) == (s.target == 1.0))
            .count();
        let held_out = synth(1000);
        let cases = held_out
            .iter()
            .filter_map(|s| {
                s.bbox.map(|bbox| ProbeCase {
                    input: preprocess(&s.image, PROBE_SIZE).unwrap(),
                    bbox,
                })
            })
            .collect();
        Trained {
            net: out.last,
            train_acc: correct as f64 / train.len() as f64,
            cases,
        }
    })
}

#[test]
fn trained_network_looks_at_the_lesion() {
    let t = trained();
    assert!(t.train_acc >= 0.95, "train accuracy {}", t.train_acc);
    let report = localization_probe(&t.net, &t.cases, 0.25, 0.5, &CamOptions::default()).unwrap();
    println!("localization on held-out positives: {report:?}");
    assert!(report.evaluated * 2 >= t.cases.len(), "{report:?}");
    assert!(report.rate >= 0.8, "{report:?}");
}

#[test]
fn block_average_of_upsampled_map_recovers_raw_map() {
    let t = trained();
    let mut worst = 0.0f64;
    for case in &t.cases {
        let hm = gradcam(&t.net, &case.input, &CamOptions::default()).unwrap();
        let top = hm.raw.iter().copied().fold(0.0, f64::max);
        if top == 0.0 {
            continue;
        }
        let (h, w) = (hm.raw_height, hm.raw_width);
        let f = hm.height / h;
        assert_eq!(f * h, hm.height);
        // undo the max normalization: the upsampled peak is what values were divided by
        let small: Vec<f32> = hm.raw.iter().map(|&r| r as f32).collect();
        let up_peak = resize_bilinear(&small, h, w, hm.height, hm.width)
            .into_iter()
            .fold(0.0f32, f32::max) as f64;
        let mut mae = 0.0;
        for i in 0..h {
            for j in 0..w {
                let mut avg = 0.0;
                for y in 0..f {
                    for x in 0..f {
                        avg += hm.get(i * f + y, j * f + x) as f64;
                    }
                }
                avg /= (f * f) as f64;
                mae += (avg * up_peak - hm.raw[i * w + j]).abs() / top;
            }
        }
        worst = worst.max(mae / (h * w) as f64);
    }
    assert!(worst <= 0.05, "worst relative MAE {worst}");
}

#[test]
fn full_image_box_always_hits() {
    let net = Network::<f32>::build(&NetworkConfig::desk()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let full = BoundingBox {
        y0: 0,
        x0: 0,
        y1: 64,
        x1: 64,
    };
    let cases: Vec<ProbeCase> = (0..10)
        .map(|_| ProbeCase {
            input: noise(&[3, 64, 64], &mut rng).cast(),
            bbox: full,
        })
        .collect();
    let r = localization_probe(&net, &cases, 0.25, 0.0, &CamOptions::default()).unwrap();
    assert_eq!((r.evaluated, r.hits, r.rate), (10, 10, 1.0));
}

fn gray(h: usize, w: usize) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, |y, x| ((y * 7 + x * 3) % 17) as f32 / 16.0)
}

fn heatmap(values: Vec<f32>, h: usize, w: usize) -> Heatmap {
    Heatmap {
        values,
        height: h,
        width: w,
        raw: vec![],
        raw_height: 0,
        raw_width: 0,
        source_layer: "test".into(),
        input_ref: Some((23, 7)),
        predicted_score: 0.5,
    }
}

#[test]
fn zero_heatmap_overlay_is_the_grayscale_image() {
    let dir = tempfile::tempdir().unwrap();
    let g = gray(9, 13);
    let files = render_overlay(&heatmap(vec![0.0; 9 * 13], 9, 13), &g, dir.path()).unwrap();
    assert_eq!(files.cam, dir.path().join("23.7.cam.pgm"));
    assert_eq!(files.overlay, dir.path().join("23.7.overlay.ppm"));
    let ppm = read_pnm(&files.overlay).unwrap();
    assert_eq!((ppm.width, ppm.height, ppm.channels), (13, 9, 3));
    for (i, &v) in g.data().iter().enumerate() {
        let b = (v * 255.0).round() as u8;
        assert_eq!(&ppm.data[3 * i..3 * i + 3], &[b, b, b]);
    }
}

#[test]
fn overlay_peak_blends_red_at_forty_percent() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (6, 6);
    let g = gray(h, w);
    let mut values = vec![0.25f32; h * w];
    values[2 * w + 3] = 1.0;
    render_overlay(&heatmap(values, h, w), &g, dir.path()).unwrap();
    let ppm = read_pnm(&dir.path().join("23.7.overlay.ppm")).unwrap();
    let at = 2 * w + 3;
    let gn = g.data()[at] as f64;
    let px = &ppm.data[3 * at..3 * at + 3];
    assert_eq!(px[0], (255.0 * (0.4 + 0.6 * gn)).round() as u8);
    assert_eq!(px[1], (255.0 * (0.4 + 0.6 * gn)).round() as u8);
    assert_eq!(px[2], (255.0 * 0.6 * gn).round() as u8);
}

#[test]
fn pgm_roundtrip_within_one_level() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (h, w) = (17, 11);
    let values: Vec<f32> = (0..h * w).map(|_| rng.random::<f32>()).collect();
    let files = render_overlay(&heatmap(values.clone(), h, w), &gray(h, w), dir.path()).unwrap();
    let pgm = read_pnm(&files.cam).unwrap();
    assert_eq!((pgm.width, pgm.height, pgm.channels), (w, h, 1));
    for (b, v) in pgm.data.iter().zip(&values) {
        assert!((*b as f32 / 255.0 - v).abs() <= 1.0 / 255.0);
    }
}

#[test]
fn overlay_rejects_mismatched_original() {
    let dir = tempfile::tempdir().unwrap();
    let err = render_overlay(&heatmap(vec![0.0; 16], 4, 4), &gray(4, 5), dir.path()).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
}
