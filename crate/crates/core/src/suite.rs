//! Finite-difference checks over every differentiable op and a tiny network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Mode, Network, NetworkConfig};
use crate::tensor::{grad_check_with_fault, NormStats, OpKind, Tape, Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub eps: f64,
    pub tolerance: f64,
    /// Break this op's backward rule (fixture for testing the suite itself).
    pub fault: Option<OpKind>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: (0..20).collect(),
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Case = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Body);

/// Step used for the whole-network cases. Gradients of deep parameters can be
/// ~1e-8 of the loss, where a 1e-5 step leaves only rounding noise; the
/// single-op cases use the caller's step.
pub const NETWORK_EPS: f64 = 1e-4;

/// Minimum distance from any ReLU or max-pool kink required of a sampled
/// network case; draws closer than this are discarded and redrawn.
pub const NETWORK_KINK_MARGIN: f64 = 2e-3;
type Body = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values in ±[margin, 2] so no element sits on a ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..2.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Contracts an arbitrary tensor to a scalar with fixed random weights, so
/// that every output element carries a distinct gradient.
fn project(tape: &mut Tape<f64>, v: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

macro_rules! projected {
    ($rng:expr, $shape:expr, |$tape:ident, $v:ident| $body:expr) => {{
        let w = uniform($rng, &$shape, -1.0, 1.0);
        Box::new(move |$tape: &mut Tape<f64>, $v: &[Var]| {
            let out = $body?;
            project($tape, out, &w)
        }) as Body
    }};
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", |r| {
            let ins = vec![uniform(r, &[2, 3, 4], -2.0, 2.0), uniform(r, &[2, 3, 4], -2.0, 2.0)];
            (ins, projected!(r, [2, 3, 4], |t, v| t.add(v[0], v[1])))
        }),
        ("add_per_channel", |r| {
            let ins = vec![uniform(r, &[2, 3, 2, 2], -2.0, 2.0), uniform(r, &[3], -2.0, 2.0)];
            (ins, projected!(r, [2, 3, 2, 2], |t, v| t.add(v[0], v[1])))
        }),
        ("sub_scalar", |r| {
            let ins = vec![uniform(r, &[5], -2.0, 2.0), uniform(r, &[1], -2.0, 2.0)];
            (ins, projected!(r, [5], |t, v| t.sub(v[0], v[1])))
        }),
        ("mul", |r| {
            let ins = vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)];
            (ins, projected!(r, [3, 4], |t, v| t.mul(v[0], v[1])))
        }),
        ("mul_per_channel", |r| {
            let ins = vec![uniform(r, &[2, 3, 2, 2], -2.0, 2.0), uniform(r, &[3], -2.0, 2.0)];
            (ins, projected!(r, [2, 3, 2, 2], |t, v| t.mul(v[0], v[1])))
        }),
        ("scale", |r| {
            let ins = vec![uniform(r, &[6], -2.0, 2.0)];
            (ins, projected!(r, [6], |t, v| t.scale(v[0], -1.7)))
        }),
        ("relu", |r| {
            let ins = vec![away_from_zero(r, &[2, 8], 1e-3)];
            (ins, projected!(r, [2, 8], |t, v| t.relu(v[0])))
        }),
        ("sigmoid", |r| {
            let ins = vec![uniform(r, &[10], -4.0, 4.0)];
            (ins, projected!(r, [10], |t, v| t.sigmoid(v[0])))
        }),
        ("conv2d", |r| {
            let ins = vec![
                uniform(r, &[2, 3, 5, 5], -1.0, 1.0),
                uniform(r, &[4, 3, 3, 3], -1.0, 1.0),
                uniform(r, &[4], -1.0, 1.0),
            ];
            (ins, projected!(r, [2, 4, 5, 5], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1)))
        }),
        ("conv2d_strided", |r| {
            let ins = vec![uniform(r, &[2, 3, 7, 7], -1.0, 1.0), uniform(r, &[2, 3, 3, 3], -1.0, 1.0)];
            (ins, projected!(r, [2, 2, 3, 3], |t, v| t.conv2d(v[0], v[1], None, 2, 0)))
        }),
        ("max_pool", |r| {
            let ins = vec![uniform(r, &[2, 2, 6, 6], -2.0, 2.0)];
            (ins, projected!(r, [2, 2, 3, 3], |t, v| t.max_pool(v[0], 3, 2, 1)))
        }),
        ("global_avg_pool", |r| {
            let ins = vec![uniform(r, &[2, 3, 4, 4], -2.0, 2.0)];
            (ins, projected!(r, [2, 3, 1, 1], |t, v| t.global_avg_pool(v[0])))
        }),
        ("dense", |r| {
            let ins = vec![
                uniform(r, &[3, 4], -1.0, 1.0),
                uniform(r, &[4, 2], -1.0, 1.0),
                uniform(r, &[2], -1.0, 1.0),
            ];
            (ins, projected!(r, [3, 2], |t, v| t.dense(v[0], v[1], Some(v[2]))))
        }),
        ("batch_norm_batch", |r| {
            let ins = vec![
                uniform(r, &[3, 2, 3, 3], -2.0, 2.0),
                uniform(r, &[2], 0.5, 1.5),
                uniform(r, &[2], -1.0, 1.0),
            ];
            (
                ins,
                projected!(r, [3, 2, 3, 3], |t, v| t
                    .batch_norm(v[0], v[1], v[2], NormStats::Batch { eps: 1e-5 })
                    .map(|o| o.out)),
            )
        }),
        ("batch_norm_fixed", |r| {
            let ins = vec![
                uniform(r, &[2, 3, 2, 2], -2.0, 2.0),
                uniform(r, &[3], 0.5, 1.5),
                uniform(r, &[3], -1.0, 1.0),
            ];
            let mean = uniform(r, &[3], -0.5, 0.5).into_data();
            let var = uniform(r, &[3], 0.5, 2.0).into_data();
            let w = uniform(r, &[2, 3, 2, 2], -1.0, 1.0);
            let body: Body = Box::new(move |t, v| {
                let stats = NormStats::Fixed {
                    mean: &mean,
                    var: &var,
                    eps: 1e-5,
                };
                let o = t.batch_norm(v[0], v[1], v[2], stats)?.out;
                project(t, o, &w)
            });
            (ins, body)
        }),
        ("sum", |r| {
            let ins = vec![uniform(r, &[3, 3], -2.0, 2.0)];
            (ins, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.sum(v[0])) as Body)
        }),
        ("mean", |r| {
            let ins = vec![uniform(r, &[4, 2], -2.0, 2.0)];
            (ins, Box::new(|t: &mut Tape<f64>, v: &[Var]| t.mean(v[0])) as Body)
        }),
        ("reshape", |r| {
            let ins = vec![uniform(r, &[2, 3, 2], -2.0, 2.0)];
            (ins, projected!(r, [4, 3], |t, v| t.reshape(v[0], &[4, 3])))
        }),
        ("bce", |r| {
            let ins = vec![uniform(r, &[6, 1], 0.05, 0.95)];
            let y: Vec<f64> = (0..6).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect();
            (ins, Box::new(move |t: &mut Tape<f64>, v: &[Var]| t.bce(v[0], &y)) as Body)
        }),
        ("network_eval", |r| network_case(r, Mode::Eval)),
        ("network_train", |r| {
            let key = r.random();
            network_case(r, Mode::Train { dropout_key: key })
        }),
    ]
}

/// Tiny residual network: the scalar is the cross-entropy of its output on a
/// random batch, differentiated w.r.t. the input and every parameter. Train
/// mode uses a batch of four: with two samples the 1×1 maps of stages 3 and 4
/// normalize to ±1 and every upstream gradient is identically zero.
fn network_case(rng: &mut ChaCha8Rng, mode: Mode) -> (Vec<Tensor<f64>>, Body) {
    loop {
        let (inputs, body) = sample_network_case(rng, mode);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        if body(&mut tape, &vars).is_ok() && tape.kink_margin() >= NETWORK_KINK_MARGIN {
            return (inputs, body);
        }
    }
}

fn sample_network_case(rng: &mut ChaCha8Rng, mode: Mode) -> (Vec<Tensor<f64>>, Body) {
    let batch = if mode == Mode::Eval { 2 } else { 4 };
    let cfg = NetworkConfig {
        seed: rng.random(),
        ..NetworkConfig::tiny()
    };
    let mut net: Network<f64> = Network::build(&cfg).expect("tiny config is valid");
    // Zero-initialized shifts put dead units exactly on the ReLU kink; random
    // shifts, scales and running statistics move every unit off it.
    for p in net.params_mut() {
        let range = if p.name.ends_with(".gamma") {
            Some(0.5..1.5)
        } else if p.name.ends_with(".beta") || p.name.ends_with(".bias") {
            Some(-0.2..0.5)
        } else {
            None
        };
        if let Some(range) = range {
            p.value.data_mut().iter_mut().for_each(|x| *x = rng.random_range(range.clone()));
        }
    }
    for b in net.buffers_mut() {
        let range = if b.name.ends_with("running_var") { 0.5..2.0 } else { -0.3..0.3 };
        b.value.data_mut().iter_mut().for_each(|x| *x = rng.random_range(range.clone()));
    }
    let s = cfg.input_size;
    let mut ins = vec![uniform(rng, &[batch, 3, s, s], -1.0, 1.0)];
    ins.extend(net.params().iter().map(|p| p.value.clone()));
    let y: Vec<f64> = (0..batch).map(|i| ((i + 1) % 2) as f64).collect();
    let body: Body = Box::new(move |t, v| {
        let pass = net.forward(t, v[0], &v[1..], mode)?;
        t.bce(pass.prob, &y)
    });
    (ins, body)
}

pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs one named case over every seed; returns the worst relative error.
pub fn run_case(name: &str, cfg: &SuiteConfig) -> Option<Result<f64>> {
    let (name, case) = cases().into_iter().find(|(n, _)| *n == name)?;
    Some(run(name, case, cfg))
}

fn run(name: &str, case: Case, cfg: &SuiteConfig) -> Result<f64> {
    let eps = if name.starts_with("network") { NETWORK_EPS } else { cfg.eps };
    let mut worst: f64 = 0.0;
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, body) = case(&mut rng);
        let err = grad_check_with_fault(body, &inputs, eps, cfg.fault)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// The full table, one row per case.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    cases()
        .into_iter()
        .map(|(name, case)| {
            let err = run(name, case, cfg)?;
            Ok(CheckRow {
                name,
                max_rel_error: err,
                passed: err <= cfg.tolerance,
            })
        })
        .collect()
}
