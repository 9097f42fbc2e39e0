use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Adam, EarlyStopping, EpochRecord, TrainConfig, TrainState};
use crate::data::{augment, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::model::{Mode, Network, NetworkConfig};
use crate::tensor::{Tape, Tensor, BCE_CLAMP};

/// Name of the JSON-lines training log inside the output directory.
pub const LOG_FILE: &str = "train_log.jsonl";

/// Where and how a run records itself.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Checkpoints and log go here; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Record wall-clock seconds per epoch; when false the field is 0.
    pub timestamps: bool,
    /// Stop as soon as validation accuracy reaches this value.
    pub target_val_acc: Option<f64>,
}

pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub best: Network,
    /// Weights after the last epoch run.
    pub last: Network,
    pub state: TrainState,
    pub log_path: Option<PathBuf>,
}

fn keyed_rng(seed: u64, a: u64, b: u64, tag: &[u8; 8]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..].copy_from_slice(tag);
    ChaCha8Rng::from_seed(key)
}

/// Stacks equally shaped C×H×W tensors into N×C×H×W.
pub fn stack_inputs(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or(Error::EmptyInput)?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "stack",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Eval-mode probabilities for every sample, in order.
pub fn predict_samples(net: &Network, samples: &[Sample], batch_size: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs: Vec<&Tensor> = chunk.iter().map(|s| &s.input).collect();
        out.extend(net.predict(stack_inputs(&inputs)?)?);
    }
    Ok(out)
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean cross-entropy and accuracy (threshold 0.5) in eval mode.
pub(crate) fn evaluate(net: &Network, samples: &[Sample], batch_size: usize) -> Result<(f64, f64)> {
    let probs = predict_samples(net, samples, batch_size)?;
    let n = samples.len() as f64;
    let loss = probs.iter().zip(samples).map(|(&p, s)| bce(p as f64, s.target as f64)).sum::<f64>() / n;
    let correct = probs
        .iter()
        .zip(samples)
        .filter(|(&p, s)| (p >= 0.5) == (s.target >= 0.5))
        .count();
    Ok((loss, correct as f64 / n))
}

struct Checkpoints {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl Checkpoints {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let log = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Checkpoints {
            dir: dir.to_path_buf(),
            log: BufWriter::new(log),
        })
    }

    fn record(&mut self, rec: &EpochRecord) -> Result<()> {
        let path = self.dir.join(LOG_FILE);
        let line = serde_json::to_string(rec).map_err(|e| Error::json(&path, e))?;
        writeln!(self.log, "{line}")
            .and_then(|_| self.log.flush())
            .map_err(|e| Error::io(&path, e))
    }
}

/// Trains `net` with per-epoch shuffling, keyed augmentation, Adam and
/// early stopping on validation loss.
///
/// Each epoch writes `epoch_<n>.w` and, on improvement, `best.w`, and appends
/// one line to the JSON-lines log.
pub fn run_training(
    mut net: Network,
    train: &[Sample],
    val: &[Sample],
    aug: &AugmentConfig,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }
    net.set_dropout_rate(cfg.dropout_rate)?;
    let mut ckpt = opts.out_dir.as_deref().map(Checkpoints::create).transpose()?;

    let mut state = TrainState {
        epoch: 0,
        optimizer: Adam::new(&net),
        stopping: EarlyStopping::new(cfg.patience, cfg.min_delta),
        history: Vec::new(),
    };
    let mut best = net.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        state.epoch = epoch;
        let e = epoch as u64;
        order.sort_unstable();
        order.shuffle(&mut keyed_rng(cfg.seed, e, 0, b"shuffle\0"));

        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<Tensor> = chunk
                .par_iter()
                .map(|&i| augment(&train[i].input, aug, e, i as u64))
                .collect::<Result<_>>()?;
            let targets: Vec<f32> = chunk.iter().map(|&i| train[i].target).collect();
            let x = stack_inputs(&inputs.iter().collect::<Vec<_>>())?;

            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let xv = tape.constant(x);
            let dropout_key = keyed_rng(cfg.seed, e, b as u64, b"dropout\0").next_u64();
            let pass = net.forward(&mut tape, xv, &bound, Mode::Train { dropout_key })?;
            let loss = tape.bce(pass.prob, &targets)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += lv * chunk.len() as f64;
            correct += tape
                .value(pass.prob)
                .data()
                .iter()
                .zip(&targets)
                .filter(|(&p, &y)| (p >= 0.5) == (y >= 0.5))
                .count();

            tape.backward(loss)?;
            let grads = net.collect_grads(&tape, &bound);
            net.apply_bn_updates(&pass.bn_updates);
            state.optimizer.step(&mut net, &grads, cfg)?;
        }

        let (val_loss, val_acc) = evaluate(&net, val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
            seconds: if opts.timestamps {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            record.train_loss,
            record.train_acc,
            val_loss,
            val_acc
        );
        let improved = state.stopping.observe(epoch, val_loss);
        if improved {
            best = net.clone();
        }
        if let Some(c) = ckpt.as_mut() {
            c.record(&record)?;
            net.save_weights(c.dir.join(format!("epoch_{epoch}.w")))?;
            if improved {
                net.save_weights(c.dir.join("best.w"))?;
            }
        }
        state.history.push(record);
        if state.stopping.should_stop() || opts.target_val_acc.is_some_and(|t| val_acc >= t) {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: net,
        state,
        log_path: opts.out_dir.as_ref().map(|d| d.join(LOG_FILE)),
    })
}

/// Fits `samples` with augmentation off, validating on the same samples,
/// until every one is classified correctly in eval mode or `max_epochs`
/// runs out. Returns the final eval-mode accuracy and the trained network.
pub fn overfit_sanity(net_cfg: &NetworkConfig, samples: &[Sample], train_cfg: &TrainConfig) -> Result<(f64, TrainOutcome)> {
    let net = Network::build(net_cfg)?;
    let cfg = TrainConfig {
        patience: train_cfg.max_epochs,
        ..train_cfg.clone()
    };
    let opts = RunOptions {
        target_val_acc: Some(1.0),
        ..Default::default()
    };
    let outcome = run_training(net, samples, samples, &AugmentConfig::disabled(), &cfg, &opts)?;
    let (_, acc) = evaluate(&outcome.last, samples, cfg.batch_size)?;
    Ok((acc, outcome))
}
