use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{BlockKind, NetworkConfig, Stage, BN_EPS, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{NormStats, Real, Tape, Tensor, Var};

/// A named, possibly trainable parameter tensor.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub stage: Stage,
    pub trainable: bool,
}

/// Non-trainable state stored alongside parameters (batch-norm running stats).
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub stage: Stage,
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    stage: Stage,
}

#[derive(Clone, Debug)]
struct ConvBn {
    name: String,
    weight: usize,
    stride: usize,
    pad: usize,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct Block {
    name: String,
    in_channels: usize,
    convs: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
}

#[derive(Clone, Debug)]
struct Head {
    hidden_w: usize,
    hidden_b: usize,
    out_w: usize,
    out_b: usize,
}

/// Forward-pass behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Running statistics, no dropout.
    Eval,
    /// Batch statistics for trainable batch-norm layers, dropout drawn from
    /// `dropout_key`.
    Train { dropout_key: u64 },
}

/// Batch statistics observed by one trainable batch-norm layer in train mode.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    running_mean: usize,
    running_var: usize,
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

pub struct ForwardPass<T> {
    /// Pre-sigmoid score, N×1.
    pub logit: Var,
    /// Sigmoid probability, N×1.
    pub prob: Var,
    /// Named intermediate activations: every conv output and every block output.
    pub captures: Vec<(String, Var)>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

#[derive(Default)]
struct Record<T> {
    captures: Vec<(String, Var)>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T> ForwardPass<T> {
    pub fn capture(&self, name: &str) -> Option<Var> {
        self.captures.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// The instantiated four-stage residual network.
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    cfg: NetworkConfig,
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    stem: ConvBn,
    blocks: Vec<Block>,
    head: Head,
}

struct Builder<T> {
    rng: ChaCha8Rng,
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Real> Builder<T> {
    fn he(&mut self, name: String, stage: Stage, shape: &[usize], fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| {
            let z: f64 = rng.sample(StandardNormal);
            T::lit(z * std)
        });
        self.param(name, stage, value)
    }

    fn param(&mut self, name: String, stage: Stage, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name,
            value,
            stage,
            trainable: true,
        });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, stage: Stage, value: Tensor<T>) -> usize {
        self.buffers.push(Buffer { name, value, stage });
        self.buffers.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(&mut self, name: &str, stage: Stage, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvBn {
        let weight = self.he(format!("{name}.weight"), stage, &[cout, cin, k, k], cin * k * k);
        let bn = format!("{name}.bn");
        let gamma = self.param(format!("{bn}.gamma"), stage, Tensor::full(&[cout], T::one()));
        let beta = self.param(format!("{bn}.beta"), stage, Tensor::zeros(&[cout]));
        let running_mean = self.buffer(format!("{bn}.running_mean"), stage, Tensor::zeros(&[cout]));
        let running_var = self.buffer(format!("{bn}.running_var"), stage, Tensor::full(&[cout], T::one()));
        ConvBn {
            name: name.to_string(),
            weight,
            stride,
            pad,
            bn: BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                stage,
            },
        }
    }
}

impl<T: Real> Network<T> {
    /// Instantiates `cfg` with seeded fan-in-scaled normal initialization.
    pub fn build(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            params: Vec::new(),
            buffers: Vec::new(),
        };
        let stem_width = cfg.stage_widths[0];
        let stem = b.conv_bn("stem.conv", Stage::Stem, cfg.input_channels, stem_width, 7, 2, 3);

        let mut blocks = Vec::new();
        let mut cin = stem_width;
        for s in 0..4 {
            let stage = Stage::residual(s);
            let width = cfg.stage_widths[s];
            let cout = cfg.stage_out(s);
            for d in 0..cfg.stage_depths[s] {
                let stride = if s > 0 && d == 0 { 2 } else { 1 };
                let name = format!("{stage}.block{d}");
                let convs = match cfg.block_kind {
                    BlockKind::Basic => vec![
                        b.conv_bn(&format!("{name}.conv1"), stage, cin, width, 3, stride, 1),
                        b.conv_bn(&format!("{name}.conv2"), stage, width, cout, 3, 1, 1),
                    ],
                    BlockKind::Bottleneck => vec![
                        b.conv_bn(&format!("{name}.conv1"), stage, cin, width, 1, 1, 0),
                        b.conv_bn(&format!("{name}.conv2"), stage, width, width, 3, stride, 1),
                        b.conv_bn(&format!("{name}.conv3"), stage, width, cout, 1, 1, 0),
                    ],
                };
                let shortcut = (stride != 1 || cin != cout)
                    .then(|| b.conv_bn(&format!("{name}.shortcut"), stage, cin, cout, 1, stride, 0));
                blocks.push(Block {
                    name,
                    in_channels: cin,
                    convs,
                    shortcut,
                });
                cin = cout;
            }
        }

        let units = cfg.dense_units;
        let hidden_w = b.he("head.fc1.weight".into(), Stage::Head, &[cin, units], cin);
        let hidden_b = b.param("head.fc1.bias".into(), Stage::Head, Tensor::zeros(&[units]));
        let out_w = b.he("head.fc2.weight".into(), Stage::Head, &[units, 1], units);
        let out_b = b.param("head.fc2.bias".into(), Stage::Head, Tensor::zeros(&[1]));

        let mut net = Self {
            cfg: cfg.clone(),
            params: b.params,
            buffers: b.buffers,
            stem,
            blocks,
            head: Head {
                hidden_w,
                hidden_b,
                out_w,
                out_b,
            },
        };
        net.apply_frozen();
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub(crate) fn params_and_buffers_mut(&mut self) -> (&mut [Param<T>], &mut [Buffer<T>]) {
        (&mut self.params, &mut self.buffers)
    }

    pub fn frozen_stages(&self) -> &BTreeSet<Stage> {
        &self.cfg.frozen_stages
    }

    /// Freezes exactly the named stages (`stem`, `stage1`..`stage4`, `head`).
    pub fn set_frozen<S: AsRef<str>>(&mut self, stages: &[S]) -> Result<()> {
        let set = stages
            .iter()
            .map(|s| s.as_ref().parse::<Stage>())
            .collect::<Result<BTreeSet<_>>>()?;
        self.set_frozen_stages(set);
        Ok(())
    }

    pub fn set_frozen_stages(&mut self, stages: BTreeSet<Stage>) {
        self.cfg.frozen_stages = stages;
        self.apply_frozen();
    }

    /// Dense-layer dropout used by train-mode forward passes.
    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout_rate must be in [0,1), got {rate}")));
        }
        self.cfg.dropout_rate = rate;
        Ok(())
    }

    fn apply_frozen(&mut self) {
        for p in &mut self.params {
            p.trainable = !self.cfg.frozen_stages.contains(&p.stage);
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_name(&self, i: usize) -> &str {
        &self.blocks[i].name
    }

    /// Every capture point exposed by [`Network::forward`], in forward order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec![self.stem.name.clone()];
        for b in &self.blocks {
            names.extend(b.convs.iter().map(|c| c.name.clone()));
            names.extend(b.shortcut.iter().map(|c| c.name.clone()));
            names.push(b.name.clone());
        }
        names
    }

    /// The final convolution of stage 4, the default Grad-CAM target.
    pub fn last_conv_name(&self) -> String {
        let last = self.blocks.last().expect("four non-empty stages");
        last.convs.last().expect("blocks have convs").name.clone()
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            cfg: self.cfg.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    stage: p.stage,
                    trainable: p.trainable,
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.cast(),
                    stage: b.stage,
                })
                .collect(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            head: self.head.clone(),
        }
    }

    /// Places every parameter on the tape; only trainable ones require grads.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), p.trainable))
            .collect()
    }

    /// Places every parameter on the tape with the given grad flag.
    pub fn bind_all(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// Gradients of the bound parameters after `tape.backward`.
    pub fn collect_grads(&self, tape: &Tape<T>, bound: &[Var]) -> Vec<Option<Tensor<T>>> {
        bound.iter().map(|&v| tape.grad(v)).collect()
    }

    fn check_bound(&self, bound: &[Var]) -> Result<()> {
        if bound.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                bound.len()
            )));
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        layer: &ConvBn,
        bound: &[Var],
        mode: Mode,
        relu: bool,
        rec: &mut Record<T>,
    ) -> Result<Var> {
        let y = tape.conv2d(x, bound[layer.weight], None, layer.stride, layer.pad)?;
        rec.captures.push((layer.name.clone(), y));
        let bn = &layer.bn;
        let frozen = self.cfg.frozen_stages.contains(&bn.stage);
        let eps = T::lit(BN_EPS);
        let out = match mode {
            Mode::Train { .. } if !frozen => {
                let o = tape.batch_norm(y, bound[bn.gamma], bound[bn.beta], NormStats::Batch { eps })?;
                rec.bn_updates.push(BnUpdate {
                    running_mean: bn.running_mean,
                    running_var: bn.running_var,
                    mean: o.mean,
                    var: o.var,
                    count: o.count,
                });
                o.out
            }
            _ => {
                let stats = NormStats::Fixed {
                    mean: self.buffers[bn.running_mean].value.data(),
                    var: self.buffers[bn.running_var].value.data(),
                    eps,
                };
                tape.batch_norm(y, bound[bn.gamma], bound[bn.beta], stats)?.out
            }
        };
        if relu {
            tape.relu(out)
        } else {
            Ok(out)
        }
    }

    fn block(&self, tape: &mut Tape<T>, x: Var, block: &Block, bound: &[Var], mode: Mode, rec: &mut Record<T>) -> Result<Var> {
        let channels = tape.value(x).dims4("residual block")?.1;
        if channels != block.in_channels {
            return Err(Error::InvalidShape {
                op: "residual block",
                detail: format!(
                    "{} expects {} input channels, got {channels}",
                    block.name, block.in_channels
                ),
            });
        }
        let mut h = x;
        let last = block.convs.len() - 1;
        for (i, layer) in block.convs.iter().enumerate() {
            h = self.conv_bn(tape, h, layer, bound, mode, i != last, rec)?;
        }
        let skip = match &block.shortcut {
            Some(proj) => self.conv_bn(tape, x, proj, bound, mode, false, rec)?,
            None => x,
        };
        let sum = tape.add(h, skip)?;
        let out = tape.relu(sum)?;
        rec.captures.push((block.name.clone(), out));
        Ok(out)
    }

    /// Runs residual block `index` alone: `ReLU(F(x) + shortcut(x))`.
    pub fn residual_block_forward(
        &self,
        tape: &mut Tape<T>,
        index: usize,
        x: Var,
        bound: &[Var],
        mode: Mode,
    ) -> Result<(Var, Vec<BnUpdate<T>>)> {
        self.check_bound(bound)?;
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::UnknownLayer(format!("block {index}")))?;
        let mut rec = Record::default();
        let y = self.block(tape, x, block, bound, mode, &mut rec)?;
        Ok((y, rec.bn_updates))
    }

    /// Full forward pass on an N×C×S×S input.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, bound: &[Var], mode: Mode) -> Result<ForwardPass<T>> {
        self.check_bound(bound)?;
        let (n, c, h, w) = tape.value(input).dims4("network input")?;
        if c != self.cfg.input_channels || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(Error::ShapeMismatch {
                op: "network input",
                left: vec![n, self.cfg.input_channels, self.cfg.input_size, self.cfg.input_size],
                right: vec![n, c, h, w],
            });
        }
        let mut rec = Record::default();
        let mut x = self.conv_bn(tape, input, &self.stem, bound, mode, true, &mut rec)?;
        x = tape.max_pool(x, 3, 2, 1)?;
        for block in &self.blocks {
            x = self.block(tape, x, block, bound, mode, &mut rec)?;
        }
        let pooled = tape.global_avg_pool(x)?;
        let flat = tape.flatten(pooled)?;
        let hidden = tape.dense(flat, bound[self.head.hidden_w], Some(bound[self.head.hidden_b]))?;
        let mut hidden = tape.relu(hidden)?;
        if let Mode::Train { dropout_key } = mode {
            if self.cfg.dropout_rate > 0.0 {
                let mask = dropout_mask::<T>(tape.value(hidden).shape(), self.cfg.dropout_rate, dropout_key);
                let m = tape.constant(mask);
                hidden = tape.mul(hidden, m)?;
            }
        }
        let logit = tape.dense(hidden, bound[self.head.out_w], Some(bound[self.head.out_b]))?;
        let prob = tape.sigmoid(logit)?;
        Ok(ForwardPass {
            logit,
            prob,
            captures: rec.captures,
            bn_updates: rec.bn_updates,
        })
    }

    /// Eval-mode probabilities for a batch, without recording gradients.
    pub fn predict(&self, input: Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.bind_all(&mut tape, false);
        let x = tape.constant(input);
        let pass = self.forward(&mut tape, x, &bound, Mode::Eval)?;
        Ok(tape.value(pass.prob).data().to_vec())
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        let momentum = T::lit(BN_MOMENTUM);
        let keep = T::one() - momentum;
        for u in updates {
            let unbias = if u.count > 1 {
                T::lit(u.count as f64 / (u.count - 1) as f64)
            } else {
                T::one()
            };
            for (r, &m) in self.buffers[u.running_mean].value.data_mut().iter_mut().zip(&u.mean) {
                *r = keep * *r + momentum * m;
            }
            for (r, &v) in self.buffers[u.running_var].value.data_mut().iter_mut().zip(&u.var) {
                *r = keep * *r + momentum * v * unbias;
            }
        }
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`, else
/// `1/(1-rate)`.
pub fn dropout_mask<T: Real>(shape: &[usize], rate: f64, key: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let keep = T::lit(1.0 / (1.0 - rate));
    Tensor::from_fn(shape, |_| {
        if rng.random::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    })
}
