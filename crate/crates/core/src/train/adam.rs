use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

/// First and second moment estimates for one trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam optimizer state: one moment pair per parameter, present exactly for
/// the trainable ones.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step_count: u64,
    pub moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(net: &Network) -> Self {
        Adam {
            step_count: 0,
            moments: net
                .params()
                .iter()
                .map(|p| {
                    p.trainable.then(|| Moments {
                        m: vec![0.0; p.value.numel()],
                        v: vec![0.0; p.value.numel()],
                    })
                })
                .collect(),
        }
    }

    /// One bias-corrected Adam update. `grads` is indexed like
    /// `net.params()`; entries for frozen parameters are ignored.
    pub fn step(&mut self, net: &mut Network, grads: &[Option<Tensor>], cfg: &TrainConfig) -> Result<()> {
        if grads.len() != net.params().len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                net.params().len()
            )));
        }
        for (p, g) in net.params().iter().zip(grads) {
            if p.trainable && g.is_none() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (b1, b2, eps, lr) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon, cfg.learning_rate);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for ((p, g), slot) in net.params_mut().iter_mut().zip(grads).zip(&mut self.moments) {
            if !p.trainable {
                continue;
            }
            let g = g.as_ref().expect("checked above");
            let mo = slot.get_or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            for (((w, &gi), m), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(&mut mo.m).zip(&mut mo.v) {
                let gi = gi as f64;
                let mi = b1 * *m as f64 + (1.0 - b1) * gi;
                let vi = b2 * *v as f64 + (1.0 - b2) * gi * gi;
                *m = mi as f32;
                *v = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}
