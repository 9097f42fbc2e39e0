use super::tape::{Op, Tape};
use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Which statistics normalize the input.
#[derive(Clone, Debug)]
pub enum NormStats<'a, T> {
    /// Per-channel mean and biased variance of the current batch.
    Batch { eps: T },
    /// Stored running statistics; the op is then an affine map per channel.
    Fixed { mean: &'a [T], var: &'a [T], eps: T },
}

pub struct BatchNormOutput<T> {
    pub out: Var,
    /// Batch mean per channel (the fixed mean in `Fixed` mode).
    pub mean: Vec<T>,
    /// Biased batch variance per channel.
    pub var: Vec<T>,
    /// Number of values each channel statistic was computed over.
    pub count: usize,
}

pub(super) struct Saved<'a, T> {
    pub input: usize,
    pub gamma: usize,
    pub beta: usize,
    pub xhat: &'a [T],
    pub inv_std: &'a [T],
    pub batch_stats: bool,
}

fn layout(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [n, c] => Some((*n, *c, 1)),
        [n, c, h, w] => Some((*n, *c, h * w)),
        _ => None,
    }
}

impl<T: Real> Tape<T> {
    /// Per-channel normalization followed by a learned scale and shift.
    ///
    /// Accepts NCHW or NC input; `gamma` and `beta` have shape `[C]`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, T>,
    ) -> Result<BatchNormOutput<T>> {
        self.check(input)?;
        self.check(gamma)?;
        self.check(beta)?;
        let x = self.val(input.idx);
        let (n, c, inner) = layout(x.shape()).ok_or_else(|| Error::InvalidShape {
            op: "batch_norm",
            detail: format!("expected NC or NCHW input, got {:?}", x.shape()),
        })?;
        for v in [gamma, beta] {
            let t = self.val(v.idx);
            if t.shape() != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    left: x.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let xd = x.data();
        let count = n * inner;
        let (mean, var, eps, batch_stats) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += xd[(i * c + ch) * inner..][..inner].iter().copied().sum::<T>();
                    }
                    let mu = s / T::lit(count as f64);
                    let mut sq = T::zero();
                    for i in 0..n {
                        for &v in &xd[(i * c + ch) * inner..][..inner] {
                            sq += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / T::lit(count as f64);
                }
                (mean, var, eps, true)
            }
            NormStats::Fixed { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::InvalidShape {
                        op: "batch_norm",
                        detail: format!("running statistics need {c} channels"),
                    });
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.val(gamma.idx).data(), self.val(beta.idx).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (idx, (&v, (xh, o))) in xd.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (idx / inner) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = gd[ch] * *xh + bd[ch];
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let v = self.push(
            value,
            Op::BatchNorm {
                input: input.idx,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
                batch_stats,
            },
            &[input.idx, gamma.idx, beta.idx],
        );
        Ok(BatchNormOutput {
            out: v,
            mean,
            var,
            count,
        })
    }

    /// The normalized, pre-scale activations of a batch-norm node.
    pub fn normalized(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.idx].op {
            Op::BatchNorm { xhat, .. } => Some(xhat),
            _ => None,
        }
    }
}

pub(super) fn batch_norm_backward<T: Real>(
    tape: &Tape<T>,
    s: Saved<'_, T>,
    g: &[T],
    out: &mut Vec<(usize, Vec<T>)>,
) {
    let x = tape.val(s.input);
    let (n, c, inner) = layout(x.shape()).expect("validated in forward");
    let gamma = tape.val(s.gamma).data();
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (idx, (&gv, &xh)) in g.iter().zip(s.xhat).enumerate() {
        let ch = (idx / inner) % c;
        sum_g[ch] += gv;
        sum_gx[ch] += gv * xh;
    }
    if tape.needs(s.input) {
        let m = T::lit((n * inner) as f64);
        let dx = g
            .iter()
            .zip(s.xhat)
            .enumerate()
            .map(|(idx, (&gv, &xh))| {
                let ch = (idx / inner) % c;
                let k = gamma[ch] * s.inv_std[ch];
                if s.batch_stats {
                    k * (gv - sum_g[ch] / m - xh * sum_gx[ch] / m)
                } else {
                    k * gv
                }
            })
            .collect();
        out.push((s.input, dx));
    }
    if tape.needs(s.gamma) {
        out.push((s.gamma, sum_gx));
    }
    if tape.needs(s.beta) {
        out.push((s.beta, sum_g));
    }
}
