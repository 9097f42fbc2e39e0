use super::tape::{Op, Tape};
use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Real> Tape<T> {
    /// Max pooling over `window`×`window` patches. Padding positions never win.
    /// Ties go to the first position in row-major order.
    pub fn max_pool(&mut self, input: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
        self.check(input)?;
        let x = self.val(input.idx);
        let (n, c, h, w) = x.dims4("max_pool")?;
        if window == 0 || stride == 0 {
            return Err(Error::InvalidShape {
                op: "max_pool",
                detail: "window and stride must be positive".into(),
            });
        }
        if pad >= window {
            return Err(Error::InvalidShape {
                op: "max_pool",
                detail: format!("padding {pad} must be smaller than window {window}"),
            });
        }
        if window > h + 2 * pad || window > w + 2 * pad {
            return Err(Error::InvalidShape {
                op: "max_pool",
                detail: format!(
                    "window {window} larger than padded input {}x{}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            });
        }
        let oh = (h + 2 * pad - window) / stride + 1;
        let ow = (w + 2 * pad - window) / stride + 1;
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..oh {
                let y0 = (oi * stride) as isize - pad as isize;
                for oj in 0..ow {
                    let x0 = (oj * stride) as isize - pad as isize;
                    let mut best = T::neg_infinity();
                    let mut best_at = usize::MAX;
                    for dy in 0..window as isize {
                        let y = y0 + dy;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for dx in 0..window as isize {
                            let xx = x0 + dx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let at = base + y as usize * w + xx as usize;
                            if best_at == usize::MAX || xd[at] > best || xd[at].is_nan() {
                                best = xd[at];
                                best_at = at;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, oh, ow], out);
        Ok(self.push(
            value,
            Op::MaxPool {
                input: input.idx,
                argmax,
                window,
                stride,
                pad,
            },
            &[input.idx],
        ))
    }

    /// Spatial mean per channel: NCHW → NC11.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.val(input.idx);
        let (n, c, h, w) = x.dims4("global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::lit(hw as f64);
        let out = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::from_parts(vec![n, c, 1, 1], out);
        Ok(self.push(value, Op::GlobalAvgPool { input: input.idx }, &[input.idx]))
    }
}

/// Smallest gap between the largest and second-largest value of any window.
pub(super) fn max_pool_margin<T: Real>(x: &Tensor<T>, window: usize, stride: usize, pad: usize) -> f64 {
    let [n, c, h, w] = x.shape()[..] else {
        return f64::INFINITY;
    };
    let oh = (h + 2 * pad - window) / stride + 1;
    let ow = (w + 2 * pad - window) / stride + 1;
    let mut margin = f64::INFINITY;
    for plane in x.data().chunks(h * w).take(n * c) {
        for oi in 0..oh {
            for oj in 0..ow {
                let (mut best, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for dy in 0..window {
                    let y = (oi * stride + dy) as isize - pad as isize;
                    for dx in 0..window {
                        let xx = (oj * stride + dx) as isize - pad as isize;
                        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let v = plane[y as usize * w + xx as usize].as_f64();
                        if v > best {
                            second = best;
                            best = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                margin = margin.min(best - second);
            }
        }
    }
    margin
}

pub(super) fn max_pool_backward<T: Real>(
    tape: &Tape<T>,
    input: usize,
    argmax: &[usize],
    g: &[T],
    out: &mut Vec<(usize, Vec<T>)>,
) {
    if tape.needs(input) {
        let mut dx = vec![T::zero(); tape.val(input).numel()];
        for (&at, &gv) in argmax.iter().zip(g) {
            dx[at] += gv;
        }
        out.push((input, dx));
    }
}

pub(super) fn global_avg_backward<T: Real>(
    tape: &Tape<T>,
    input: usize,
    g: &[T],
    out: &mut Vec<(usize, Vec<T>)>,
) {
    if tape.needs(input) {
        let x = tape.val(input);
        let hw = x.shape()[2] * x.shape()[3];
        let inv = T::one() / T::lit(hw as f64);
        let dx = g
            .iter()
            .flat_map(|&gv| std::iter::repeat_n(gv * inv, hw))
            .collect();
        out.push((input, dx));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_avg_of_constant() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 4, 5], 7.0), false);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 1, 1]);
        assert!(tape.value(y).data().iter().all(|&v| (v - 7.0).abs() < 1e-6));
    }

    #[test]
    fn global_avg_backward_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = tape.global_avg_pool(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = tape.max_pool(x, 2, 2, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_ties_go_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 3.0), true);
        let y = tape.max_pool(x, 2, 2, 0).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_propagates_nan() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, f32::NAN, 5.0, 2.0]).unwrap());
        let y = tape.max_pool(x, 2, 2, 0).unwrap();
        assert!(tape.value(y).data()[0].is_nan());
    }

    #[test]
    fn padded_pool_ignores_padding() {
        // All-negative input: padding must not contribute zeros.
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], -2.0), false);
        let y = tape.max_pool(x, 3, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == -2.0));
    }

    #[test]
    fn window_larger_than_input_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]), false);
        assert!(tape.max_pool(x, 3, 1, 0).is_err());
    }
}
