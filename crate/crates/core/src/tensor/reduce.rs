use super::tape::{Op, Tape};
use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Probability clamp used by the cross-entropy loss.
pub const BCE_CLAMP: f64 = 1e-7;

impl<T: Real> Tape<T> {
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.val(a.idx).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: a.idx }, &[a.idx]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.val(a.idx);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean { a: a.idx }, &[a.idx]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.val(a.idx).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a: a.idx }, &[a.idx]))
    }

    /// Collapses every dimension after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.val(a.idx).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    /// Mean binary cross-entropy of probabilities `p` (N or N×1) against
    /// `targets` in {0,1}. Probabilities are clamped to `[1e-7, 1-1e-7]`.
    pub fn bce(&mut self, p: Var, targets: &[T]) -> Result<Var> {
        self.check(p)?;
        let pt = self.val(p.idx);
        let column = matches!(pt.shape(), [_] | [_, 1]);
        if !column || pt.shape()[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "bce",
                left: pt.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let (lo, hi) = (T::lit(BCE_CLAMP), T::one() - T::lit(BCE_CLAMP));
        let mut total = T::zero();
        for (&pv, &y) in pt.data().iter().zip(targets) {
            let q = num_traits::clamp(pv, lo, hi);
            total += -(y * q.ln() + (T::one() - y) * (T::one() - q).ln());
        }
        let loss = total / T::lit(targets.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p: p.idx,
                targets: targets.to_vec(),
            },
            &[p.idx],
        ))
    }
}

pub(super) fn sum_backward<T: Real>(tape: &Tape<T>, a: usize, g: T, mean: bool, out: &mut Vec<(usize, Vec<T>)>) {
    if tape.needs(a) {
        let n = tape.val(a).numel();
        let v = if mean { g / T::lit(n as f64) } else { g };
        out.push((a, vec![v; n]));
    }
}

pub(super) fn bce_backward<T: Real>(tape: &Tape<T>, p: usize, targets: &[T], g: T, out: &mut Vec<(usize, Vec<T>)>) {
    if !tape.needs(p) {
        return;
    }
    let (lo, hi) = (T::lit(BCE_CLAMP), T::one() - T::lit(BCE_CLAMP));
    let scale = g / T::lit(targets.len() as f64);
    let dp = tape
        .val(p)
        .data()
        .iter()
        .zip(targets)
        .map(|(&pv, &y)| {
            if pv < lo || pv > hi {
                T::zero()
            } else {
                scale * (-y / pv + (T::one() - y) / (T::one() - pv))
            }
        })
        .collect();
    out.push((p, dp));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bce_of(p: f64, y: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let pv = tape.leaf(Tensor::new(vec![1, 1], vec![p]).unwrap(), false);
        let l = tape.bce(pv, &[y]).unwrap();
        tape.value(l).data()[0]
    }

    #[test]
    fn bce_reference_values() {
        assert!(bce_of(1.0, 1.0) <= 1e-6);
        assert!((bce_of(0.5, 0.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_of(0.0, 1.0) - 16.118_095_650_958_32).abs() < 1e-9);
    }

    #[test]
    fn bce_length_mismatch() {
        let mut tape = Tape::<f32>::new();
        let p = tape.leaf(Tensor::full(&[3, 1], 0.5), false);
        assert!(tape.bce(p, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn mean_grad_is_reciprocal_count() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
        let m = tape.mean(x).unwrap();
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.25; 4]);
    }
}
