use super::tape::{Op, Tape};
use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// How the right-hand operand of a binary op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical shapes.
    Same,
    /// One-element right operand.
    Scalar,
    /// Right operand of shape `[C]` against a left operand `[N, C, ...]`.
    PerChannel { channels: usize, inner: usize },
}

impl Broadcast {
    fn resolve(op: &'static str, a: &Tensor<impl Real>, b: &Tensor<impl Real>) -> Result<Self> {
        if a.shape() == b.shape() {
            return Ok(Broadcast::Same);
        }
        if b.numel() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if b.rank() == 1 && a.rank() >= 2 && a.shape()[1] == b.shape()[0] {
            return Ok(Broadcast::PerChannel {
                channels: b.shape()[0],
                inner: a.shape()[2..].iter().product(),
            });
        }
        Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::PerChannel { channels, inner } => (i / inner) % channels,
        }
    }

    /// Sums a full-size gradient down to the right operand's shape.
    fn reduce<T: Real>(self, g: &[T], len: usize) -> Vec<T> {
        if self == Broadcast::Same {
            return g.to_vec();
        }
        let mut out = vec![T::zero(); len];
        for (i, &x) in g.iter().enumerate() {
            out[self.index(i)] += x;
        }
        out
    }
}

impl<T: Real> Tape<T> {
    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(usize, usize, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.val(a.idx), self.val(b.idx));
        let bcast = Broadcast::resolve(op, ta, tb)?;
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[bcast.index(i)]))
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(value, make(a.idx, b.idx, bcast), &[a.idx, b.idx]))
    }

    /// `a + b`; `b` may be a scalar or per-channel vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |a, b, bcast| Op::Add { a, b, bcast })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, bcast| Op::Sub { a, b, bcast })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, bcast| Op::Mul { a, b, bcast })
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(a)?;
        let ta = self.val(a.idx);
        let value = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x)).collect());
        Ok(self.push(value, op, &[a.idx]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        self.unary(a, |x| x * k, Op::Scale { a: a.idx, k })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x <= T::zero() { T::zero() } else { x }, Op::Relu { a: a.idx })
    }

    /// Logistic function. Outputs are clamped into the open unit interval so
    /// that saturation in low precision never produces exactly 0 or 1.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid_scalar, Op::Sigmoid { a: a.idx })
    }
}

pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    num_traits::clamp(y, T::min_positive_value(), hi)
}

pub(super) fn add_backward<T: Real>(
    tape: &Tape<T>,
    a: usize,
    b: usize,
    bcast: Broadcast,
    g: &[T],
    negate_b: bool,
    out: &mut Vec<(usize, Vec<T>)>,
) {
    if tape.needs(a) {
        out.push((a, g.to_vec()));
    }
    if tape.needs(b) {
        let mut gb = bcast.reduce(g, tape.val(b).numel());
        if negate_b {
            gb.iter_mut().for_each(|x| *x = -*x);
        }
        out.push((b, gb));
    }
}

pub(super) fn mul_backward<T: Real>(
    tape: &Tape<T>,
    a: usize,
    b: usize,
    bcast: Broadcast,
    g: &[T],
    out: &mut Vec<(usize, Vec<T>)>,
) {
    let (ad, bd) = (tape.val(a).data(), tape.val(b).data());
    if tape.needs(a) {
        let ga = g
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[bcast.index(i)])
            .collect();
        out.push((a, ga));
    }
    if tape.needs(b) {
        let full: Vec<T> = g.iter().zip(ad).map(|(&x, &y)| x * y).collect();
        out.push((b, bcast.reduce(&full, bd.len())));
    }
}

pub(super) fn relu_backward<T: Real>(tape: &Tape<T>, a: usize, g: &[T], out: &mut Vec<(usize, Vec<T>)>) {
    if tape.needs(a) {
        let x = tape.val(a).data();
        out.push((
            a,
            g.iter()
                .zip(x)
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect(),
        ));
    }
}

pub(super) fn sigmoid_backward<T: Real>(
    tape: &Tape<T>,
    a: usize,
    y: &Tensor<T>,
    g: &[T],
    out: &mut Vec<(usize, Vec<T>)>,
) {
    if tape.needs(a) {
        out.push((
            a,
            g.iter()
                .zip(y.data())
                .map(|(&g, &y)| g * y * (T::one() - y))
                .collect(),
        ));
    }
}
