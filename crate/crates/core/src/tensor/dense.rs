use super::tape::{Op, Tape};
use super::{gemm, Real, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Real> Tape<T> {
    /// Affine map `input[N×F] · weight[F×U] + bias[U]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        let (x, wt) = (self.val(input.idx), self.val(weight.idx));
        let (n, f, u) = match (x.shape(), wt.shape()) {
            ([n, f], [f2, u]) if f == f2 => (*n, *f, *u),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "dense",
                    left: x.shape().to_vec(),
                    right: wt.shape().to_vec(),
                })
            }
        };
        let mut out = vec![T::zero(); n * u];
        if let Some(b) = bias {
            self.check(b)?;
            let bt = self.val(b.idx);
            if bt.shape() != [u] {
                return Err(Error::ShapeMismatch {
                    op: "dense bias",
                    left: vec![u],
                    right: bt.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(u) {
                row.copy_from_slice(bt.data());
            }
        }
        gemm::nn(n, f, u, x.data(), wt.data(), &mut out);
        let value = Tensor::from_parts(vec![n, u], out);
        let mut inputs = vec![input.idx, weight.idx];
        inputs.extend(bias.map(|b| b.idx));
        Ok(self.push(
            value,
            Op::Dense {
                input: input.idx,
                weight: weight.idx,
                bias: bias.map(|b| b.idx),
            },
            &inputs,
        ))
    }
}

pub(super) fn dense_backward<T: Real>(
    tape: &Tape<T>,
    input: usize,
    weight: usize,
    bias: Option<usize>,
    g: &[T],
    out: &mut Vec<(usize, Vec<T>)>,
) {
    let (x, wt) = (tape.val(input), tape.val(weight));
    let (n, f) = (x.shape()[0], x.shape()[1]);
    let u = wt.shape()[1];
    if tape.needs(input) {
        let mut dx = vec![T::zero(); n * f];
        gemm::nt(n, u, f, g, wt.data(), &mut dx);
        out.push((input, dx));
    }
    if tape.needs(weight) {
        let mut dw = vec![T::zero(); f * u];
        gemm::tn(n, f, u, x.data(), g, &mut dw);
        out.push((weight, dw));
    }
    if let Some(b) = bias.filter(|&b| tape.needs(b)) {
        let mut db = vec![T::zero(); u];
        for row in g.chunks(u) {
            db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
        }
        out.push((b, db));
    }
}
