use rayon::prelude::*;

use super::tape::{Op, Tape};
use super::{gemm, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Samples per work unit when reducing kernel gradients across a batch. Fixed
/// so the summation order never depends on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let p = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[r * p..(r + 1) * p];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.pad as isize;
                        let row = &mut dst[oi * self.ow..(oi + 1) * self.ow];
                        if y < 0 || y >= self.h as isize {
                            row.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + y as usize) * self.w..][..self.w];
                        for (oj, v) in row.iter_mut().enumerate() {
                            let xx = (oj * self.stride + kj) as isize - self.pad as isize;
                            *v = if xx < 0 || xx >= self.w as isize {
                                T::zero()
                            } else {
                                src[xx as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], dx: &mut [T]) {
        let p = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[r * p..(r + 1) * p];
                    for oi in 0..self.oh {
                        let y = (oi * self.stride + ki) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + y as usize) * self.w..][..self.w];
                        for oj in 0..self.ow {
                            let xx = (oj * self.stride + kj) as isize - self.pad as isize;
                            if xx >= 0 && xx < self.w as isize {
                                dst[xx as usize] += src[oi * self.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Real>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, Geometry)> {
    let (n, c, h, w) = x.dims4("conv2d")?;
    let (o, ci, kh, kw) = k.dims4("conv2d")?;
    if ci != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::InvalidShape {
            op: "conv2d",
            detail: format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            ),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Ok((
        n,
        o,
        Geometry {
            c,
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            stride,
            pad,
        },
    ))
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation with zero padding. `input` is NCHW, `kernel` OIHW,
    /// `bias` (optional) has shape `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.check(input)?;
        self.check(kernel)?;
        let (x, k) = (self.val(input.idx), self.val(kernel.idx));
        let (n, o, geo) = geometry(x, k, stride, pad)?;
        let b = match bias {
            Some(b) => {
                self.check(b)?;
                let bt = self.val(b.idx);
                if bt.shape() != [o] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        left: vec![o],
                        right: bt.shape().to_vec(),
                    });
                }
                Some(bt.data())
            }
            None => None,
        };
        let (r, p) = (geo.rows(), geo.cols());
        let in_sz = geo.c * geo.h * geo.w;
        let (xd, kd) = (x.data(), k.data());
        let mut out = vec![T::zero(); n * o * p];
        out.par_chunks_mut(o * p).enumerate().for_each(|(i, dst)| {
            let mut col = vec![T::zero(); r * p];
            geo.im2col(&xd[i * in_sz..(i + 1) * in_sz], &mut col);
            if let Some(b) = b {
                for (oc, row) in dst.chunks_mut(p).enumerate() {
                    row.fill(b[oc]);
                }
            }
            gemm::nn(o, r, p, kd, &col, dst);
        });
        let value = Tensor::from_parts(vec![n, o, geo.oh, geo.ow], out);
        let mut inputs = vec![input.idx, kernel.idx];
        inputs.extend(bias.map(|b| b.idx));
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.idx,
                kernel: kernel.idx,
                bias: bias.map(|b| b.idx),
                stride,
                pad,
            },
            &inputs,
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<T: Real>(
    tape: &Tape<T>,
    input: usize,
    kernel: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
    g: &[T],
    out: &mut Vec<(usize, Vec<T>)>,
) {
    let (x, k) = (tape.val(input), tape.val(kernel));
    let (n, o, geo) = geometry(x, k, stride, pad).expect("validated in forward");
    let (r, p) = (geo.rows(), geo.cols());
    let in_sz = geo.c * geo.h * geo.w;
    let (xd, kd) = (x.data(), k.data());
    let (need_x, need_k) = (tape.needs(input), tape.needs(kernel));

    if need_x {
        let mut dx = vec![T::zero(); n * in_sz];
        dx.par_chunks_mut(in_sz).enumerate().for_each(|(i, dst)| {
            let mut dcol = vec![T::zero(); r * p];
            gemm::tn(o, r, p, kd, &g[i * o * p..(i + 1) * o * p], &mut dcol);
            geo.col2im(&dcol, dst);
        });
        out.push((input, dx));
    }
    if need_k {
        let partials: Vec<Vec<T>> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(GRAD_CHUNK)
            .map(|samples| {
                let mut dk = vec![T::zero(); o * r];
                let mut col = vec![T::zero(); r * p];
                for &i in samples {
                    geo.im2col(&xd[i * in_sz..(i + 1) * in_sz], &mut col);
                    gemm::nt(o, p, r, &g[i * o * p..(i + 1) * o * p], &col, &mut dk);
                }
                dk
            })
            .collect();
        let mut dk = vec![T::zero(); o * r];
        for part in partials {
            dk.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        out.push((kernel, dk));
    }
    if let Some(b) = bias.filter(|&b| tape.needs(b)) {
        let mut db = vec![T::zero(); o];
        for i in 0..n {
            for (oc, acc) in db.iter_mut().enumerate() {
                let s = &g[(i * o + oc) * p..(i * o + oc + 1) * p];
                *acc += s.iter().copied().sum::<T>();
            }
        }
        out.push((b, db));
    }
}
