use rayon::prelude::*;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error used by [`grad_check`]: `|a-n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and one var per entry of `inputs` and must return
/// a scalar var. Every input element is perturbed by `±eps`; the result is the
/// worst relative error over all elements of all inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    grad_check_with_fault(f, inputs, eps, None)
}

#[doc(hidden)]
pub fn grad_check_with_fault<F>(f: F, inputs: &[Tensor<f64>], eps: f64, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + Sync,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    if !tape.value(root).is_scalar() {
        return Err(Error::NotScalar(tape.value(root).shape().to_vec()));
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    drop(tape);

    let eval = |which: usize, at: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[at] += delta;
                }
                tape.leaf(t, false)
            })
            .collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.value(root).data()[0])
    };

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let errors = coords
        .par_iter()
        .map(|&(i, j)| {
            let numeric = (eval(i, j, eps)? - eval(i, j, -eps)?) / (2.0 * eps);
            Ok(relative_error(analytic[i][j], numeric))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}
