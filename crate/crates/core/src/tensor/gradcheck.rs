//! Central-difference gradient checking against the tape.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Largest relative error between the tape gradient of scalar `f` at `input`
/// and `(f(x + eps) - f(x - eps)) / (2 eps)`, over all coordinates.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_with(f, input, eps).map(|r| r.max_rel_err)
}

pub fn grad_check_with<F>(f: F, input: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..input.len()).collect();
    grad_check_at(f, input, eps, &all)
}

/// Like [`grad_check_with`] but only probes the flat coordinates `indices`;
/// `analytic` and `numeric` follow their order, `worst_index` is a flat index.
pub fn grad_check_at<F>(
    f: F,
    input: &Tensor<f64>,
    eps: f64,
    indices: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if let Some(&i) = indices.iter().find(|&&i| i >= input.len()) {
        return Err(dim_err!(
            "grad_check: index {i} out of range for {} elements",
            input.len()
        ));
    }
    let eval = |x: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let x = tape.param(input.clone());
    let out = f(&mut tape, x)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = match tape.grad(x) {
        Some(g) => indices.iter().map(|&i| g.data()[i]).collect(),
        None => vec![0.0; indices.len()],
    };

    let mut numeric = Vec::with_capacity(indices.len());
    let mut probe = input.clone();
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }

    let (mut max_rel_err, mut worst_index) = (0.0f64, 0);
    for ((&i, &a), &n) in indices.iter().zip(&analytic).zip(&numeric) {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    })
}

fn scalar_of<T: Scalar>(tape: &Tape<T>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(dim_err!(
            "grad_check: function must be scalar-valued, got {:?}",
            v.shape()
        ));
    }
    let s = v.data()[0].f64();
    if !s.is_finite() {
        return Err(Error::Numeric(format!("grad_check: non-finite output {s}")));
    }
    Ok(s)
}
