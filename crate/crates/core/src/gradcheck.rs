//! Central finite-difference gradient checking.
//!
//! Only available in check precision (`f64`); at 32 bits the difference
//! quotient is dominated by rounding.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all entries.
    pub max_rel_error: f64,
    /// `(parameter index, entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

/// Compares tape gradients of `build` against central differences.
///
/// `build` receives one leaf per tensor in `params` (in order) and must return
/// a scalar loss.
pub fn grad_check<B>(build: B, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::config(format!("grad_check eps must be in (0, 1e-3], got {eps}")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad_data(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(tape);

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss)
            .item()
            .ok_or_else(|| Error::NonScalarLoss { shape: tape.shape(loss).to_vec() })
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at perturbed parameter {pi}, entry {ei}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ei];
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.entries += 1;
            if err > report.max_rel_error || report.entries == 1 {
                report.max_rel_error = err;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_eps() {
        let p = [Tensor::scalar(1.0)];
        let f = |t: &mut Tape<f64>, v: &[Var]| Ok(t.sum(v[0]));
        assert!(grad_check(f, &p, 0.0).is_err());
        assert!(grad_check(f, &p, 1e-2).is_err());
        assert!(grad_check(f, &p, 1e-3).is_ok());
    }

    #[test]
    fn reports_non_finite_perturbation() {
        let p = [Tensor::from_f64([2], &[1.0, 0.0]).unwrap()];
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.map(v[0], |x| if x < 0.0 { f64::NAN } else { x }, |_| 1.0);
            Ok(t.sum(y))
        };
        let err = grad_check(f, &p, 1e-5).unwrap_err().to_string();
        assert!(err.contains("parameter 0, entry 1"), "{err}");
    }
}
