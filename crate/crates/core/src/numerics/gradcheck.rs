//! Central-difference verification of tape adjoints.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::{Precision, Tensor};

/// Per-input outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub max_rel_error: f64,
    /// Flat position of the worst entry, with both gradient values there.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// `|a - b| / (|a| + |b| + 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-8)
}

/// Compares tape adjoints of a scalar-valued `function` against central
/// differences `(f(x+h) - f(x-h)) / 2h`, always in double precision.
///
/// `function` must be deterministic: it is evaluated twice at the base point
/// and any difference invalidates the check.
pub fn grad_check<F>(function: F, inputs: &[Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::param(format!("finite-difference step must be positive, got {step}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(Precision::Double);
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t)).collect();
        let out = function(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar function".into()));
        }
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new(Precision::Double);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t)).collect();
    let out = function(&mut tape, &vars)?;
    let base = tape.value(out).item();
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("variables always carry gradients"))
        .collect();

    let again = eval(inputs)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::CheckInvalid(format!(
            "function is not deterministic: {base} then {again} at the same point"
        )));
    }

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (idx, grad) in analytic.iter().enumerate() {
        let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
        for e in 0..inputs[idx].len() {
            let orig = inputs[idx].data()[e];
            work[idx].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[idx].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[idx].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad.data()[e], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, e, grad.data()[e], numeric);
            }
        }
        reports.push(InputReport {
            index: idx,
            max_rel_error: worst.0,
            worst_entry: worst.1,
            analytic: worst.2,
            numeric: worst.3,
        });
    }
    Ok(GradCheckReport { inputs: reports, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::from_fn(&[3, 2], |i| 0.3 * i as f64 - 0.5);
        let x = Tensor::from_fn(&[2, 3], |i| (i as f64).cos());
        let report = grad_check(
            |tape, v| {
                let y = tape.matmul(v[1], v[0])?;
                Ok(tape.sum(y))
            },
            &[w, x],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn softmax_cross_entropy_three_classes() {
        let logits = Tensor::new(vec![1, 3], vec![0.2, -1.3, 0.8]).unwrap();
        let report = grad_check(|tape, v| tape.cross_entropy(v[0], &[1]), std::slice::from_ref(&logits), 1e-5, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");

        // the analytic form softmax(x) - onehot, independent of the tape
        let m = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.data().iter().map(|v| (v - m).exp()).sum();
        let expected: Vec<f64> = logits
            .data()
            .iter()
            .enumerate()
            .map(|(j, v)| (v - m).exp() / z - if j == 1 { 1.0 } else { 0.0 })
            .collect();
        let mut tape = Tape::new(Precision::Double);
        let l = tape.variable(&logits);
        let ce = tape.cross_entropy(l, &[1]).unwrap();
        tape.backward(ce).unwrap();
        for (a, b) in tape.grad(l).unwrap().data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0u32);
        let err = grad_check(
            |tape, v| {
                calls.set(calls.get() + 1);
                let s = tape.sum(v[0]);
                Ok(tape.scale(s, calls.get() as f64))
            },
            &[Tensor::ones(&[2])],
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, Error::CheckInvalid(_)));
    }
}
