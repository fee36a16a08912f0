//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(1, |analytic|)`, worst entry.
    pub max_rel_err: f64,
    /// (input index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences of step `h` on every entry of every input.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
