//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values on fresh tapes, so it
//! stays independent of the backward rules it is used to verify.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Entries whose stencil crosses a kink (a rectifier, `abs` or `clamp`
    /// input changes side between `x − eps` and `x + eps`); the function is
    /// not differentiable there, so they are not compared.
    pub skipped: usize,
}

/// Relative-error floor: gradient entries smaller than this are compared
/// on an absolute scale of `floor`.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the tape's gradient of the scalar `f(inputs)` against central
/// differences with step `eps`, at every entry of every input (or at most
/// `max_entries` evenly spaced entries per input when given).
pub fn check_gradient<F>(f: F, inputs: &[Tensor], eps: f64, max_entries: Option<usize>) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let eval = |values: &[Tensor]| -> (f64, Vec<u8>) {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.variable(v.clone())).collect();
        let out = f(&mut t, &vs);
        (t.value(out).item(), t.kink_pattern())
    };
    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, skipped: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let n = inputs[i].len();
        let stride = max_entries.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for k in (0..n).step_by(stride) {
            let orig = inputs[i].data()[k];
            work[i].data_mut()[k] = orig + eps;
            let (up, up_kinks) = eval(&work);
            work[i].data_mut()[k] = orig - eps;
            let (down, down_kinks) = eval(&work);
            work[i].data_mut()[k] = orig;
            if up_kinks != down_kinks {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[k];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report
}
