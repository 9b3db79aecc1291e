//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Absolute floor on the relative-error denominator.
    pub floor: f64,
    /// Check at most this many evenly spaced elements per input.
    pub max_elements_per_input: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-8,
            max_elements_per_input: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Analytic gradients of the scalar loss built by `f` with respect to every
/// input, from a single backward pass.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaves require grad"))
        .collect())
}

/// Compares the analytic gradient of `f` against central differences.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, config: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        passed: true,
    };
    let mut probe = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let stride = match config.max_elements_per_input {
            Some(limit) if limit > 0 && n > limit => n.div_ceil(limit),
            _ => 1,
        };
        for elem in (0..n).step_by(stride) {
            let original = probe[which].data()[elem];
            probe[which].data_mut()[elem] = original + config.step;
            let plus = evaluate(&f, &probe)?;
            probe[which].data_mut()[elem] = original - config.step;
            let minus = evaluate(&f, &probe)?;
            probe[which].data_mut()[elem] = original;
            let numeric = (plus - minus) / (2.0 * config.step);
            let a = grad.data()[elem];
            let err = relative_error(a, numeric, config.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((which, elem));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < config.tolerance;
    Ok(report)
}
