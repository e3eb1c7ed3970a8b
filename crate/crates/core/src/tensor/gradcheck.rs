//! Central finite-difference gradient checking in double precision.

use super::{Result, Tape, Tensor, Var};

/// Denominator floor for the relative error, so that entries whose true
/// gradient is (numerically) zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out)?.item())
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h`, for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, inputs[i].shape());
        for e in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[e];
            work[i].data_mut()[e] = x0 + h;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[e] = x0 - h;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            let r = rel_error(a, numeric);
            report.checked += 1;
            if r > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = r.max(report.max_rel_error);
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}
