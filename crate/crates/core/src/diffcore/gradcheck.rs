use super::matrix::Matrix;
use super::tape::{Tape, Var};
use crate::error::{Result, ScdError};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_err: f64,
    /// (tensor index, flat coordinate) of the worst coordinate.
    pub worst: (usize, usize),
    pub n_coords: usize,
}

fn eval<F>(f: &F, point: &[Matrix]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = tape.scalar_value(out);
    if !v.is_finite() {
        return Err(ScdError::NonFinite(format!("objective value {v}")));
    }
    Ok(v)
}

/// Checks the tape gradient of a scalar function of several tensors against
/// central differences, coordinate by coordinate.
pub fn grad_check<F>(f: F, point: &[Matrix], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(ScdError::invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(ScdError::NonFinite("analytic gradient".into()));
    }

    let mut work: Vec<Matrix> = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        n_coords: 0,
    };
    for t in 0..work.len() {
        for c in 0..work[t].len() {
            let orig = work[t].as_slice()[c];
            work[t].as_mut_slice()[c] = orig + eps;
            let plus = eval(&f, &work)?;
            work[t].as_mut_slice()[c] = orig - eps;
            let minus = eval(&f, &work)?;
            work[t].as_mut_slice()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic[t].as_slice()[c] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = (t, c);
            }
            report.n_coords += 1;
        }
    }
    Ok(report)
}
