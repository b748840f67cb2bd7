//! Training objectives: binary cross-entropy on predicted correctness, the
//! contrastive loss between two views, and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Matrix, Tape, Var, GUARD_EPS};
use crate::error::{Result, ScdError};
use crate::model::NodeStates;

/// Summed binary cross-entropy. Predictions are clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn main_loss(tape: &Tape, preds: Var, labels: &[f64]) -> Result<Var> {
    let (n, c) = tape.shape(preds);
    if c != 1 || n != labels.len() {
        return Err(ScdError::Shape {
            op: "main_loss",
            detail: format!("predictions {:?} vs {} labels", (n, c), labels.len()),
        });
    }
    let y = tape.clamp(preds, GUARD_EPS, 1.0 - GUARD_EPS);
    let r = tape.leaf(Matrix::column(labels));
    let not_r = tape.leaf(Matrix::column(&labels.iter().map(|l| 1.0 - l).collect::<Vec<_>>()));
    let not_y = tape.add_scalar(tape.scale(y, -1.0), 1.0);
    let pos = tape.mul(r, tape.log(y))?;
    let neg = tape.mul(not_r, tape.log(not_y))?;
    Ok(tape.scale(tape.sum(tape.add(pos, neg)?), -1.0))
}

/// [`main_loss`] on plain values.
pub fn main_loss_value(preds: &[f64], labels: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let y = tape.leaf(Matrix::column(preds));
    Ok(tape.scalar_value(main_loss(&tape, y, labels)?))
}

/// Mean over rows `i` of
/// `-log( exp(cos(z1_i, z2_i)/tau) / sum_j exp(cos(z1_i, z2_j)/tau) )`,
/// where the denominator runs over `j != i` unless `include_positive`.
pub fn infonce(tape: &Tape, z1: Var, z2: Var, tau: f64, include_positive: bool) -> Result<Var> {
    let (n, _) = tape.shape(z1);
    if tape.shape(z2).0 != n {
        return Err(ScdError::Shape {
            op: "infonce",
            detail: format!("{:?} vs {:?}", tape.shape(z1), tape.shape(z2)),
        });
    }
    if n < 2 {
        return Err(ScdError::invalid(format!(
            "contrastive loss needs at least 2 nodes, got {n}"
        )));
    }
    if !(tau > 0.0) {
        return Err(ScdError::invalid(format!("temperature {tau} must be positive")));
    }
    let logits = tape.scale(tape.cosine(z1, z2)?, 1.0 / tau);
    let mut mask = Matrix::filled(n, n, 1.0);
    if !include_positive {
        for i in 0..n {
            mask.set(i, i, 0.0);
        }
    }
    let mask = tape.leaf(mask);
    let denom = tape.row_sum(tape.mul(tape.exp(logits), mask)?);
    let per_node = tape.sub(tape.log(denom), tape.diag(logits)?)?;
    tape.mean(per_node)
}

/// [`infonce`] on plain matrices.
pub fn infonce_value(z1: &Matrix, z2: &Matrix, tau: f64, include_positive: bool) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.leaf(z1.clone());
    let b = tape.leaf(z2.clone());
    Ok(tape.scalar_value(infonce(&tape, a, b, tau, include_positive)?))
}

/// Student and exercise contrastive terms between two views' final states,
/// restricted to the given node subsets.
pub fn ssl_loss(
    tape: &Tape,
    view1: &NodeStates,
    view2: &NodeStates,
    tau: f64,
    students: &[usize],
    exercises: &[usize],
    include_positive: bool,
) -> Result<(Var, Var)> {
    let rows = |states: &NodeStates, ids: &[usize], final_var: fn(&NodeStates) -> Var| {
        tape.gather(final_var(states), ids.to_vec())
    };
    let s1 = rows(view1, students, NodeStates::final_students)?;
    let s2 = rows(view2, students, NodeStates::final_students)?;
    let e1 = rows(view1, exercises, NodeStates::final_exercises)?;
    let e2 = rows(view2, exercises, NodeStates::final_exercises)?;
    Ok((
        infonce(tape, s1, s2, tau, include_positive)?,
        infonce(tape, e1, e2, tau, include_positive)?,
    ))
}

/// Sum of squares of every given tensor.
pub fn l2_penalty(tape: &Tape, params: &[Var]) -> Result<Var> {
    let mut iter = params.iter();
    let first = iter
        .next()
        .ok_or_else(|| ScdError::invalid("no parameters to regularize"))?;
    let mut acc = tape.sq_norm(*first);
    for &p in iter {
        acc = tape.add(acc, tape.sq_norm(p))?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 1e-4,
            tau: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    pub ssl_student: f64,
    pub ssl_exercise: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl LossBreakdown {
    /// Recomputes `total` from the parts.
    pub fn composed_total(&self) -> f64 {
        self.main + self.lambda1 * (self.ssl_student + self.ssl_exercise) + self.lambda2 * self.reg
    }
}

/// `main + lambda1 * (ssl_s + ssl_e) + lambda2 * reg`.
pub fn total_loss(
    main: f64,
    ssl_student: f64,
    ssl_exercise: f64,
    reg: f64,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("main", main),
        ("ssl_student", ssl_student),
        ("ssl_exercise", ssl_exercise),
        ("reg", reg),
    ] {
        if !v.is_finite() {
            return Err(ScdError::NonFinite(format!("{name} loss = {v}")));
        }
    }
    let mut b = LossBreakdown {
        main,
        ssl_student,
        ssl_exercise,
        reg,
        total: 0.0,
        lambda1: w.lambda1,
        lambda2: w.lambda2,
        tau: w.tau,
    };
    b.total = b.composed_total();
    Ok(b)
}

/// The same combination on tape. `ssl` holds whichever contrastive terms
/// are active; it is empty when the contrastive task is off.
pub fn total_on_tape(tape: &Tape, main: Var, ssl: &[Var], reg: Var, w: &LossWeights) -> Result<Var> {
    let mut total = tape.add(main, tape.scale(reg, w.lambda2))?;
    for &term in ssl {
        total = tape.add(total, tape.scale(term, w.lambda1))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Double loop over explicit cosine values; shares nothing with the tape.
    pub(crate) fn infonce_brute_force(z1: &Matrix, z2: &Matrix, tau: f64, include_positive: bool) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb).max(1e-12)
        };
        let n = z1.rows();
        let mut total = 0.0;
        for i in 0..n {
            let pos = (cos(z1.row(i), z2.row(i)) / tau).exp();
            let mut denom = 0.0;
            for j in 0..n {
                if j != i || include_positive {
                    denom += (cos(z1.row(i), z2.row(j)) / tau).exp();
                }
            }
            total += -(pos / denom).ln();
        }
        total / n as f64
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn bce_reference_values() {
        assert_abs_diff_eq!(main_loss_value(&[1.0], &[1.0]).unwrap(), 0.0, epsilon = 1e-11);
        assert_abs_diff_eq!(main_loss_value(&[0.5], &[1.0]).unwrap(), 0.6931471805599453, epsilon = 1e-12);
        assert_abs_diff_eq!(
            main_loss_value(&[0.9, 0.2], &[1.0, 0.0]).unwrap(),
            0.3285040669720361,
            epsilon = 1e-12
        );
        assert!(main_loss_value(&[0.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn bce_gradient_matches_closed_form() {
        for (y, r) in [(0.3, 1.0), (0.7, 0.0), (0.55, 1.0)] {
            let tape = Tape::new();
            let v = tape.leaf(Matrix::column(&[y]));
            let loss = main_loss(&tape, v, &[r]).unwrap();
            let g = tape.backward(loss).unwrap().wrt(v).item();
            assert_abs_diff_eq!(g, (y - r) / (y * (1.0 - y)), epsilon = 1e-9);
        }
    }

    #[test]
    fn infonce_hand_cases() {
        let eye = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(infonce_value(&eye, &eye, 1.0, false).unwrap(), -1.0);
        let same = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert_eq!(infonce_value(&eye, &same, 1.0, false).unwrap(), 0.0);
    }

    #[test]
    fn infonce_errors() {
        let one = m(&[&[1.0, 0.0]]);
        assert!(infonce_value(&one, &one, 1.0, false).is_err());
        let two = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(infonce_value(&two, &two, 0.0, false).is_err());
        assert!(infonce_value(&two, &one, 1.0, false).is_err());
    }

    #[test]
    fn infonce_high_temperature_limit() {
        // all logits -> 0: each node contributes -log(1 / (n - 1))
        let z1 = m(&[&[1.0, 0.2], &[-0.3, 1.0], &[0.5, -0.7]]);
        let z2 = m(&[&[0.1, 1.0], &[1.0, 1.0], &[-1.0, 0.4]]);
        let v = infonce_value(&z1, &z2, 1e9, false).unwrap();
        assert_abs_diff_eq!(v, 2f64.ln(), epsilon = 1e-8);
    }

    #[test]
    fn total_composition() {
        let w = LossWeights { lambda1: 0.1, lambda2: 0.0, tau: 0.5 };
        let b = total_loss(1.0, 1.5, 0.5, 5.0, &w).unwrap();
        assert_abs_diff_eq!(b.total, 1.2, epsilon = 1e-15);
        let w0 = LossWeights { lambda1: 0.0, lambda2: 0.001, tau: 0.5 };
        let b = total_loss(2.0, 9.0, 9.0, 0.0, &w0).unwrap();
        assert_eq!(b.total, 2.0);
        assert!(total_loss(f64::NAN, 0.0, 0.0, 0.0, &w).is_err());
    }

    #[test]
    fn infonce_gradient_check() {
        let z1 = m(&[&[1.0, 0.2, 0.1], &[-0.3, 1.0, 0.4], &[0.5, -0.7, 0.9]]);
        let z2 = m(&[&[0.1, 1.0, -0.2], &[1.0, 1.0, 0.3], &[-1.0, 0.4, 0.8]]);
        for include in [false, true] {
            let r = grad_check(|t, v| infonce(t, v[0], v[1], 0.5, include), &[z1.clone(), z2.clone()], 1e-5)
                .unwrap();
            assert!(r.max_rel_err < 1e-6, "{r:?}");
        }
    }

    fn arb_pair(n: usize) -> impl Strategy<Value = (Matrix, Matrix)> {
        let v = proptest::collection::vec(-2.0f64..2.0, n * 4);
        (v.clone(), v).prop_map(move |(a, b)| {
            (Matrix::from_vec(n, 4, a).unwrap(), Matrix::from_vec(n, 4, b).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn infonce_matches_brute_force((z1, z2) in arb_pair(50), tau in 0.1f64..2.0, include in any::<bool>()) {
            let fast = infonce_value(&z1, &z2, tau, include).unwrap();
            let slow = infonce_brute_force(&z1, &z2, tau, include);
            prop_assert!((fast - slow).abs() < 1e-10, "{} vs {}", fast, slow);
        }

        #[test]
        fn infonce_is_scale_invariant((z1, z2) in arb_pair(6), c in 0.1f64..10.0) {
            let base = infonce_value(&z1, &z2, 0.5, false).unwrap();
            let scaled = infonce_value(&z1.map(|v| v * c), &z2, 0.5, false).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }
}
