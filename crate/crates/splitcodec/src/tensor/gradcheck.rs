//! Central-difference gradient verification.

use ndarray::ArrayD;

use super::tape::{Tape, Var};
use crate::error::{CodecError, Result};
use crate::scalar::Scalar;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport<F: Scalar> {
    pub max_rel_err: F,
    pub worst_coord: usize,
    pub analytic_at_worst: F,
    pub numeric_at_worst: F,
}

/// Checks the reverse-mode gradient of a scalar function against central
/// differences, coordinate by coordinate.
///
/// `build` must construct the function on the given tape from the input
/// variable and return a `[1]`-shaped output. The relative error per
/// coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`;
/// the report carries the maximum over coordinates.
pub fn grad_check<F: Scalar>(
    build: impl Fn(&Tape<F>, Var) -> Var,
    point: &ArrayD<F>,
    epsilon: F,
) -> Result<GradReport<F>> {
    assert!(epsilon > F::zero(), "grad_check: epsilon must be positive");

    let eval = |x: &ArrayD<F>, coord: usize| -> Result<F> {
        let tape: Tape<F> = Tape::new();
        let v = tape.leaf(x.clone());
        let out = build(&tape, v);
        let y = tape.scalar(out);
        if !y.is_finite() {
            return Err(CodecError::NonFinite { op: "grad_check", coord });
        }
        Ok(y)
    };

    // analytic gradient
    let tape: Tape<F> = Tape::new();
    let v = tape.param(point.clone());
    let out = build(&tape, v);
    tape.check_finite(out, "grad_check")?;
    let grads = tape.backward(out);
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(point.raw_dim()));

    let floor = F::from_f64_c(1e-8);
    let mut report = GradReport {
        max_rel_err: F::zero(),
        worst_coord: 0,
        analytic_at_worst: F::zero(),
        numeric_at_worst: F::zero(),
    };
    let analytic_flat: Vec<F> = analytic.iter().copied().collect();
    let n_coords = point.len();
    for coord in 0..n_coords {
        let mut xp = point.clone();
        let mut xm = point.clone();
        {
            let sp = xp.as_slice_mut().unwrap();
            sp[coord] = sp[coord] + epsilon;
        }
        {
            let sm = xm.as_slice_mut().unwrap();
            sm[coord] = sm[coord] - epsilon;
        }
        let fp = eval(&xp, coord)?;
        let fm = eval(&xm, coord)?;
        let numeric = (fp - fm) / (F::from_f64_c(2.0) * epsilon);
        let a = analytic_flat[coord];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = coord;
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn square_function_matches_closely() {
        // f(x) = x^2 at x = 3 with eps = 1e-4: analytic 6 vs numeric 6
        let point = ArrayD::from_elem(IxDyn(&[1]), 3.0f64);
        let rep = grad_check(
            |t, x| {
                let sq = t.mul(x, x);
                t.sum_all(sq)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-6, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let point = ArrayD::from_elem(IxDyn(&[3]), 1.25f64);
        let rep = grad_check(
            |t, x| {
                let z = t.mul_scalar(x, 0.0);
                let c = t.add_scalar(z, 4.0);
                t.mean_all(c)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_function_reports_coordinate() {
        let point = ArrayD::from_elem(IxDyn(&[2]), 0.0f64);
        let err = grad_check(
            |t, x| {
                let l = t.ln(x); // ln(0 +/- eps) goes non-finite on the minus side
                t.sum_all(l)
            },
            &point,
            1e-3,
        );
        assert!(matches!(err, Err(CodecError::NonFinite { .. })));
    }
}
