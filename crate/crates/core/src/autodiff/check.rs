//! Central finite-difference verification of tape gradients.

use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check, with the worst coordinate located.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter position, flat entry index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

fn evaluate<F>(params: &[Matrix], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.parameter(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite {
            op: "finite_diff_check",
        });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` against central differences with step `h`.
///
/// `f` must be deterministic: it is re-run twice per coordinate.
pub fn finite_diff_report<F>(params: &[Matrix], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Contract(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.parameter(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Matrix> = vars
        .iter()
        .map(|&v| {
            grads
                .get(v)
                .cloned()
                .expect("parameters always get gradients")
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.data().len() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + h;
            let plus = evaluate(&work, &f)?;
            work[pi].data_mut()[k] = orig - h;
            let minus = evaluate(&work, &f)?;
            work[pi].data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[pi].data()[k];
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    worst: (pi, k),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}

/// Max relative error `|analytic − numeric| / (|numeric| + 1e-8)` over all coordinates.
pub fn finite_diff_check<F>(params: &[Matrix], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_report(params, h, f).map(|r| r.max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let err =
            finite_diff_check(&[Matrix::scalar(3.0)], 1e-5, |t, p| t.mul(p[0], p[0])).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let report = finite_diff_report(&[Matrix::filled(2, 2, 1.5)], 1e-5, |t, _| {
            t.constant(Matrix::scalar(4.0))
        })
        .unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        assert_eq!(report.analytic, 0.0);
        assert_eq!(report.numeric, 0.0);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(finite_diff_check(&[Matrix::scalar(1.0)], 0.0, |t, p| t.sum(p[0])).is_err());
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        // exp(x) overflows once x is nudged past the largest finite exponent.
        let res = finite_diff_check(&[Matrix::scalar(709.78)], 0.01, |t, p| t.exp(p[0]));
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }
}
