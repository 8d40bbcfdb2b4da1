use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing the tape gradient against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
}

/// Denominator floor so that gradients which are zero on both sides compare equal.
const REL_FLOOR: f64 = 1e-6;

fn evaluate<F>(f: &F, point: &Tensor) -> Result<(f64, Option<Tensor>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    if !tape.value(y).is_scalar() {
        return Err(Error::NonScalarRoot(tape.value(y).shape().to_vec()));
    }
    let value = tape.value(y).item();
    let mut grads = tape.backward(y)?;
    Ok((value, grads.take(x)))
}

/// Max relative error over coordinates between the analytic gradient of the
/// scalar function `f` at `point` and central differences with step
/// `step * max(1, |x_i|)`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (_, analytic) = evaluate(&f, point)?;
    let analytic = analytic.unwrap_or_else(|| Tensor::zeros(point.shape()));
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_coordinate: 0,
    };
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        let h = step * x0.abs().max(1.0);
        probe.data_mut()[i] = x0 + h;
        let plus = evaluate(&f, &probe).map(|r| r.0);
        probe.data_mut()[i] = x0 - h;
        let minus = evaluate(&f, &probe).map(|r| r.0);
        probe.data_mut()[i] = x0;
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
            _ => return Err(Error::FiniteDiff { coordinate: i }),
        };
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: rel,
                worst_coordinate: i,
            };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let point = Tensor::from_vec(vec![0.3, -1.7, 12.0, 40.0]);
        let check = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error <= 1e-6, "{check:?}");
    }

    #[test]
    fn constant_function_reports_zero() {
        let point = Tensor::from_vec(vec![1.0, 2.0]);
        let check = finite_diff_check(
            |t, x| {
                let z = t.scale(x, 0.0)?;
                let s = t.sum(z)?;
                t.add_scalar(s, 3.0)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert_eq!(check.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_perturbation_names_coordinate() {
        // log(x) at x = 1e-9: the minus step lands below zero.
        let point = Tensor::from_vec(vec![1.0, 1e-9]);
        let err = finite_diff_check(
            |t, x| {
                let l = t.log(x)?;
                t.sum(l)
            },
            &point,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::FiniteDiff { coordinate: 1 }), "{err:?}");
    }
}
