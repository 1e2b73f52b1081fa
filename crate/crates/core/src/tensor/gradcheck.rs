use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// (input index, coordinate) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Max relative error between the tape gradient of `f` at `at` and central
/// differences of step `step`, over every coordinate. The denominator is
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, at: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = finite_diff_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(at), step, None)?;
    Ok(report.max_rel_error)
}

/// Same comparison for a function of several tensors. `coords` restricts the
/// check to `(input index, flat coordinate)` pairs; `None` checks everything.
pub fn finite_diff_check_multi<F>(f: F, at: &[Tensor], step: f64, coords: Option<&[(usize, usize)]>) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_floor(f, at, step, coords, DEFAULT_FLOOR)
}

pub const DEFAULT_FLOOR: f64 = 1e-8;

/// [`finite_diff_check_multi`] with the relative-error denominator floored at
/// `floor` instead of 1e-8, for deep chains whose tiny gradients sit at the
/// level of central-difference rounding noise.
pub fn finite_diff_check_floor<F>(
    f: F,
    at: &[Tensor],
    step: f64,
    coords: Option<&[(usize, usize)]>,
    floor: f64,
) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step {step}")));
    }
    if !(floor > 0.0 && floor.is_finite()) {
        return Err(Error::invalid(format!("denominator floor {floor}")));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
        }
        if !v[0].is_finite() {
            return Err(Error::NonFinite(format!("function value {}", v[0])));
        }
        Ok(v[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = at.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(at)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = at
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut work: Vec<Tensor> = at.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &(i, j) in coords {
        if i >= at.len() || j >= at[i].numel() {
            return Err(Error::invalid(format!("coordinate ({i}, {j}) out of range")));
        }
        let orig = at[i].data()[j];
        work[i].data_mut()[j] = orig + step;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - step;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i][j];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = rel;
            report.worst = (i, j);
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let at = Tensor::vector(&[0.3, -1.2, 2.5, 4.0]);
        let err = finite_diff_check(
            |tape, x| {
                let s = tape.square(x)?;
                tape.sum(s)
            },
            &at,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_rule_is_detected() {
        // x^2 registered with derivative x instead of 2x.
        let at = Tensor::vector(&[0.7, -1.3, 2.0]);
        let err = finite_diff_check(
            |tape, x| {
                let v: Vec<f64> = tape.value(x).iter().map(|a| a * a).collect();
                let shape = tape.shape(x).to_vec();
                let y = tape.custom(
                    &[x],
                    shape,
                    v,
                    Box::new(|ins, _, g| vec![Some(ins[0].iter().zip(g).map(|(a, gi)| a * gi).collect())]),
                )?;
                tape.sum(y)
            },
            &at,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let at = Tensor::vector(&[1.0]);
        assert!(finite_diff_check(|t, x| t.sum(x), &at, 0.0).is_err());
        let at = Tensor::vector(&[1e300]);
        let r = finite_diff_check(
            |t, x| {
                let s = t.square(x)?;
                t.sum(s)
            },
            &at,
            1e-5,
        );
        assert!(r.is_err());
    }
}
