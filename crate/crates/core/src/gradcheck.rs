//! Central finite-difference gradient checker.

use crate::error::{Error, Result};

pub const GRAD_CHECK_STEP: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where the worst disagreement was found.
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates that needed a smaller step (see [`grad_check_kink_aware`]).
    pub refined: usize,
}

/// Compares the analytic gradient returned by `objective` at `params` against
/// central differences, over every coordinate.
///
/// Relative error per coordinate is `|a − n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(objective: F, params: &[f64], step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let all: Vec<usize> = (0..params.len()).collect();
    grad_check_coords(objective, params, &all, step)
}

/// Like [`grad_check`] but only perturbs the listed coordinates.
pub fn grad_check_coords<F>(objective: F, params: &[f64], coords: &[usize], step: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    check_impl(objective, params, coords, step, None)
}

/// Number of times the step is divided by 10 for a failing coordinate.
pub const REFINEMENTS: usize = 2;

/// Like [`grad_check_coords`], for piecewise-smooth objectives (ReLU nets).
///
/// A coordinate whose error is at least `tolerance` is re-measured with the
/// step divided by 10, up to [`REFINEMENTS`] times. A ReLU kink inside
/// `[x − h, x + h]` disappears at a smaller step; a wrong gradient does not.
pub fn grad_check_kink_aware<F>(
    objective: F,
    params: &[f64],
    coords: &[usize],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    check_impl(objective, params, coords, step, Some(tolerance))
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn central<F>(objective: &mut F, probe: &mut [f64], i: usize, step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let orig = probe[i];
    probe[i] = orig + step;
    let plus = objective(probe)?.0;
    probe[i] = orig - step;
    let minus = objective(probe)?.0;
    probe[i] = orig;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Numeric(format!("objective not finite near coordinate {i}")));
    }
    Ok((plus - minus) / (2.0 * step))
}

fn check_impl<F>(
    mut objective: F,
    params: &[f64],
    coords: &[usize],
    step: f64,
    refine_above: Option<f64>,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::Precondition(format!("finite-difference step {step}")));
    }
    let (value, analytic) = objective(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective value {value} at base point")));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} gradient entries for {} parameters", analytic.len(), params.len()),
        ));
    }
    let mut probe = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
        refined: 0,
    };
    for &i in coords {
        if i >= params.len() {
            return Err(Error::shape("grad_check", format!("coordinate {i} out of range")));
        }
        let mut rel = relative_error(analytic[i], central(&mut objective, &mut probe, i, step)?);
        if let Some(tol) = refine_above {
            let mut h = step;
            for _ in 0..REFINEMENTS {
                if rel < tol {
                    break;
                }
                h /= 10.0;
                rel = relative_error(analytic[i], central(&mut objective, &mut probe, i, h)?);
            }
            if h < step {
                report.refined += 1;
            }
        }
        if report.checked == 0 || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let r = grad_check(|w| Ok((w[0] * w[0], vec![2.0 * w[0]])), &[3.0], GRAD_CHECK_STEP).unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let r = grad_check(
            |w| Ok((w[0] * w[0] + w[1].powi(3), vec![2.0 * w[0] * 1.1, 3.0 * w[1] * w[1] * 1.1])),
            &[3.0, -2.0],
            GRAD_CHECK_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.05, "{}", r.max_rel_error);
    }

    #[test]
    fn non_finite_objective_is_a_numeric_error() {
        let r = grad_check(|w| Ok((1.0 / w[0] - f64::INFINITY, vec![0.0])), &[1.0], GRAD_CHECK_STEP);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn kink_inside_the_window_is_refined_away() {
        // |w| at w = 3e-6: the step straddles the kink, a tenth of it does not.
        let f = |w: &[f64]| Ok((w[0].abs(), vec![w[0].signum()]));
        let plain = grad_check(f, &[3e-6], GRAD_CHECK_STEP).unwrap();
        assert!(plain.max_rel_error > 0.5);
        let aware = grad_check_kink_aware(f, &[3e-6], &[0], GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE).unwrap();
        assert!(aware.max_rel_error < 1e-8);
        assert_eq!(aware.refined, 1);
    }

    #[test]
    fn refinement_does_not_hide_wrong_gradients() {
        let f = |w: &[f64]| Ok((w[0].abs(), vec![1.1 * w[0].signum()]));
        let r = grad_check_kink_aware(f, &[0.5], &[0], GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE).unwrap();
        assert!(r.max_rel_error > 0.05);
    }

    #[test]
    fn worst_coordinate_is_reported() {
        let r = grad_check(
            |w| Ok((w[0] + 5.0 * w[1], vec![1.0, 4.0])),
            &[0.0, 0.0],
            GRAD_CHECK_STEP,
        )
        .unwrap();
        assert_eq!(r.worst_index, 1);
        assert!((r.max_rel_error - 0.2).abs() < 1e-6);
    }
}
