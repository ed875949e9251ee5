//! Finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::tensor::{Tensor, TensorError};

pub mod suite;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms: central
/// differences of O(10) losses carry ~1e-9 roundoff at this step.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinates where the function is not smooth at the FD scale
    /// (halving the step changes the estimate by more than `tol`); these
    /// are excluded from `max_rel_error` but counted.
    pub nonsmooth: usize,
    pub failures: Vec<CoordError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.nonsmooth += other.nonsmooth;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.failures.extend(other.failures);
    }
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compare `analytic[i]` against central differences of `eval` around `x0`
/// for every index in `coords`.
pub fn compare_with_fd(
    x0: &[f64],
    analytic: &[f64],
    coords: &[usize],
    tol: f64,
    mut eval: impl FnMut(&[f64]) -> Result<f64, TensorError>,
) -> Result<GradCheckReport, TensorError> {
    let mut x = x0.to_vec();
    let mut central = |x: &mut Vec<f64>, i: usize, h: f64| -> Result<f64, TensorError> {
        let orig = x[i];
        x[i] = orig + h;
        let fp = eval(x)?;
        x[i] = orig - h;
        let fm = eval(x)?;
        x[i] = orig;
        Ok((fp - fm) / (2.0 * h))
    };
    let mut report = GradCheckReport {
        tol,
        checked: 0,
        max_rel_error: 0.0,
        nonsmooth: 0,
        failures: Vec::new(),
    };
    for &i in coords {
        let numeric = central(&mut x, i, FD_STEP)?;
        let err = rel_error(analytic[i], numeric);
        report.checked += 1;
        if err < tol {
            report.max_rel_error = report.max_rel_error.max(err);
            continue;
        }
        let half = central(&mut x, i, FD_STEP / 2.0)?;
        if rel_error(numeric, half) > tol {
            report.nonsmooth += 1;
            continue;
        }
        report.max_rel_error = report.max_rel_error.max(err);
        report.failures.push(CoordError {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error: err,
        });
    }
    Ok(report)
}

/// Check the gradient of a scalar tensor function at `point` over all
/// coordinates.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(f, point, &coords, tol)
}

/// As [`grad_check`], restricted to `coords`.
pub fn grad_check_coords<F>(
    f: F,
    point: &Tensor<f64>,
    coords: &[usize],
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let x = g.input(point.clone(), true);
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .wrt(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);
    let shape = point.shape().to_vec();
    compare_with_fd(point.data(), &analytic, coords, tol, |xs| {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(shape.clone(), xs.to_vec())?, false);
        let y = f(&mut g, x)?;
        Ok(g.value(y).data()[0])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = sum((A x) * x) with a fixed A.
        let a = Tensor::from_f64(&[3, 3], &[2.0, -1.0, 0.5, 0.0, 1.5, 3.0, -2.0, 1.0, 0.25]).unwrap();
        let x0 = Tensor::from_f64(&[1, 3], &[0.3, -1.2, 2.0]).unwrap();
        let report = grad_check(
            |g, x| {
                let w = g.constant(a.clone());
                let ax = g.linear(x, w, None)?;
                let p = g.mul(ax, x)?;
                Ok(g.sum(p))
            },
            &x0,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let x0 = vec![1.0, 2.0];
        let wrong = vec![2.0, 5.0];
        let r = compare_with_fd(&x0, &wrong, &[0, 1], 1e-6, |x| Ok(x[0] * x[0] + x[1] * x[1])).unwrap();
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].index, 1);
    }
}
