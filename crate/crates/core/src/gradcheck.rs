//! Central finite-difference checks of analytic gradients along random directions.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DirectionCheck {
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Relative error with a floor on the denominator, so directions along which
/// the function is flat compare absolutely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `grad · d` with `(f(p + eps d) - f(p - eps d)) / (2 eps)` for
/// `n_dirs` unit directions drawn from a seeded Gaussian.
pub fn check_directions(
    f: &mut dyn FnMut(&[f64]) -> f64,
    params: &[f64],
    grad: &[f64],
    n_dirs: usize,
    eps: f64,
    seed: u64,
) -> Vec<DirectionCheck> {
    assert_eq!(params.len(), grad.len());
    let mut rng = seed::stream(seed, "gradcheck", 0);
    let mut out = Vec::with_capacity(n_dirs);
    let mut p = params.to_vec();
    for _ in 0..n_dirs {
        let mut d: Vec<f64> = (0..params.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);
        let analytic: f64 = grad.iter().zip(&d).map(|(g, v)| g * v).sum();
        for ((q, &p0), v) in p.iter_mut().zip(params).zip(&d) {
            *q = p0 + eps * v;
        }
        let fp = f(&p);
        for ((q, &p0), v) in p.iter_mut().zip(params).zip(&d) {
            *q = p0 - eps * v;
        }
        let fm = f(&p);
        let numeric = (fp - fm) / (2.0 * eps);
        out.push(DirectionCheck {
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric, 1e-8),
        });
    }
    out
}

pub fn max_rel_err(checks: &[DirectionCheck]) -> f64 {
    checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_wrong_gradient_fails() {
        let p = vec![0.3, -1.2, 2.0];
        let mut f = |x: &[f64]| x.iter().map(|v| v * v * v).sum::<f64>();
        let g: Vec<f64> = p.iter().map(|v| 3.0 * v * v).collect();
        assert!(max_rel_err(&check_directions(&mut f, &p, &g, 5, 1e-4, 1)) < 1e-6);
        let bad: Vec<f64> = g.iter().map(|v| v * 1.1).collect();
        assert!(max_rel_err(&check_directions(&mut f, &p, &bad, 5, 1e-4, 1)) > 1e-2);
    }
}
