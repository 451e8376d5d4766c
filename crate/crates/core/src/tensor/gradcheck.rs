//! Central finite-difference gradient verification.
//!
//! The checker is deliberately independent of the tape: it only evaluates a
//! scalar function of a flat parameter vector and compares against a
//! caller-supplied analytic gradient.

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Relative error with a floor so finite-difference noise on near-zero
/// gradients does not dominate: |a-b| / max(|a|, |b|, 0.01).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Central finite differences of `f` at `x0` over the listed coordinates
/// (all coordinates when `coords` is `None`).
pub fn central_diff(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    coords: Option<&[usize]>,
) -> Vec<(usize, f64)> {
    let mut x = x0.to_vec();
    let indices: Vec<usize> = match coords {
        Some(c) => c.to_vec(),
        None => (0..x0.len()).collect(),
    };
    indices
        .into_iter()
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = f(&x);
            x[i] = orig - step;
            let down = f(&x);
            x[i] = orig;
            (i, (up - down) / (2.0 * step))
        })
        .collect()
}

/// Compare an analytic gradient against central differences of `f`.
pub fn check_gradient(
    name: impl Into<String>,
    f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
    coords: Option<&[usize]>,
) -> GradCheckReport {
    assert_eq!(x0.len(), analytic.len());
    let fd = central_diff(f, x0, step, coords);
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for (i, g_fd) in &fd {
        let e = rel_err(analytic[*i], *g_fd);
        if e > max_rel {
            max_rel = e;
            worst = *i;
        }
    }
    GradCheckReport {
        name: name.into(),
        max_rel_err: max_rel,
        worst_coordinate: worst,
        checked: fd.len(),
        tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x0 = [1.0, -2.0, 0.5];
        let analytic = [2.0, -4.0, 1.0];
        let rep = check_gradient("quadratic", f, &x0, &analytic, FD_STEP, 1e-6, None);
        assert!(rep.passed(), "max rel err {}", rep.max_rel_err);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let f = |x: &[f64]| x[0] * x[0];
        let rep = check_gradient("broken", f, &[3.0], &[5.9], FD_STEP, 1e-4, None);
        assert!(!rep.passed());
    }
}
