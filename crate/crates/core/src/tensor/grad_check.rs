//! Central finite-difference gradient checking.

/// Outcome of one gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all checked coordinates.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    /// Combines reports from several parameter groups.
    pub fn merge(self, other: GradReport) -> GradReport {
        let mut best = if other.max_rel_err > self.max_rel_err {
            other
        } else {
            self
        };
        best.checked = self.checked + other.checked;
        best
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` with `(f(x + h e_i) - f(x - h e_i)) / 2h` for every `i`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> GradReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let mut probe = x.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: x.len(),
    };
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = rel_err(analytic[i], numeric);
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes_and_corruption_fails() {
        let f = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let x = [0.3, -1.2, 2.0];
        let good: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        assert!(grad_check(f, &x, &good, 1e-5).passes(1e-8));
        let bad: Vec<f64> = good.iter().map(|g| 2.0 * g).collect();
        let r = grad_check(f, &x, &bad, 1e-5);
        assert!(!r.passes(1e-3));
        assert!((r.max_rel_err - 0.5).abs() < 1e-6);
    }
}
