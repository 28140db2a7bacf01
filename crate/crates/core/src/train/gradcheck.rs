//! Central-difference gradient verification.

/// Compare an analytic gradient against central finite differences of
/// `loss` at `point`. Returns the maximum relative error
/// `|a - n| / max(1e-12, |a| + |n|)` over all coordinates.
///
/// Meant for 64-bit mode; the step default used in the suites is 1e-6.
pub fn grad_check<F>(loss: F, point: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len());
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let up = loss(&x);
        x[i] = orig - step;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Dual-step variant: each coordinate is compared against central
/// differences at every step in `steps`, keeping the best agreement.
/// A small step is accurate near ReLU kinks; a larger one beats roundoff
/// on tiny-magnitude coordinates. Returns the max over coordinates of the
/// per-coordinate best relative error.
pub fn grad_check_multi<F>(loss: F, point: &[f64], analytic: &[f64], steps: &[f64]) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len());
    assert!(!steps.is_empty());
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        let a = analytic[i];
        let mut best = f64::INFINITY;
        for &h in steps {
            x[i] = orig + h;
            let up = loss(&x);
            x[i] = orig - h;
            let down = loss(&x);
            let numeric = (up - down) / (2.0 * h);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            if rel < best {
                best = rel;
            }
        }
        x[i] = orig;
        if best > worst {
            worst = best;
        }
    }
    worst
}
