//! Central finite-difference gradient verification.
//!
//! This is the independent oracle for every backward formula on the tape:
//! perturb one coordinate at a time, difference the loss, compare against
//! the analytic gradient. It is test infrastructure that ships in the
//! library so downstream models can check their own composite losses too.

/// Compares `analytic` against a central finite-difference estimate of the
/// gradient of `f` at `point`.
///
/// Returns the worst relative error `|a - n| / max(1, |n|)`, which treats
/// small gradients absolutely and large ones relatively. If `f` returns a
/// non-finite value at any probe the result is NaN, which fails any
/// threshold comparison, as it should.
///
/// `step` is the probe half-width; `1e-5` suits losses whose curvature is
/// O(1). Probe points should stay away from kinks (relu at zero, clamp
/// bounds): the analytic subgradient there is one-sided while the central
/// difference straddles the kink, so disagreement is expected rather than
/// a bug.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&[f64]) -> f64,
    point: &[f64],
    step: f64,
    analytic: &[f64],
) -> f64 {
    assert_eq!(
        point.len(),
        analytic.len(),
        "analytic gradient length must match the point"
    );
    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let up = f(&probe);
        probe[i] = point[i] - step;
        let down = f(&probe);
        probe[i] = point[i];
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        // NaN-aware max: fold would silently drop NaN via f64::max.
        if !(err <= worst) {
            worst = err;
        }
    }
    worst
}
