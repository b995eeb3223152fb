//! Shared helpers for unit tests: finite differences and closeness asserts.

/// Central finite difference of a scalar function along one coordinate.
pub(crate) fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut lo = x.to_vec();
    let mut hi = x.to_vec();
    lo[i] -= h;
    hi[i] += h;
    (f(&hi) - f(&lo)) / (2.0 * h)
}

/// Relative closeness with an absolute floor for values near zero.
pub(crate) fn assert_rel_close(actual: f64, expected: f64, rel: f64, context: &str) {
    let scale = expected.abs().max(1.0);
    let err = (actual - expected).abs() / scale;
    assert!(
        err <= rel,
        "{context}: actual {actual} vs expected {expected} (relative error {err:.3e} > {rel:.1e})"
    );
}
