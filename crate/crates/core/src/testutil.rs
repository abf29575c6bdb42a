//! Shared helpers for unit tests: central finite differences and random
//! input generation. Test-only; the gradient oracle must stay independent
//! of the tape implementation it checks.

use crate::rng::RngState;
use alloc::vec::Vec;

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub(crate) fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Relative error with a floor: values that are both below `1e-6` in
/// magnitude count as equal (finite differences carry about that much
/// cancellation noise at h=1e-5).
pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

pub(crate) fn assert_grads_close(analytic: &[f64], fd: &[f64], tol: f64, what: &str) {
    assert_eq!(analytic.len(), fd.len(), "{what}: gradient lengths differ");
    for (i, (a, b)) in analytic.iter().zip(fd).enumerate() {
        let err = rel_err(*a, *b);
        assert!(
            err < tol,
            "{what}: gradient {i} disagrees: tape {a} vs fd {b} (rel err {err:.3e})"
        );
    }
}

pub(crate) fn rand_vec(rng: &mut RngState, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.next_symmetric(limit)).collect()
}
