//! Finite-difference utilities for validating analytic gradients.

use ndarray::Array2;

use crate::params::ParamStore;

/// Central-difference derivative of `loss` w.r.t. one parameter entry.
///
/// `loss` must be a pure function of the store (rebuild the graph inside it).
pub fn finite_diff_param(
    store: &mut ParamStore,
    name: &str,
    idx: (usize, usize),
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.get(name)[idx];
    store.get_mut(name)[idx] = orig + h;
    let up = loss(store);
    store.get_mut(name)[idx] = orig - h;
    let down = loss(store);
    store.get_mut(name)[idx] = orig;
    (up - down) / (2.0 * h)
}

/// Central-difference derivative of `loss` w.r.t. one entry of a plain array.
pub fn finite_diff_input(
    x: &mut Array2<f64>,
    idx: (usize, usize),
    h: f64,
    mut loss: impl FnMut(&Array2<f64>) -> f64,
) -> f64 {
    let orig = x[idx];
    x[idx] = orig + h;
    let up = loss(x);
    x[idx] = orig - h;
    let down = loss(x);
    x[idx] = orig;
    (up - down) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero pairs compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Assert an analytic gradient matches a finite-difference probe.
pub fn assert_close(analytic: f64, numeric: f64, tol: f64, what: &str) {
    let e = rel_err(analytic, numeric);
    assert!(
        e <= tol,
        "{what}: analytic {analytic:.9e} vs numeric {numeric:.9e} (rel err {e:.3e} > {tol:.1e})"
    );
}
