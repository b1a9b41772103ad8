//! Central finite differences, used as an independent oracle for every
//! analytic gradient in the crate.

use super::grid::ImageGrid;

/// `(f(t0 + eps) - f(t0 - eps)) / 2eps` for a scalar line function.
pub fn central_difference(eps: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(eps) - f(-eps)) / (2.0 * eps)
}

/// Directional derivative of `f` at `x` along `dir`.
pub fn central_directional(
    x: &ImageGrid,
    dir: &ImageGrid,
    eps: f64,
    mut f: impl FnMut(&ImageGrid) -> f64,
) -> f64 {
    central_difference(eps, |t| f(&x.add_scaled(dir, t)))
}

/// Partial derivative of `f` with respect to coordinate `index` of `params`.
pub fn central_partial(
    params: &mut [f64],
    index: usize,
    eps: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let orig = params[index];
    params[index] = orig + eps;
    let plus = f(params);
    params[index] = orig - eps;
    let minus = f(params);
    params[index] = orig;
    (plus - minus) / (2.0 * eps)
}

/// Fourth-order central difference `(-f(+2h) + 8f(+h) - 8f(-h) + f(-2h)) / 12h`.
///
/// Lets `h` be large enough that cancellation error stays small relative to
/// tiny partial derivatives of a large-magnitude objective.
pub fn central_partial_fourth_order(
    params: &mut [f64],
    index: usize,
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let orig = params[index];
    let mut at = |t: f64, params: &mut [f64]| {
        params[index] = orig + t;
        f(params)
    };
    let d = -at(2.0 * h, params) + 8.0 * at(h, params) - 8.0 * at(-h, params) + at(-2.0 * h, params);
    params[index] = orig;
    d / (12.0 * h)
}

/// Symmetric relative error with an absolute floor so that two values
/// that are both ~0 compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_with_floor(a, b, 1e-12)
}

pub fn rel_err_with_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
