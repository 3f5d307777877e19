#![allow(dead_code)]

use tmage_core::rng::Stream;
use tmage_core::tensor::Tensor;

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, s: &mut Stream) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| s.uniform(lo, hi)).collect())
}

/// Relative error with a small absolute floor for near-zero derivatives.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(x: &Tensor<f64>, i: usize, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let mut plus = x.clone();
    plus.data_mut()[i] += h;
    let mut minus = x.clone();
    minus.data_mut()[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}
