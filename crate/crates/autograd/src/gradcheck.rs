//! Central finite differences, used by tests to check analytic gradients.

use crate::{Scalar, Tensor};

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numeric_gradient<T: Scalar>(x: &Tensor<T>, h: f64, mut f: impl FnMut(&Tensor<T>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::cast(orig.as_f64() + h);
        let up = f(&probe);
        probe.data_mut()[i] = T::cast(orig.as_f64() - h);
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), out)
}

/// `|a - b| / max(|a|, |b|, floor)`, maximised over elements.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
