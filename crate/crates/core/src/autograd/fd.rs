use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient estimate `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_gradient" });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}
