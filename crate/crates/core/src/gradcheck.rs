//! Central finite differences, the independent oracle for tape gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Central-difference gradient of the scalar function `f` at `x`:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let indices: Vec<usize> = (0..x.numel()).collect();
    let partial = finite_diff_at(f, x, h, &indices)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), partial))
}

/// Central differences at a subset of flat indices, in the given order.
pub fn finite_diff_at<F>(mut f: F, x: &Tensor, h: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective evaluated to {plus} / {minus} while perturbing element {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error length mismatch");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}
