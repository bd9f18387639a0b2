use super::{Tape, Tensor};
use crate::error::{Error, Result};

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i − numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("grad_check eps must be positive, got {eps}")));
    }
    let tape = Tape::new();
    let var = tape.leaf(x);
    let loss = f(&var)?;
    loss.backward()?;
    let analytic = var.grad().unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let probe = Tensor::new(x.shape().to_vec(), values)?;
        Ok(f(&probe)?.item())
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
