//! Low-rank adaptation: a trainable delta `(alpha/r) * B @ A` over a frozen
//! base weight.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};

/// Adapter for a logical weight of shape `d_out x d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r x d_in`
    pub a: Array2<f64>,
    /// `d_out x r`
    pub b: Array2<f64>,
    pub alpha: f64,
    pub r: usize,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.r as f64
    }

    fn check(&self, d_out: usize, d_in: usize) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Precondition("LoRA rank must be >= 1".into()));
        }
        if self.a.nrows() != self.r || self.b.ncols() != self.r {
            return Err(Error::ShapeMismatch(format!(
                "adapter rank {} does not match A {}x{} / B {}x{}",
                self.r,
                self.a.nrows(),
                self.a.ncols(),
                self.b.nrows(),
                self.b.ncols()
            )));
        }
        if self.a.ncols() != d_in || self.b.nrows() != d_out {
            return Err(Error::ShapeMismatch(format!(
                "adapter ({}x{} / {}x{}) does not fit base {d_out}x{d_in}",
                self.a.nrows(),
                self.a.ncols(),
                self.b.nrows(),
                self.b.ncols()
            )));
        }
        Ok(())
    }
}

/// `(base + (alpha/r) B A) x` without materializing the adapted matrix.
pub fn lora_forward(
    base_weight: &Array2<f64>,
    adapter: &LoraAdapter,
    x: &Array1<f64>,
) -> Result<Array1<f64>> {
    let (d_out, d_in) = base_weight.dim();
    adapter.check(d_out, d_in)?;
    if x.len() != d_in {
        return Err(Error::ShapeMismatch(format!(
            "input length {} != d_in {d_in}",
            x.len()
        )));
    }
    let mut y = base_weight.dot(x);
    let t = adapter.a.dot(x); // r
    y += &adapter.b.dot(&t).mapv(|v| v * adapter.scaling());
    Ok(y)
}

/// Materialize `base + (alpha/r) B A` for inference-time use.
pub fn lora_merge(base_weight: &Array2<f64>, adapter: &LoraAdapter) -> Result<Array2<f64>> {
    let (d_out, d_in) = base_weight.dim();
    adapter.check(d_out, d_in)?;
    Ok(base_weight + &adapter.b.dot(&adapter.a).mapv(|v| v * adapter.scaling()))
}

/// Row-convention helper used on the transformer hot path: for activations
/// `x` (`T x d_in`) returns the delta `(alpha/r) x A^T B^T` plus the cached
/// intermediate `x A^T` needed for adapter gradients.
pub(crate) fn lora_delta_apply(x: &Array2<f64>, adapter: &LoraAdapter) -> (Array2<f64>, Array2<f64>) {
    let t = x.dot(&adapter.a.t()); // T x r
    let delta = t.dot(&adapter.b.t()).mapv(|v| v * adapter.scaling());
    (delta, t)
}
