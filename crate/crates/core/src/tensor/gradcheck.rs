//! Finite-difference verification of reverse-mode gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Worst relative error over all probed coordinates.
    pub max_rel_err: f32,
    /// Number of coordinates probed.
    pub probes: usize,
}

/// Compares analytic gradients of `f` against central differences.
///
/// `f` must be a pure function of the parameter values (freeze any sampling
/// before calling) and return a scalar tensor. For each parameter up to
/// `probes_per_param` coordinates are perturbed by `±step`; the relative
/// error uses `|a - n| / (|a| + |n| + 1e-8)`. Non-finite values anywhere in
/// the comparison are an error.
pub fn grad_check(
    f: &dyn Fn() -> Result<Tensor>,
    params: &[Tensor],
    probes_per_param: usize,
    step: f32,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    if !loss.item().is_finite() {
        return Err(Error::Numerical(format!(
            "grad_check: loss is {}",
            loss.item()
        )));
    }
    loss.backward()?;

    let analytic: Vec<Vec<f32>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel_err = 0.0f32;
    let mut probes = 0usize;
    for (p, grad) in params.iter().zip(&analytic) {
        let n = p.numel();
        let coords: Vec<usize> = if n <= probes_per_param {
            (0..n).collect()
        } else {
            (0..probes_per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for &j in &coords {
            let orig = p.data()[j];
            p.data_mut(|d| d[j] = orig + step);
            let fp = f()?.item() as f64;
            p.data_mut(|d| d[j] = orig - step);
            let fm = f()?.item() as f64;
            p.data_mut(|d| d[j] = orig);

            let numeric = ((fp - fm) / (2.0 * step as f64)) as f32;
            let a = grad[j];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "grad_check: non-finite gradient at coord {j} (analytic {a}, numeric {numeric})"
                )));
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            max_rel_err = max_rel_err.max(rel);
            probes += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err, probes })
}
