//! Coupled adaptive corruption: both sub-networks see their realistic input
//! blended with noise, at ratios driven by how much variance the current
//! reconstructions carry relative to the true masks.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.25;
pub const DEFAULT_BETA: f64 = 2.0;
pub const DEFAULT_M_NOISE: f64 = 1e-6;
pub const NOISE_MEAN: f64 = 0.5;
pub const NOISE_SD: f64 = 0.25;

/// Pooled population variance of every value in the batch.
pub fn batch_variance(images: &[&Tensor]) -> Result<f64> {
    let n: usize = images.iter().map(|t| t.numel()).sum();
    if n == 0 {
        return Err(Error::domain("batch_variance", "empty batch"));
    }
    // Shifting by one sample keeps constant batches at exactly zero.
    let pivot = images.iter().find_map(|t| t.data().first().copied()).unwrap_or(0.0);
    let values = || images.iter().flat_map(|t| t.data().iter().map(move |v| v - pivot));
    let mean = values().sum::<f64>() / n as f64;
    Ok(values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseState {
    pub alpha: f64,
    pub beta: f64,
    pub m_noise: f64,
    pub var_ratio: f64,
    pub r_rec: f64,
    pub r_cls: f64,
}

impl NoiseState {
    /// State at `var_ratio = 0`: no reconstruction corruption, maximal
    /// classifier corruption.
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        Self::from_ratio(alpha, beta, 0.0)
    }

    pub fn from_ratio(alpha: f64, beta: f64, var_ratio: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha {alpha} and beta {beta} must be positive"
            )));
        }
        if !(var_ratio >= 0.0 && var_ratio.is_finite()) {
            return Err(Error::domain("noise", format!("variance ratio {var_ratio}")));
        }
        Ok(Self {
            alpha,
            beta,
            m_noise: DEFAULT_M_NOISE,
            var_ratio,
            r_rec: (alpha * var_ratio).tanh(),
            r_cls: (1.0 - (beta * var_ratio).tanh()).tanh(),
        })
    }

    /// Recomputes both ratios from a reconstruction batch and its targets.
    pub fn update_ratios(&self, generated: &[&Tensor], targets: &[&Tensor]) -> Result<Self> {
        if generated.len() != targets.len() || generated.iter().zip(targets).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::invalid("generated and target batches differ in shape"));
        }
        let ratio = batch_variance(generated)? / (batch_variance(targets)? + self.m_noise);
        let mut next = Self::from_ratio(self.alpha, self.beta, ratio)?;
        next.m_noise = self.m_noise;
        Ok(next)
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::domain("corrupt", format!("ratio {r} outside [0, 1]")));
    }
    Ok(())
}

/// Draws a noise field with the same shape as `like`.
pub fn noise_field<R: Rng + ?Sized>(like: &Tensor, rng: &mut R) -> Tensor {
    let dist = Normal::new(NOISE_MEAN, NOISE_SD).expect("valid normal");
    let data = (0..like.numel()).map(|_| dist.sample(rng).clamp(0.0, 1.0)).collect();
    Tensor::new(like.shape().to_vec(), data).expect("same shape")
}

/// `R * noise + (1 - R) * x`, clamped to `[0, 1]`.
pub fn corrupt_with(x: &Tensor, ratio: f64, field: &Tensor) -> Result<Tensor> {
    check_ratio(ratio)?;
    if x.shape() != field.shape() {
        return Err(Error::ShapeMismatch {
            op: "corrupt",
            left: x.shape().to_vec(),
            right: field.shape().to_vec(),
        });
    }
    if ratio == 0.0 {
        return Ok(x.clone());
    }
    let data = x
        .data()
        .iter()
        .zip(field.data())
        .map(|(v, n)| (ratio * n + (1.0 - ratio) * v).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn corrupt<R: Rng + ?Sized>(x: &Tensor, ratio: f64, rng: &mut R) -> Result<Tensor> {
    check_ratio(ratio)?;
    let field = noise_field(x, rng);
    corrupt_with(x, ratio, &field)
}

/// Distance of `r_cls` from the value implied by `r_rec` under the coupling
/// `R_cls = tanh(1 - tanh((beta / alpha) * atanh(R_rec)))`.
pub fn coupling_check(state: &NoiseState) -> Result<f64> {
    if !(state.r_rec < 1.0 && state.r_rec > -1.0) {
        return Err(Error::domain(
            "coupling_check",
            format!("r_rec {} outside the atanh domain", state.r_rec),
        ));
    }
    let implied = (1.0 - ((state.beta / state.alpha) * state.r_rec.atanh()).tanh()).tanh();
    Ok((state.r_cls - implied).abs())
}
