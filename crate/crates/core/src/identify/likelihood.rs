//! Log-likelihoods of observed vectors under a sampled model.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::{cholesky_lower, solve_lower, Matrix};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LikelihoodKind {
    /// Gaussian with the model's mean and covariance plus the noise variance.
    Gaussian,
    /// Kernel density: a mixture of Gaussians centred on the model samples,
    /// bandwidth `h_i² = σ_i² + (smoothing·ŝ_i·M^{−1/(m+4)})²`.
    Kde { smoothing: f64 },
}

/// `Σ_ℓ log N(u_ℓ; mean, cov + diag σ²)`
pub fn gaussian_log_likelihood(data: &[Vec<f64>], mean: &[f64], cov: &Matrix, noise: &[f64]) -> Result<f64> {
    let m = mean.len();
    let mut c = cov.clone();
    let trace: f64 = (0..m).map(|i| cov[(i, i)]).sum();
    for i in 0..m {
        c[(i, i)] += noise[i] * noise[i] + 1e-12 * trace / m as f64;
    }
    let l = cholesky_lower(&c, 0.0)
        .map_err(|_| Error::DegenerateLikelihood(format!("model covariance is singular (trace {trace:e}, noise {noise:?})")))?;
    let logdet: f64 = (0..m).map(|i| 2.0 * libm::log(l[(i, i)])).sum();
    let mut total = 0.0;
    for u in data {
        let r: Vec<f64> = u.iter().zip(mean).map(|(a, b)| a - b).collect();
        let y = solve_lower(&l, &r);
        total += -0.5 * (y.iter().map(|v| v * v).sum::<f64>() + logdet + m as f64 * LN_2PI);
    }
    Ok(total)
}

fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Matrix) {
    crate::klpce::sample_moments(samples)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let top = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + libm::log(values.iter().map(|v| libm::exp(v - top)).sum::<f64>())
}

/// Log-likelihood of `data` given equally weighted model `samples`.
pub fn log_likelihood(kind: LikelihoodKind, data: &[Vec<f64>], samples: &[Vec<f64>], noise: &[f64]) -> Result<f64> {
    let m = noise.len();
    if samples.len() < 2 {
        return Err(Error::InsufficientData("likelihood needs at least two model samples".into()));
    }
    if data.iter().chain(samples).any(|v| v.len() != m) {
        return Err(Error::Dimension(format!("observation vectors must have {m} channels")));
    }
    let (mean, cov) = moments(samples);
    match kind {
        LikelihoodKind::Gaussian => gaussian_log_likelihood(data, &mean, &cov, noise),
        LikelihoodKind::Kde { smoothing } => {
            let count = samples.len() as f64;
            let factor = libm::pow(count, -1.0 / (m as f64 + 4.0));
            let h: Vec<f64> = (0..m)
                .map(|i| {
                    let s = smoothing * libm::sqrt(cov[(i, i)].max(0.0)) * factor;
                    libm::sqrt(noise[i] * noise[i] + s * s)
                })
                .collect();
            if h.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::DegenerateLikelihood(format!("zero kernel bandwidth (noise {noise:?}, smoothing {smoothing})")));
            }
            let norm = -libm::log(count) - h.iter().map(|v| libm::log(*v)).sum::<f64>() - 0.5 * m as f64 * LN_2PI;
            let inv: Vec<f64> = h.iter().map(|v| 1.0 / v).collect();
            let mut terms = vec![0.0; samples.len()];
            let mut total = 0.0;
            for u in data {
                for (t, s) in terms.iter_mut().zip(samples) {
                    let mut q = 0.0;
                    for i in 0..m {
                        let d = (u[i] - s[i]) * inv[i];
                        q += d * d;
                    }
                    *t = -0.5 * q;
                }
                total += log_sum_exp(&terms) + norm;
            }
            if !total.is_finite() {
                return Err(Error::DegenerateLikelihood("kernel density underflows for every sample".into()));
            }
            Ok(total)
        }
    }
}
