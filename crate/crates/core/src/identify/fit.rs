//! Maximum-likelihood fit of the prior hyperparameters from observations,
//! with per-sample forward solves and common random numbers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::apm::{ApmFamily, ApmParams, ApmSampler};
use super::likelihood::{log_likelihood, LikelihoodKind};
use super::observe::DirectForward;
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub likelihood: LikelihoodKind,
    /// Model realizations per likelihood evaluation.
    pub samples: usize,
    pub seed: u64,
    /// Starting point; its correlation length stays fixed during the search.
    pub init: ApmParams,
    pub optimizer: NelderMeadOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub w: ApmParams,
    pub log_likelihood: f64,
    /// `(level, dispersion, log-likelihood)` at every evaluation.
    pub trace: Vec<(f64, f64, f64)>,
    pub converged: bool,
    pub warning: Option<String>,
}

/// Model observations at `(level, dispersion)` for a fixed sampler.
pub fn model_observations(sampler: &ApmSampler, direct: &DirectForward, level: f64, dispersion: f64) -> Result<Vec<Vec<f64>>> {
    sampler.realize_all(level, dispersion)?.iter().map(|k| direct.observe_nodal(k)).collect()
}

/// Log-likelihood of `data` at `w` through `sampler`.
pub fn apm_log_likelihood(
    sampler: &ApmSampler,
    direct: &DirectForward,
    data: &[Vec<f64>],
    kind: LikelihoodKind,
    level: f64,
    dispersion: f64,
) -> Result<f64> {
    let model = model_observations(sampler, direct, level, dispersion)?;
    log_likelihood(kind, data, &model, direct.observation().noise_std())
}

/// Nelder–Mead over `(ln level, ln dispersion)`.
pub fn fit_apm_ml(family: &ApmFamily, direct: &DirectForward, data: &[Vec<f64>], opts: &FitOptions) -> Result<FitResult> {
    if data.is_empty() {
        return Err(Error::InsufficientData("no experimental observations".into()));
    }
    family.check(&opts.init)?;
    if !(opts.init.dispersion > 0.0) {
        return Err(Error::Domain("initial dispersion must be positive".into()));
    }
    let sampler = ApmSampler::new(*family, direct.fem().mesh(), opts.init.corr_length, opts.samples, opts.seed)?;
    let mut trace = Vec::new();
    let objective = |theta: &[f64]| -> f64 {
        let (level, dispersion) = (libm::exp(theta[0]), libm::exp(theta[1]));
        let ll = apm_log_likelihood(&sampler, direct, data, opts.likelihood, level, dispersion).unwrap_or(f64::NEG_INFINITY);
        trace.push((level, dispersion, ll));
        -ll
    };
    let x0 = [libm::log(opts.init.level), libm::log(opts.init.dispersion)];
    let result = nelder_mead(objective, &x0, &[0.2, 0.3], &opts.optimizer);
    if !result.f.is_finite() {
        let (mean, _) = crate::klpce::sample_moments(data);
        return Err(Error::DegenerateLikelihood(format!(
            "every evaluated likelihood is −∞; {} observations with mean {mean:?}, {} model samples",
            data.len(),
            opts.samples
        )));
    }
    let w = ApmParams { level: libm::exp(result.x[0]), dispersion: libm::exp(result.x[1]), corr_length: opts.init.corr_length };
    let warning = if data.len() == 1 {
        Some(String::from("a single observation makes the likelihood nearly flat; the maximizer is poorly determined"))
    } else if !result.converged {
        Some(format!("optimizer stopped after {} evaluations without meeting its tolerance", result.evals))
    } else {
        None
    };
    Ok(FitResult { w, log_likelihood: -result.f, trace, converged: result.converged, warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{FemSpace, Load};
    use crate::identify::apm::{ApmKind, Matern};
    use crate::identify::observe::Observation;
    use crate::identify::zfit::synthesize_from_apm;
    use crate::mesh::Mesh;
    use alloc::vec;

    fn direct() -> DirectForward {
        let fem = FemSpace::new(Mesh::interval(20, 0.0, 1.0).unwrap()).unwrap();
        let pts: Vec<Vec<f64>> = (1..5).map(|i| vec![i as f64 / 5.0]).collect();
        let obs = Observation::point_values(&fem, &pts, 0.0).unwrap();
        DirectForward::new(fem, &Load::Constant(1.0), obs).unwrap()
    }

    #[test]
    fn recovers_the_level_and_dispersion() {
        let d = direct();
        let family = ApmFamily { kind: ApmKind::IsoLognormal, n: 1, smoothness: Matern::ThreeHalves, eps: 1e-2 };
        let truth = ApmParams { level: 2.0, dispersion: 0.5, corr_length: 0.3 };
        let data = synthesize_from_apm(&family, &truth, &d, 100, 5).unwrap();
        let opts = FitOptions {
            likelihood: LikelihoodKind::Gaussian,
            samples: 300,
            seed: 1,
            init: ApmParams { level: 1.0, dispersion: 0.3, corr_length: 0.3 },
            optimizer: NelderMeadOptions { max_evals: 150, f_tol: 1e-8, x_tol: 1e-4 },
        };
        let fit = fit_apm_ml(&family, &d, &data, &opts).unwrap();
        assert!((fit.w.level / 2.0 - 1.0).abs() < 0.1, "{:?}", fit.w);
        assert!((fit.w.dispersion / 0.5 - 1.0).abs() < 0.2, "{:?}", fit.w);
        assert!(fit.trace.iter().all(|t| t.2 <= fit.log_likelihood + 1e-9));
    }

    #[test]
    fn single_observation_warns() {
        let d = direct();
        let family = ApmFamily { kind: ApmKind::IsoLognormal, n: 1, smoothness: Matern::Half, eps: 1e-2 };
        let truth = ApmParams { level: 1.0, dispersion: 0.3, corr_length: 0.3 };
        let data = synthesize_from_apm(&family, &truth, &d, 1, 5).unwrap();
        let opts = FitOptions {
            likelihood: LikelihoodKind::Kde { smoothing: 1.0 },
            samples: 50,
            seed: 1,
            init: truth,
            optimizer: NelderMeadOptions { max_evals: 40, ..Default::default() },
        };
        let fit = fit_apm_ml(&family, &d, &data, &opts).unwrap();
        assert!(fit.warning.is_some());
        assert!(fit.w.level.is_finite() && fit.w.dispersion > 0.0);
    }

    #[test]
    fn empty_data_is_rejected() {
        let d = direct();
        let family = ApmFamily { kind: ApmKind::IsoLognormal, n: 1, smoothness: Matern::Half, eps: 1e-2 };
        let opts = FitOptions {
            likelihood: LikelihoodKind::Gaussian,
            samples: 10,
            seed: 1,
            init: ApmParams { level: 1.0, dispersion: 0.3, corr_length: 0.3 },
            optimizer: NelderMeadOptions::default(),
        };
        assert!(matches!(fit_apm_ml(&family, &d, &[], &opts), Err(Error::InsufficientData(_))));
    }
}
