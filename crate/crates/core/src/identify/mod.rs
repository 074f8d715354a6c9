//! The identification pipeline: prior fit, reduced chaos representation,
//! surrogate construction and inference on the Stiefel coordinates.

pub mod apm;
pub mod fit;
pub mod likelihood;
pub mod oapm;
pub mod observe;
pub mod zfit;

pub use apm::{ApmFamily, ApmKind, ApmParams, ApmSampler, Matern};
pub use fit::{fit_apm_ml, FitOptions, FitResult};
pub use likelihood::LikelihoodKind;
pub use oapm::{build_oapm_chain, OapmChain, OapmOptions};
pub use observe::{DirectForward, Observation};
pub use zfit::{bayes_z, build_map, ml_z, BayesOptions, BuiltMap, MapLikelihood, MapSpec, Posterior};
