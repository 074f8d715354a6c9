//! Run configuration: a sectioned `key = value` document (TOML syntax).
//! Unknown keys are rejected and every default is written back into the
//! run manifest.

use serde::{Deserialize, Serialize};
use spdfield_core::fem::{FemSpace, Load};
use spdfield_core::identify::{ApmFamily, ApmKind, ApmParams, LikelihoodKind, Matern, Observation};
use spdfield_core::mesh::Mesh;
use spdfield_core::repclass::{RepKind, SquashFunction};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed of every random stream; `--seed` overrides it.
    pub seed: u64,
    pub mesh: MeshConfig,
    pub load: LoadConfig,
    pub observation: ObservationConfig,
    pub apm: ApmConfig,
    pub synth: SynthConfig,
    pub fit: FitConfig,
    pub representation: RepresentationConfig,
    pub kl: KlConfig,
    pub map: MapConfig,
    pub identify: IdentifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            mesh: MeshConfig::default(),
            load: LoadConfig::default(),
            observation: ObservationConfig::default(),
            apm: ApmConfig::default(),
            synth: SynthConfig::default(),
            fit: FitConfig::default(),
            representation: RepresentationConfig::default(),
            kl: KlConfig::default(),
            map: MapConfig::default(),
            identify: IdentifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Cells per direction; its length is the space dimension (1 or 2).
    pub cells: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { cells: vec![12, 12], lower: vec![0.0, 0.0], upper: vec![1.0, 1.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoadConfig {
    pub value: f64,
}

impl Default for LoadConfig {
    fn default() -> Self {
        Self { value: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationKind {
    Points,
    Averages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservationConfig {
    pub kind: ObservationKind,
    /// Interior grid of `grid` points per direction, used when `points` is empty.
    pub grid: usize,
    pub points: Vec<Vec<f64>>,
    /// Averaging radius for `kind = "averages"`.
    pub radius: f64,
    pub noise_std: f64,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self { kind: ObservationKind::Points, grid: 3, points: Vec::new(), radius: 0.1, noise_std: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApmKindName {
    SquareSfg,
    IsoLognormal,
}

/// The family and the hyperparameters of the synthetic truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApmConfig {
    pub kind: ApmKindName,
    /// Matérn smoothness: 0.5, 1.5 or 2.5.
    pub smoothness: f64,
    pub eps: f64,
    pub level: f64,
    pub dispersion: f64,
    pub corr_length: f64,
}

impl Default for ApmConfig {
    fn default() -> Self {
        Self { kind: ApmKindName::SquareSfg, smoothness: 1.5, eps: 1e-2, level: 1.0, dispersion: 0.8, corr_length: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthSource {
    Apm,
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub source: SynthSource,
    /// Number of experimental observations `ν_exp`.
    pub count: usize,
    pub noise_free: bool,
    /// Class parameter for `source = "class"`; empty means `z = 0`.
    pub z: Vec<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { source: SynthSource::Apm, count: 50, noise_free: false, z: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodName {
    Gaussian,
    Kde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub likelihood: LikelihoodName,
    pub smoothing: f64,
    /// Model realizations per likelihood evaluation.
    pub samples: usize,
    pub init_level: f64,
    pub init_dispersion: f64,
    /// Held fixed during the fit.
    pub corr_length: f64,
    pub max_evals: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            likelihood: LikelihoodName::Gaussian,
            smoothing: 1.0,
            samples: 200,
            init_level: 0.7,
            init_dispersion: 0.5,
            corr_length: 0.3,
            max_evals: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepKindName {
    Square,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SquashName {
    Apm,
    Softabs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepresentationConfig {
    pub kind: RepKindName,
    /// Square kind only; `apm` uses the fitted dispersion.
    pub squash: SquashName,
    pub softabs_a: f64,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        Self { kind: RepKindName::Square, squash: SquashName::Apm, softabs_a: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KlConfig {
    pub m: usize,
    /// `ν_KL`
    pub realizations: usize,
    pub germ_dim: usize,
    /// Total degree of the chaos of `η`.
    pub degree: usize,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self { m: 1, realizations: 400, germ_dim: 1, degree: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverName {
    Full,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub germ_degree: usize,
    pub param_degree: usize,
    /// Standard deviation of the Gaussian measure on `z`.
    pub z_scale: f64,
    pub t: f64,
    /// Gauss points per direction; 0 picks `max degree + 2`.
    pub quad_points: usize,
    pub mc_count: usize,
    /// Truncation level `τ`; absent means no truncation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub solver: SolverName,
    /// Greedy rank limit; 0 means the exact tensor rank bound.
    pub r_max: usize,
    pub greedy_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            germ_degree: 4,
            param_degree: 4,
            z_scale: 0.25,
            t: 1.0,
            quad_points: 0,
            mc_count: 2000,
            tau: None,
            solver: SolverName::Full,
            r_max: 0,
            greedy_tol: 1e-6,
            cg_max_iter: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentifyConfig {
    pub likelihood: LikelihoodName,
    pub smoothing: f64,
    pub germ_samples: usize,
    /// Bound on `|z_i|` in widths of the map measure; 0 disables it.
    pub trust_radius: f64,
    pub max_evals: usize,
    pub prior_scale: f64,
    pub chains: usize,
    pub burn_in: usize,
    pub samples: usize,
    pub initial_step: f64,
    pub target_acceptance: f64,
    pub restarts: usize,
    pub restart_realizations: usize,
    pub audit_calibration: usize,
    pub audit_samples: usize,
}

impl Default for IdentifyConfig {
    fn default() -> Self {
        Self {
            likelihood: LikelihoodName::Gaussian,
            smoothing: 0.3,
            germ_samples: 400,
            trust_radius: 4.0,
            max_evals: 400,
            prior_scale: 0.5,
            chains: 3,
            burn_in: 500,
            samples: 2000,
            initial_step: 0.3,
            target_acceptance: 0.3,
            restarts: 0,
            restart_realizations: 400,
            audit_calibration: 20,
            audit_samples: 10,
        }
    }
}

fn invalid(key: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{key}`: {why}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The fully resolved document, defaults included.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let dim = self.mesh.cells.len();
        if !(1..=2).contains(&dim) {
            return Err(invalid("mesh.cells", "one or two cell counts"));
        }
        if self.mesh.lower.len() != dim || self.mesh.upper.len() != dim {
            return Err(invalid("mesh.lower", format!("needs {dim} coordinates like `mesh.upper`")));
        }
        if self.mesh.lower.iter().zip(&self.mesh.upper).any(|(a, b)| !(a < b)) {
            return Err(invalid("mesh.upper", "must exceed `mesh.lower`"));
        }
        if self.mesh.cells.contains(&0) {
            return Err(invalid("mesh.cells", "counts must be positive"));
        }
        if self.observation.points.is_empty() && self.observation.grid == 0 {
            return Err(invalid("observation.grid", "must be positive when no points are given"));
        }
        if let Some(p) = self.observation.points.iter().find(|p| p.len() != dim) {
            return Err(invalid("observation.points", format!("point {p:?} is not {dim}-dimensional")));
        }
        if !(self.observation.noise_std >= 0.0) {
            return Err(invalid("observation.noise_std", "must be non-negative"));
        }
        Matern::from_nu(self.apm.smoothness).map_err(|_| invalid("apm.smoothness", "must be 0.5, 1.5 or 2.5"))?;
        if !(self.apm.eps > 0.0) {
            return Err(invalid("apm.eps", "must be positive"));
        }
        self.family().check(&self.apm_truth()).map_err(|e| invalid("apm.dispersion", e))?;
        if self.synth.count == 0 {
            return Err(invalid("synth.count", "must be positive"));
        }
        if !(self.fit.init_level > 0.0) || !(self.fit.init_dispersion > 0.0) || !(self.fit.corr_length > 0.0) {
            return Err(invalid("fit.init_level", "initial hyperparameters must be positive"));
        }
        if self.fit.samples < 2 {
            return Err(invalid("fit.samples", "at least two model samples"));
        }
        if self.kl.m == 0 || self.kl.germ_dim == 0 || self.kl.degree == 0 {
            return Err(invalid("kl.m", "m, germ_dim and degree must be positive"));
        }
        if !(self.map.z_scale > 0.0) || !(self.map.t > 0.0) {
            return Err(invalid("map.z_scale", "scale and chart step must be positive"));
        }
        if !(self.identify.trust_radius >= 0.0) {
            return Err(invalid("identify.trust_radius", "must be non-negative"));
        }
        if !(self.identify.prior_scale > 0.0) {
            return Err(invalid("identify.prior_scale", "must be positive"));
        }
        if self.identify.chains == 0 {
            return Err(invalid("identify.chains", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.identify.target_acceptance) {
            return Err(invalid("identify.target_acceptance", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn mesh(&self) -> Result<Mesh, CliError> {
        let m = &self.mesh;
        let mesh = match m.cells.len() {
            1 => Mesh::interval(m.cells[0], m.lower[0], m.upper[0]),
            _ => Mesh::rectangle(m.cells[0], m.cells[1], (m.lower[0], m.upper[0]), (m.lower[1], m.upper[1])),
        };
        mesh.map_err(|e| invalid("mesh", e))
    }

    pub fn fem(&self) -> Result<FemSpace, CliError> {
        FemSpace::new(self.mesh()?).map_err(|e| invalid("mesh", e))
    }

    pub fn load_term(&self) -> Load {
        Load::Constant(self.load.value)
    }

    pub fn observation_points(&self) -> Vec<Vec<f64>> {
        if !self.observation.points.is_empty() {
            return self.observation.points.clone();
        }
        let g = self.observation.grid;
        let axis = |d: usize| -> Vec<f64> {
            let (a, b) = (self.mesh.lower[d], self.mesh.upper[d]);
            (1..=g).map(|i| a + (b - a) * i as f64 / (g + 1) as f64).collect()
        };
        match self.mesh.cells.len() {
            1 => axis(0).into_iter().map(|x| vec![x]).collect(),
            _ => {
                let (xs, ys) = (axis(0), axis(1));
                xs.iter().flat_map(|x| ys.iter().map(move |y| vec![*x, *y])).collect()
            }
        }
    }

    pub fn observation(&self, fem: &FemSpace, noise_free: bool) -> Result<Observation, CliError> {
        let pts = self.observation_points();
        let noise = if noise_free { 0.0 } else { self.observation.noise_std };
        let obs = match self.observation.kind {
            ObservationKind::Points => Observation::point_values(fem, &pts, noise),
            ObservationKind::Averages => Observation::local_averages(fem, &pts, self.observation.radius, noise),
        };
        obs.map_err(|e| invalid("observation", e))
    }

    pub fn family(&self) -> ApmFamily {
        ApmFamily {
            kind: match self.apm.kind {
                ApmKindName::SquareSfg => ApmKind::SquareSfg,
                ApmKindName::IsoLognormal => ApmKind::IsoLognormal,
            },
            n: self.mesh.cells.len(),
            smoothness: Matern::from_nu(self.apm.smoothness).unwrap_or(Matern::ThreeHalves),
            eps: self.apm.eps,
        }
    }

    pub fn apm_truth(&self) -> ApmParams {
        ApmParams { level: self.apm.level, dispersion: self.apm.dispersion, corr_length: self.apm.corr_length }
    }

    /// Representation used from the KL stage on, given the fitted prior.
    pub fn rep_kind(&self, w: &ApmParams) -> Result<RepKind, CliError> {
        let n = self.mesh.cells.len();
        match (self.representation.kind, self.representation.squash) {
            (RepKindName::Exponential, _) => Ok(RepKind::Exponential),
            (RepKindName::Square, SquashName::Apm) => {
                SquashFunction::apm(n, w.dispersion).map(RepKind::Square).map_err(|e| invalid("representation.squash", e))
            }
            (RepKindName::Square, SquashName::Softabs) => SquashFunction::softabs(vec![self.representation.softabs_a; n])
                .map(RepKind::Square)
                .map_err(|e| invalid("representation.softabs_a", e)),
        }
    }

    pub fn likelihood(name: LikelihoodName, smoothing: f64) -> LikelihoodKind {
        match name {
            LikelihoodName::Gaussian => LikelihoodKind::Gaussian,
            LikelihoodName::Kde => LikelihoodKind::Kde { smoothing },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[kl]\nm = 2\nmodes = 3\n").unwrap_err();
        assert!(matches!(&err, CliError::Config(msg) if msg.contains("modes")), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn partial_documents_take_defaults() {
        let cfg = RunConfig::parse("seed = 9\n[mesh]\ncells = [20]\nlower = [0.0]\nupper = [2.0]\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.kl, KlConfig::default());
        assert_eq!(cfg.observation_points(), vec![vec![0.5], vec![1.0], vec![1.5]]);
        assert_eq!(cfg.family().n, 1);
    }

    #[test]
    fn inconsistent_values_are_rejected() {
        for text in [
            "[mesh]\ncells = [4, 4, 4]",
            "[mesh]\ncells = [4]\n",
            "[apm]\nsmoothness = 1.0",
            "[apm]\ndispersion = 5.0",
            "[identify]\nprior_scale = 0.0",
            "[synth]\nsource = \"posterior\"",
        ] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Config(_))), "{text}");
        }
    }
}
