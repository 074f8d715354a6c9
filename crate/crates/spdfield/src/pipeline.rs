//! Stage orchestration: each command reads upstream artifacts from the run
//! directory, computes, and writes its own artifacts plus a manifest entry.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spdfield_core::chaos::ChaosBasis;
use spdfield_core::error::Error as CoreError;
use spdfield_core::identify::oapm::{chain_from_realizations, is_gaussian_case, oapm_realizations};
use spdfield_core::identify::zfit::{
    assemble_map_problem, audit, calibrate_audit_bound, chain_coefficient, ml_z, restart_chain, run_chain, synthesize_from_apm,
    synthesize_from_class, BayesOptions, Chain, Posterior,
};
use spdfield_core::identify::{
    build_map, fit_apm_ml, ApmParams, BuiltMap, DirectForward, FitOptions, MapLikelihood, MapSpec, OapmChain, OapmOptions,
};
use spdfield_core::klpce::{kl_from_realizations, KlBasis};
use spdfield_core::linalg::CgReport;
use spdfield_core::lowrank::{greedy_solve, rank_bound, AlsOptions, GreedyOptions, GreedyState};
use spdfield_core::optim::NelderMeadOptions;
use spdfield_core::rng::fnv1a;
use spdfield_core::sgalerkin::{GalerkinProblem, NormReport, ParamMeasure, SolutionMap, CG_TOL};
use spdfield_core::stiefel::{StiefelChart, StiefelPoint};

use crate::config::{RunConfig, SolverName, SynthSource};
use crate::error::CliError;
use crate::formats::{self, num, numeric_table, read_numeric_rows, Table};

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "SPDFIELD_THREADS";
pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    FitApm,
    BuildKl,
    BuildMap,
    IdentifyMl,
    IdentifyBayes,
    Solve,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Synth,
        Stage::FitApm,
        Stage::BuildKl,
        Stage::BuildMap,
        Stage::IdentifyMl,
        Stage::IdentifyBayes,
        Stage::Solve,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::FitApm => "fit-apm",
            Stage::BuildKl => "build-kl",
            Stage::BuildMap => "build-map",
            Stage::IdentifyMl => "identify-ml",
            Stage::IdentifyBayes => "identify-bayes",
            Stage::Solve => "solve",
            Stage::Report => "report",
        }
    }

    /// Upstream artifacts and the commands producing them.
    fn inputs(self) -> &'static [(&'static str, Stage)] {
        use Stage::*;
        const DATA: (&str, Stage) = ("data.csv", Synth);
        const W: (&str, Stage) = ("w_opt.csv", FitApm);
        const KL: (&str, Stage) = ("kl.bin", BuildKl);
        const Y0: (&str, Stage) = ("y0.bin", BuildKl);
        match self {
            Synth | Report => &[],
            FitApm => &[DATA],
            BuildKl => &[W],
            BuildMap | Solve => &[W, KL, Y0],
            IdentifyMl => &[DATA, W, KL, Y0, ("map.bin", BuildMap)],
            IdentifyBayes => &[DATA, W, KL, ("z_ml.csv", IdentifyMl), ("y_ml.bin", IdentifyMl)],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| CliError::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub fingerprint: String,
    /// Output file name to its SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub results: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub noise_model: String,
    #[serde(default)]
    pub stages: BTreeMap<String, StageRecord>,
    pub config: Option<RunConfig>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Option<Self>, CliError> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        toml::from_str(&text).map(Some).map_err(|e| CliError::format(&path, e.to_string()))
    }

    fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST);
        let text = toml::to_string(self).map_err(|e| CliError::format(&path, e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}

const NOISE_MODEL: &str =
    "additive Gaussian noise with observation.noise_std; the same model is used by fit-apm and by the identify stages";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Independent master seed of a stage.
pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    let mut bytes = master.to_le_bytes().to_vec();
    bytes.extend_from_slice(stage.name().as_bytes());
    fnv1a(&bytes)
}

/// Worker count from the environment, defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, usize::from))
}

#[derive(Debug, Default)]
struct StageOutput {
    files: Vec<(String, Vec<u8>)>,
    results: BTreeMap<String, f64>,
    notes: Vec<String>,
    /// Raised after the outputs are written; the stage is then not recorded.
    failure: Option<CliError>,
}

impl StageOutput {
    fn file(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    fn table(&mut self, name: &str, table: &Table) {
        self.file(name, table.to_bytes());
    }

    fn result(&mut self, key: &str, value: f64) {
        self.results.insert(key.to_string(), value);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

pub struct Runner {
    cfg: RunConfig,
    dir: PathBuf,
    threads: usize,
}

impl Runner {
    pub fn new(cfg: RunConfig, dir: impl Into<PathBuf>) -> Self {
        Self { cfg, dir: dir.into(), threads: thread_count() }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn fingerprint(&self, stage: Stage) -> Result<String, CliError> {
        let mut h = Sha256::new();
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.update(stage.name().as_bytes());
        h.update(self.cfg.to_text().as_bytes());
        for (file, producer) in stage.inputs() {
            let path = self.path(file);
            if !path.exists() {
                return Err(CliError::Dependency { artifact: file.to_string(), command: producer.name() });
            }
            let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            h.update(file.as_bytes());
            h.update(Sha256::digest(&bytes));
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    fn up_to_date(&self, record: &StageRecord, fingerprint: &str) -> bool {
        record.fingerprint == fingerprint
            && record.outputs.iter().all(|(name, hash)| std::fs::read(self.path(name)).is_ok_and(|b| &sha256_hex(&b) == hash))
    }

    pub fn run(&self, stage: Stage) -> Result<Outcome, CliError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
        if stage == Stage::Report {
            crate::report::write_report(&self.dir)?;
            return Ok(Outcome::Ran);
        }
        let fingerprint = self.fingerprint(stage)?;
        let cfg_text = self.cfg.to_text();
        let mut manifest = Manifest::read(&self.dir).ok().flatten().unwrap_or_default();
        manifest.version = env!("CARGO_PKG_VERSION").to_string();
        manifest.config_sha256 = sha256_hex(cfg_text.as_bytes());
        manifest.seed = self.cfg.seed;
        manifest.noise_model = NOISE_MODEL.to_string();
        manifest.config = Some(self.cfg.clone());
        if manifest.stages.get(stage.name()).is_some_and(|r| self.up_to_date(r, &fingerprint)) {
            manifest.write(&self.dir)?;
            return Ok(Outcome::Skipped);
        }
        manifest.stages.remove(stage.name());
        let out = match stage {
            Stage::Synth => self.synth(),
            Stage::FitApm => self.fit_apm(),
            Stage::BuildKl => self.build_kl(),
            Stage::BuildMap => self.build_map(),
            Stage::IdentifyMl => self.identify_ml(),
            Stage::IdentifyBayes => self.identify_bayes(),
            Stage::Solve => self.solve(),
            Stage::Report => unreachable!("handled above"),
        }?;
        let mut record = StageRecord { fingerprint, results: out.results, notes: out.notes, ..Default::default() };
        for (name, bytes) in &out.files {
            let path = self.path(name);
            std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
            record.outputs.insert(name.clone(), sha256_hex(bytes));
        }
        if let Some(err) = out.failure {
            manifest.write(&self.dir)?;
            return Err(err);
        }
        manifest.stages.insert(stage.name().to_string(), record);
        manifest.write(&self.dir)?;
        Ok(Outcome::Ran)
    }

    fn seed(&self, stage: Stage) -> u64 {
        stage_seed(self.cfg.seed, stage)
    }

    fn direct(&self, noise_free: bool) -> Result<DirectForward, CliError> {
        let fem = self.cfg.fem()?;
        let obs = self.cfg.observation(&fem, noise_free)?;
        Ok(DirectForward::new(fem, &self.cfg.load_term(), obs)?)
    }

    fn data(&self) -> Result<Vec<Vec<f64>>, CliError> {
        let data = read_numeric_rows(&self.path("data.csv"))?;
        let m_obs = self.cfg.observation_points().len();
        if let Some(row) = data.iter().find(|r| r.len() != m_obs) {
            return Err(CliError::Config(format!(
                "`observation`: data rows have {} columns but {m_obs} observations are configured",
                row.len()
            )));
        }
        Ok(data)
    }

    fn w_opt(&self) -> Result<ApmParams, CliError> {
        let path = self.path("w_opt.csv");
        let t = Table::read(&path)?;
        let get = |k: &str| -> Result<f64, CliError> {
            t.lookup(k).and_then(|v| v.parse().ok()).ok_or_else(|| CliError::format(&path, format!("no numeric `{k}`")))
        };
        Ok(ApmParams { level: get("level")?, dispersion: get("dispersion")?, corr_length: get("corr_length")? })
    }

    fn oapm_options(&self) -> OapmOptions {
        let k = &self.cfg.kl;
        OapmOptions { m: k.m, germ_dim: k.germ_dim, degree: k.degree, realizations: k.realizations, seed: self.seed(Stage::BuildKl) }
    }

    /// The chain of the fitted prior with `[y]` read from `y_file`.
    fn chain(&self, y_file: &str) -> Result<OapmChain, CliError> {
        let w = self.w_opt()?;
        let family = self.cfg.family();
        let mesh = self.cfg.mesh()?;
        let kind = self.cfg.rep_kind(&w)?;
        let kl = formats::read_kl(&self.path("kl.bin"))?;
        let y0 = formats::read_stiefel(&self.path(y_file))?;
        let basis = ChaosBasis::hermite(self.cfg.kl.germ_dim, self.cfg.kl.degree, false);
        if y0.rows() != basis.len() || y0.m() != kl.m() {
            return Err(CliError::Config(format!(
                "`kl`: artifacts hold a {}×{} chaos matrix, the configuration asks for {}×{}",
                y0.rows(),
                y0.m(),
                basis.len(),
                kl.m()
            )));
        }
        let norm = family.lower_bound(&w, mesh.n_nodes())?;
        let gaussian_case = is_gaussian_case(&family, &w, &kind);
        Ok(OapmChain { kind, norm, kl, basis, y0, gaussian_case, eta: Vec::new() })
    }

    fn map_spec(&self, stage: Stage) -> MapSpec {
        let m = &self.cfg.map;
        MapSpec {
            germ_degree: m.germ_degree,
            param_degree: m.param_degree,
            measure: ParamMeasure::Gaussian { scale: m.z_scale },
            t: m.t,
            quad_points: m.quad_points,
            mc_count: m.mc_count,
            tau: m.tau,
            seed: self.seed(stage),
            cg_max_iter: m.cg_max_iter,
        }
    }

    fn greedy_options(&self, prob: &GalerkinProblem, stage: Stage) -> GreedyOptions {
        let r_max = if self.cfg.map.r_max == 0 { rank_bound(prob) } else { self.cfg.map.r_max };
        GreedyOptions { r_max, tol: self.cfg.map.greedy_tol, als: AlsOptions { seed: self.seed(stage), ..AlsOptions::default() } }
    }

    /// The surrogate map with the configured solver; greedy also returns its state.
    fn solve_map(&self, chain: &OapmChain, stage: Stage) -> Result<(BuiltMap, Option<GreedyState>), CliError> {
        let fem = self.cfg.fem()?;
        let spec = self.map_spec(stage);
        match self.cfg.map.solver {
            SolverName::Full => Ok((build_map(chain, &fem, &self.cfg.load_term(), &spec)?, None)),
            SolverName::Greedy => {
                let (problem, coefficient) = assemble_map_problem(chain, &fem, &self.cfg.load_term(), &spec)?;
                let (map, state) = greedy_solve(&problem, &self.greedy_options(&problem, stage), None)?;
                let cg = CgReport { iterations: 0, relative_residual: problem.relative_residual(&map.to_dense()) };
                Ok((BuiltMap { map, problem, coefficient, cg }, Some(state)))
            }
        }
    }

    fn trust_radius(&self) -> Option<f64> {
        Some(self.cfg.identify.trust_radius).filter(|r| *r > 0.0)
    }

    fn likelihood_kind(&self) -> spdfield_core::identify::LikelihoodKind {
        RunConfig::likelihood(self.cfg.identify.likelihood, self.cfg.identify.smoothing)
    }

    fn synth(&self) -> Result<StageOutput, CliError> {
        let s = &self.cfg.synth;
        let seed = self.seed(Stage::Synth);
        let direct = self.direct(s.noise_free)?;
        let truth = self.cfg.apm_truth();
        let mut out = StageOutput::default();
        let data = match s.source {
            SynthSource::Apm => synthesize_from_apm(&self.cfg.family(), &truth, &direct, s.count, seed)?,
            SynthSource::Class => {
                let family = self.cfg.family();
                let kind = self.cfg.rep_kind(&truth)?;
                let opts = OapmOptions { seed, ..self.oapm_options() };
                let mesh = self.cfg.mesh()?;
                let (set, norm) = oapm_realizations(&family, &truth, &mesh, &kind, opts.realizations, seed)?;
                let gaussian = is_gaussian_case(&family, &truth, &kind);
                let chain = chain_from_realizations(&set, norm, kind, &mesh.node_weights(), &opts, gaussian)?;
                let model = chain_coefficient(&chain, &mesh, self.cfg.map.t)?;
                let v = spdfield_core::sgalerkin::CoefficientModel::param_dim(&model);
                let z = if s.z.is_empty() { vec![0.0; v] } else { s.z.clone() };
                if z.len() != v {
                    return Err(CliError::Config(format!("`synth.z`: expected {v} coordinates, got {}", z.len())));
                }
                out.file("y_true.bin", formats::encode_stiefel(&chain.y0));
                synthesize_from_class(&model, &direct, &z, s.count, seed)?
            }
        };
        out.table("data.csv", &numeric_table("u", &data));
        out.result("observations", data.len() as f64);
        out.result("m_obs", direct.observation().m_obs() as f64);
        Ok(out)
    }

    fn fit_apm(&self) -> Result<StageOutput, CliError> {
        let f = &self.cfg.fit;
        let data = self.data()?;
        let direct = self.direct(false)?;
        let opts = FitOptions {
            likelihood: RunConfig::likelihood(f.likelihood, f.smoothing),
            samples: f.samples,
            seed: self.seed(Stage::FitApm),
            init: ApmParams { level: f.init_level, dispersion: f.init_dispersion, corr_length: f.corr_length },
            optimizer: NelderMeadOptions { max_evals: f.max_evals, ..NelderMeadOptions::default() },
        };
        let fit = fit_apm_ml(&self.cfg.family(), &direct, &data, &opts)?;
        let mut out = StageOutput::default();
        let mut w = Table::new(&["key", "value"]);
        for (k, v) in [
            ("level", fit.w.level),
            ("dispersion", fit.w.dispersion),
            ("corr_length", fit.w.corr_length),
            ("log_likelihood", fit.log_likelihood),
            ("converged", f64::from(u8::from(fit.converged))),
        ] {
            w.push(vec![k.to_string(), num(v)]);
            out.result(&format!("w_opt.{k}"), v);
        }
        out.table("w_opt.csv", &w);
        let mut trace = Table::new(&["eval", "level", "dispersion", "log_likelihood"]);
        for (i, (l, d, ll)) in fit.trace.iter().enumerate() {
            trace.push(vec![i.to_string(), num(*l), num(*d), num(*ll)]);
        }
        out.table("fit_trace.csv", &trace);
        if let Some(warning) = fit.warning {
            eprintln!("fit-apm: {warning}");
            out.notes.push(warning);
        }
        Ok(out)
    }

    fn build_kl(&self) -> Result<StageOutput, CliError> {
        let w = self.w_opt()?;
        let family = self.cfg.family();
        let mesh = self.cfg.mesh()?;
        let kind = self.cfg.rep_kind(&w)?;
        let opts = self.oapm_options();
        let (set, norm) = oapm_realizations(&family, &w, &mesh, &kind, opts.realizations, opts.seed)?;
        let quad = mesh.node_weights();
        let gaussian = is_gaussian_case(&family, &w, &kind);
        let chain = chain_from_realizations(&set, norm, kind, &quad, &opts, gaussian)?;
        // A longer spectrum for the decay table, as far as the sample allows.
        let wide = opts.m.max(10.min(set.len().saturating_sub(1)));
        let spectrum = match kl_from_realizations(&set, &quad, wide) {
            Ok(kl) => kl,
            Err(CoreError::TruncationOverflow { available, .. }) if available >= opts.m => kl_from_realizations(&set, &quad, available)?,
            Err(_) => chain.kl.clone(),
        };
        let mut out = StageOutput::default();
        out.file("kl.bin", formats::encode_kl(&chain.kl));
        out.file("y0.bin", formats::encode_stiefel(&chain.y0));
        out.table("kl_spectrum.csv", &spectrum_table(&spectrum));
        out.table("y0.csv", &stiefel_table(&chain.y0));
        let eta_header: Vec<String> = (1..=opts.m).map(|i| format!("eta{i}")).collect();
        let mut eta = Table::new(&eta_header);
        chain.eta.iter().for_each(|e| eta.push_nums(e));
        out.table("eta.csv", &eta);
        out.result("gaussian_case", f64::from(u8::from(chain.gaussian_case)));
        out.result("y0_residual", chain.y0.residual());
        out.result("retained_variance", chain.kl.sigma().iter().sum::<f64>() / chain.kl.total_variance());
        Ok(out)
    }

    fn build_map(&self) -> Result<StageOutput, CliError> {
        let chain = self.chain("y0.bin")?;
        let (built, greedy) = self.solve_map(&chain, Stage::BuildMap)?;
        let direct = self.direct(false)?;
        let bound = calibrate_audit_bound(&built, &direct, self.cfg.identify.audit_calibration, self.seed(Stage::BuildMap))?;
        let mut out = StageOutput::default();
        out.file("map.bin", formats::encode_map(&built.map));
        out.table("map_summary.csv", &map_summary(&built, bound));
        if let Some(state) = &greedy {
            out.table("j_history.csv", &j_table(state));
        }
        out.result("audit_bound", bound);
        out.result("cg_relative_residual", built.cg.relative_residual);
        Ok(out)
    }

    fn identify_ml(&self) -> Result<StageOutput, CliError> {
        let chain = self.chain("y0.bin")?;
        let map = formats::read_map(&self.path("map.bin"))?;
        let data = self.data()?;
        let direct = self.direct(false)?;
        let id = &self.cfg.identify;
        let lik =
            MapLikelihood::new(&map, direct.observation(), &data, self.likelihood_kind(), id.germ_samples, self.seed(Stage::IdentifyMl))?
                .with_trust_radius(self.trust_radius());
        let v = lik.param_dim();
        let ml = ml_z(&lik, &NelderMeadOptions { max_evals: id.max_evals, ..NelderMeadOptions::default() })?;
        let chart = StiefelChart::new(chain.y0.clone(), self.cfg.map.t)?;
        let y = chart.map(&ml.z)?;
        let zero = lik.log_likelihood(&vec![0.0; v])?;
        let mut out = StageOutput::default();
        let mut header: Vec<String> = (1..=v).map(|i| format!("z{i}")).collect();
        header.extend(["log_likelihood", "log_likelihood_at_zero", "evaluations", "converged"].map(String::from));
        let mut z = Table::new(&header);
        let mut row = ml.z.clone();
        row.extend([ml.log_likelihood, zero, ml.evals as f64, f64::from(u8::from(ml.converged))]);
        z.push_nums(&row);
        out.table("z_ml.csv", &z);
        out.file("y_ml.bin", formats::encode_stiefel(&y));
        out.table("y_ml.csv", &stiefel_table(&y));
        out.result("z_norm", ml.z.iter().map(|x| x * x).sum::<f64>().sqrt());
        out.result("log_likelihood", ml.log_likelihood);
        out.result("y_residual", y.residual());
        Ok(out)
    }

    fn run_chains(&self, lik: &MapLikelihood<'_>, opts: &BayesOptions) -> Result<Vec<Chain>, CliError> {
        let mut chains: Vec<Option<Result<Chain, CoreError>>> = (0..opts.chains).map(|_| None).collect();
        let indices: Vec<usize> = (0..opts.chains).collect();
        for batch in indices.chunks(self.threads) {
            std::thread::scope(|s| {
                let handles: Vec<_> = batch.iter().map(|&i| (i, s.spawn(move || run_chain(lik, opts, i)))).collect();
                for (i, h) in handles {
                    chains[i] = Some(h.join().unwrap_or_else(|_| Err(CoreError::Invariant(format!("chain {i} panicked")))));
                }
            });
        }
        Ok(chains.into_iter().map(|c| c.expect("every chain ran")).collect::<Result<Vec<_>, _>>()?)
    }

    fn bayes_options(&self, round: usize) -> BayesOptions {
        let id = &self.cfg.identify;
        BayesOptions {
            chains: id.chains,
            burn_in: id.burn_in,
            samples: id.samples,
            prior_scale: id.prior_scale,
            initial_step: id.initial_step,
            target_acceptance: id.target_acceptance,
            seed: self.seed(Stage::IdentifyBayes).wrapping_add(round as u64),
        }
    }

    fn identify_bayes(&self) -> Result<StageOutput, CliError> {
        let data = self.data()?;
        let direct = self.direct(false)?;
        let id = &self.cfg.identify;
        let seed = self.seed(Stage::IdentifyBayes);
        let mut chain = self.chain("y_ml.bin")?;
        let mut out = StageOutput::default();
        let mut spectra = Table::new(&["round", "index", "sigma"]);
        let mut round = 0;
        let (built, posterior) = loop {
            let (built, _) = self.solve_map(&chain, Stage::IdentifyBayes)?;
            let lik = MapLikelihood::new(&built.map, direct.observation(), &data, self.likelihood_kind(), id.germ_samples, seed)?
                .with_trust_radius(self.trust_radius());
            let posterior = Posterior::from_chains(self.run_chains(&lik, &self.bayes_options(round))?);
            for (i, s) in chain.kl.sigma().iter().enumerate() {
                spectra.push(vec![round.to_string(), (i + 1).to_string(), num(*s)]);
            }
            if round == id.restarts {
                break (built, posterior);
            }
            // Restart: KL and chaos of the posterior field, then ML around the new point.
            let chart = StiefelChart::new(chain.y0.clone(), self.cfg.map.t)?;
            let restarted = restart_chain(&chain, &chart, &posterior.pooled(), id.restart_realizations, seed ^ (round as u64 + 1))?;
            let (around_y0, _) = self.solve_map(&restarted, Stage::IdentifyBayes)?;
            let lik0 = MapLikelihood::new(&around_y0.map, direct.observation(), &data, self.likelihood_kind(), id.germ_samples, seed)?
                .with_trust_radius(self.trust_radius());
            let ml = ml_z(&lik0, &NelderMeadOptions { max_evals: id.max_evals, ..NelderMeadOptions::default() })?;
            let y = StiefelChart::new(restarted.y0.clone(), self.cfg.map.t)?.map(&ml.z)?;
            chain = OapmChain { y0: y, ..restarted };
            round += 1;
        };
        let chart = StiefelChart::new(chain.y0.clone(), self.cfg.map.t)?;
        let pooled = posterior.pooled();
        let v = posterior.mean.len();

        let mut header = vec!["chain".to_string(), "iteration".to_string()];
        header.extend((1..=v).map(|i| format!("z{i}")));
        header.push("log_posterior".into());
        let mut samples = Table::new(&header);
        let mut worst_residual = 0.0f64;
        for (c, ch) in posterior.chains.iter().enumerate() {
            for (it, (z, lp)) in ch.samples.iter().zip(&ch.log_posterior).enumerate() {
                let mut row = vec![c.to_string(), it.to_string()];
                row.extend(z.iter().copied().map(num));
                row.push(num(*lp));
                samples.push(row);
                if it % 50 == 0 {
                    worst_residual = worst_residual.max(chart.map(z)?.residual());
                }
            }
        }
        out.table("posterior.csv", &samples);

        let mut summary = Table::new(&["coordinate", "mean", "std", "q05", "q50", "q95", "r_hat"]);
        for d in 0..v {
            let mut col: Vec<f64> = pooled.iter().map(|z| z[d]).collect();
            col.sort_by(f64::total_cmp);
            let mean = posterior.mean[d];
            let std = (col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (col.len().max(2) - 1) as f64).sqrt();
            let q = |p: f64| col[((col.len() - 1) as f64 * p).round() as usize];
            summary.push(vec![
                format!("z{}", d + 1),
                num(mean),
                num(std),
                num(q(0.05)),
                num(q(0.5)),
                num(q(0.95)),
                num(posterior.r_hat[d]),
            ]);
        }
        out.table("posterior_summary.csv", &summary);

        let mut chains = Table::new(&["chain", "acceptance", "step"]);
        for (c, ch) in posterior.chains.iter().enumerate() {
            chains.push(vec![c.to_string(), num(ch.acceptance), num(ch.step)]);
        }
        out.table("chains.csv", &chains);
        out.file("y_post.bin", formats::encode_stiefel(&chart.map(&posterior.mean)?));
        if id.restarts > 0 {
            out.table("restart_spectra.csv", &spectra);
        }

        let bound = calibrate_audit_bound(&built, &direct, id.audit_calibration, seed)?;
        let stride = (pooled.len() / id.audit_samples.max(1)).max(1);
        let z_points: Vec<Vec<f64>> = pooled.iter().step_by(stride).take(id.audit_samples.max(1)).cloned().collect();
        let report = audit(&built, &direct, &z_points, id.audit_samples, bound, seed)?;
        let mut audit_t = Table::new(&["sample", "relative_error", "bound", "passed"]);
        for (i, e) in report.errors.iter().enumerate() {
            audit_t.push(vec![i.to_string(), num(*e), num(bound), (*e <= bound).to_string()]);
        }
        out.table("audit.csv", &audit_t);

        let norm = posterior.mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.result("posterior_mean_norm", norm);
        out.result("r_hat_max", posterior.r_hat.iter().copied().fold(f64::NAN, f64::max));
        out.result("acceptance_min", posterior.chains.iter().map(|c| c.acceptance).fold(f64::INFINITY, f64::min));
        out.result("y_post_residual_max", worst_residual);
        out.result("audit_bound", bound);
        out.result("audit_max_error", report.errors.iter().copied().fold(0.0, f64::max));
        if posterior.r_hat.iter().any(|r| *r > 1.1) {
            out.notes.push("R-hat above 1.1; lengthen the chains".into());
        }
        if worst_residual > 1e-10 {
            out.failure = Some(CliError::Invariant(format!("posterior Stiefel point off the manifold by {worst_residual:e}")));
        } else if !report.passed {
            out.failure = Some(CliError::Invariant(format!(
                "surrogate audit failed: largest relative error {:e} exceeds the bound {bound:e}",
                report.errors.iter().copied().fold(0.0, f64::max)
            )));
        }
        Ok(out)
    }

    fn solve(&self) -> Result<StageOutput, CliError> {
        let chain = self.chain("y0.bin")?;
        let fem = self.cfg.fem()?;
        let spec = self.map_spec(Stage::Solve);
        let (problem, _) = assemble_map_problem(&chain, &fem, &self.cfg.load_term(), &spec)?;
        let (full, cg) = problem.solve(CG_TOL, spec.cg_max_iter)?;
        let reference = problem.reference_solutions()?;
        let ref_norm = problem.energy_norms(&reference)?.c;
        let full_err = problem.energy_error(&reference, &full)?;
        let (greedy, state) = greedy_solve(&problem, &self.greedy_options(&problem, Stage::Solve), Some(&full))?;
        let greedy_err = problem.energy_error(&reference, &greedy)?;
        let norms = problem.energy_norms(&problem.map_at_nodes(&full))?;

        let mut out = StageOutput::default();
        let mut errors = Table::new(&["solver", "rank", "energy_error", "relative_error", "iterations", "relative_residual"]);
        let rel = |e: f64| e / ref_norm.max(f64::MIN_POSITIVE);
        errors.push(vec![
            "full".into(),
            String::new(),
            num(full_err),
            num(rel(full_err)),
            cg.iterations.to_string(),
            num(cg.relative_residual),
        ]);
        errors.push(vec![
            "greedy".into(),
            state.rank().to_string(),
            num(greedy_err),
            num(rel(greedy_err)),
            state.rank().to_string(),
            num(problem.relative_residual(&greedy.to_dense())),
        ]);
        out.table("solve_errors.csv", &errors);
        out.table("norms.csv", &norms_table(&norms));
        out.table("norm_ordering.csv", &ordering_table(&norms));
        let mut j = j_table(&state);
        j.header.push("error_to_full".into());
        for (row, e) in j.rows.iter_mut().skip(1).zip(&state.error_history) {
            row.push(num(*e));
        }
        out.table("solve_j_history.csv", &j);
        out.table("solution_stats.csv", &solution_stats(&fem, &full));
        out.result("full_energy_error", full_err);
        out.result("greedy_energy_error", greedy_err);
        out.result("greedy_rank", state.rank() as f64);
        out.result("alpha", norms.alpha);
        if !norms.chain_holds(1e-9) {
            out.failure = Some(CliError::Invariant("energy norm ordering violated".into()));
        }
        Ok(out)
    }
}

fn spectrum_table(kl: &KlBasis) -> Table {
    let mut t = Table::new(&["index", "sigma", "variance_fraction", "cumulative_fraction"]);
    let total = kl.total_variance().max(f64::MIN_POSITIVE);
    let mut cum = 0.0;
    for (i, s) in kl.sigma().iter().enumerate() {
        let frac = s / total;
        cum += frac;
        t.push(vec![(i + 1).to_string(), num(*s), num(frac), num(cum)]);
    }
    t
}

fn stiefel_table(y: &StiefelPoint) -> Table {
    let m = y.matrix();
    let header: Vec<String> = (1..=m.cols()).map(|i| format!("y{i}")).collect();
    let mut t = Table::new(&header);
    (0..m.rows()).for_each(|r| t.push_nums(m.row(r)));
    t
}

fn map_summary(built: &BuiltMap, bound: f64) -> Table {
    let s = built.map.space();
    let mut t = Table::new(&["key", "value"]);
    let rows: [(&str, f64); 9] = [
        ("n_dofs", built.map.n_dofs() as f64),
        ("germ_terms", s.germ().len() as f64),
        ("param_terms", s.param().len() as f64),
        ("unknowns", (built.map.n_dofs() * s.germ().len() * s.param().len()) as f64),
        ("rank", built.map.rank().map_or(f64::NAN, |r| r as f64)),
        ("cg_iterations", built.cg.iterations as f64),
        ("relative_residual", built.cg.relative_residual),
        ("alpha", built.problem.alpha()),
        ("audit_bound", bound),
    ];
    for (k, v) in rows {
        t.push(vec![k.to_string(), num(v)]);
    }
    t
}

fn j_table(state: &GreedyState) -> Table {
    let mut t = Table::new(&["step", "j"]);
    for (k, j) in state.j_history.iter().enumerate() {
        t.push(vec![k.to_string(), num(*j)]);
    }
    t
}

fn norms_table(n: &NormReport) -> Table {
    let mut t = Table::new(&["norm", "value"]);
    for (k, v) in
        [("alpha", n.alpha), ("X", n.x), ("C", n.c), ("C2", n.c2), ("gamma", n.gamma), ("gammaC", n.gamma_c), ("gamma2", n.gamma2)]
    {
        t.push(vec![k.to_string(), num(v)]);
    }
    t
}

/// The energy norm inequalities, one per row.
fn ordering_table(n: &NormReport) -> Table {
    let sa = n.alpha.sqrt();
    let mut t = Table::new(&["lower", "lower_value", "upper", "upper_value", "holds"]);
    for (ln, lv, un, uv) in [
        ("sqrt(alpha)*X", sa * n.x, "C", n.c),
        ("C", n.c, "gamma", n.gamma),
        ("sqrt(alpha)*C", sa * n.c, "C2", n.c2),
        ("C2", n.c2, "gammaC", n.gamma_c),
        ("gammaC", n.gamma_c, "gamma2", n.gamma2),
    ] {
        t.push(vec![ln.into(), num(lv), un.into(), num(uv), (lv <= uv * (1.0 + 1e-9)).to_string()]);
    }
    t
}

/// Mean and standard deviation of `u(x, ·, z = 0)` at the mesh nodes.
fn solution_stats(fem: &spdfield_core::fem::FemSpace, map: &SolutionMap) -> Table {
    let v = map.space().param().dim();
    let coeffs = map.germ_coefficients(&vec![0.0; v]);
    let mean = fem.to_nodal(&coeffs[0]);
    let mut var = vec![0.0; mean.len()];
    for c in &coeffs[1..] {
        var.iter_mut().zip(fem.to_nodal(c)).for_each(|(a, b)| *a += b * b);
    }
    let mesh = fem.mesh();
    let mut header: Vec<String> = ["x", "y"].iter().take(mesh.dim()).map(|s| s.to_string()).collect();
    header.extend(["mean", "std"].map(String::from));
    let mut t = Table::new(&header);
    for p in 0..mesh.n_nodes() {
        let mut row = mesh.node(p).to_vec();
        row.extend([mean[p], var[p].sqrt()]);
        t.push_nums(&row);
    }
    t
}
