//! Run configuration: TOML schema, presets and layered resolution.
//!
//! Resolution order is preset, then the user's file, then command-line
//! overrides. The merged table is deserialized once; unknown keys and missing
//! fields are reported with their dotted path.

use std::path::PathBuf;

use clap::ValueEnum;
use pmcmc::models::{
    linear_gaussian_model, theta_logistic_model, LinearGaussianModel, LinearGaussianParams, NonlinearGainModel,
    ThetaLogisticModel, UniformBox,
};
use pmcmc::ChainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub chain: ChainConfig,
    #[serde(default)]
    pub start: StartPath,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default)]
    pub oracle: OracleSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    ThetaLogistic(ThetaLogisticSpec),
    LinearGaussian(LinearGaussianSpec),
    NonlinearGain(NonlinearGainSpec),
}

/// Parameter values used to simulate data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaLogisticSpec {
    pub r: f64,
    pub zeta: f64,
    pub k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGaussianSpec {
    pub ar_coeff: f64,
    pub state_var: f64,
    pub obs_var: f64,
    pub init_mean: f64,
    pub init_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearGainSpec {
    pub gain: f64,
    #[serde(default = "defaults::decay")]
    pub decay: f64,
    #[serde(default = "defaults::bump")]
    pub bump: f64,
    #[serde(default = "defaults::one")]
    pub transition_var: f64,
    #[serde(default = "defaults::gain_obs_var")]
    pub observation_var: f64,
    #[serde(default = "defaults::one")]
    pub init_var: f64,
    /// Bounds of the uniform prior on the gain.
    #[serde(default = "defaults::gain_prior")]
    pub prior: [f64; 2],
}

mod defaults {
    pub fn decay() -> f64 {
        0.5
    }
    pub fn bump() -> f64 {
        25.0
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn gain_obs_var() -> f64 {
        0.1
    }
    pub fn gain_prior() -> [f64; 2] {
        [0.0, 2.0]
    }
    pub fn data_seed() -> u64 {
        1
    }
    pub fn window() -> usize {
        1000
    }
}

impl LinearGaussianSpec {
    pub fn params(&self) -> LinearGaussianParams {
        LinearGaussianParams {
            ar_coeff: self.ar_coeff,
            state_var: self.state_var,
            obs_var: self.obs_var,
            init_mean: self.init_mean,
            init_var: self.init_var,
        }
    }
}

/// A model instance together with the parameter that generated the data.
pub enum BuiltModel {
    ThetaLogistic(ThetaLogisticModel, Vec<f64>),
    LinearGaussian(LinearGaussianModel, Vec<f64>),
    NonlinearGain(NonlinearGainModel, Vec<f64>),
}

impl ModelSpec {
    pub fn build(&self) -> Result<BuiltModel, CliError> {
        let invalid = |e: pmcmc::models::ModelError| CliError::validation("model", e.to_string());
        Ok(match self {
            ModelSpec::ThetaLogistic(s) => BuiltModel::ThetaLogistic(theta_logistic_model(), vec![s.r, s.zeta, s.k]),
            ModelSpec::LinearGaussian(s) => {
                let m = linear_gaussian_model(s.params()).map_err(invalid)?;
                let truth = m.theta();
                BuiltModel::LinearGaussian(m, truth)
            }
            ModelSpec::NonlinearGain(s) => {
                let prior = UniformBox::new(vec![s.prior[0]], vec![s.prior[1]]).map_err(invalid)?;
                let m = NonlinearGainModel {
                    decay: s.decay,
                    bump: s.bump,
                    transition_var: s.transition_var,
                    observation_var: s.observation_var,
                    init_var: s.init_var,
                    prior,
                };
                BuiltModel::NonlinearGain(m, vec![s.gain])
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Number of observations.
    pub length: usize,
    /// Seed of the simulated dataset, independent of the chain seed.
    #[serde(default = "defaults::data_seed")]
    pub seed: u64,
    /// Read `n,x_true,y` from this CSV instead of simulating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// Starting path of the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StartPath {
    /// Drawn from the initial filter run (or `chain.init.path` when given).
    #[default]
    Filter,
    /// Flat path `offset` above the largest observation.
    AboveData { offset: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSpec {
    pub burn_in: usize,
    #[serde(default = "defaults::window")]
    pub window: usize,
    /// Iterations at which the running MMSE path is scored against the truth.
    pub checkpoints: Vec<usize>,
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        Self { burn_in: 0, window: defaults::window(), checkpoints: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSpec {
    pub unbiasedness_len: usize,
    pub unbiasedness_particles: usize,
    pub unbiasedness_runs: usize,
    pub equivalence_len: usize,
    pub equivalence_particles: usize,
    pub equivalence_iterations: usize,
    pub equivalence_burn_in: f64,
    pub equivalence_thin: usize,
    pub equivalence_proposal_std: f64,
    pub ks_threshold: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            unbiasedness_len: 25,
            unbiasedness_particles: 100,
            unbiasedness_runs: 500,
            equivalence_len: 50,
            equivalence_particles: 200,
            equivalence_iterations: 50_000,
            equivalence_burn_in: 0.2,
            equivalence_thin: 10,
            equivalence_proposal_std: 0.1,
            ks_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Theta-logistic PMMH, T=100, N=200, 100000 iterations, adaptation from 5000.
    Fig2,
    /// Theta-logistic PMMH from an unlikely starting path, 20000 iterations.
    Fig3,
    /// Linear-Gaussian reference problem used by the oracle checks.
    Lgcheck,
}

const FIG2: &str = r#"
seed = 0

[model]
kind = "theta_logistic"
r = 0.3
zeta = 1.0
k = 500.0

[data]
length = 100
seed = 2024

[chain]
iterations = 100000
path_thin = 100

[chain.filter]
n_particles = 200

[chain.proposal]
kind = "adaptive_metropolis"
initial_std = [0.02, 0.1, 10.0]
am_start = 5000

[chain.init]
theta = [0.3, 1.0, 500.0]

[diagnostics]
burn_in = 100
window = 1000
"#;

const FIG3: &str = r#"
seed = 0

[model]
kind = "theta_logistic"
r = 0.3
zeta = 1.0
k = 500.0

[data]
length = 100
seed = 2024

[chain]
iterations = 20000
path_thin = 1

[chain.filter]
n_particles = 200

[chain.proposal]
kind = "adaptive_metropolis"
initial_std = [0.02, 0.1, 10.0]
am_start = 5000

[chain.init]
theta = [0.3, 1.0, 500.0]

[start]
kind = "above_data"
offset = 1.0

[diagnostics]
checkpoints = [10, 20000]
"#;

const LGCHECK: &str = r#"
seed = 0

[model]
kind = "linear_gaussian"
ar_coeff = 0.9
state_var = 1.0
obs_var = 1.0
init_mean = 0.0
init_var = 1.0

[data]
length = 50
seed = 1

[chain]
iterations = 50000
path_thin = 50000

[chain.filter]
n_particles = 200

[chain.proposal]
kind = "random_walk"
initial_std = [0.1]

[chain.init]
theta = [0.9]

[diagnostics]
burn_in = 10000
"#;

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig2 => "fig2",
            Preset::Fig3 => "fig3",
            Preset::Lgcheck => "lgcheck",
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            Preset::Fig2 => FIG2,
            Preset::Fig3 => FIG3,
            Preset::Lgcheck => LGCHECK,
        }
    }

    pub fn table(self) -> toml::Table {
        toml::from_str(self.source()).expect("preset TOML is valid")
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
pub fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

pub fn parse_table(text: &str, origin: &str) -> Result<toml::Table, CliError> {
    toml::from_str(text).map_err(|e| CliError::Parse { origin: origin.to_string(), message: e.to_string() })
}

/// Deserializes a merged table, reporting the dotted path of any offending field.
pub fn from_table(table: toml::Table) -> Result<RunConfig, CliError> {
    let text = toml::to_string(&table).map_err(|e| CliError::validation("", e.to_string()))?;
    let de = toml::Deserializer::parse(&text).map_err(|e| CliError::validation("", e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.message().to_string();
        CliError::validation(&field_path(&path, &message), message)
    })
}

/// Joins the parent path with a field named in backticks by serde's message.
fn field_path(path: &str, message: &str) -> String {
    let parent = if path == "." { "" } else { path };
    let named = ["missing field `", "unknown field `"]
        .iter()
        .find_map(|p| message.strip_prefix(p))
        .and_then(|rest| rest.split('`').next());
    match named {
        Some(field) if parent.is_empty() => field.to_string(),
        // unknown keys are already part of the path
        Some(field) if parent == field || parent.ends_with(&format!(".{field}")) => parent.to_string(),
        Some(field) => format!("{parent}.{field}"),
        None => parent.to_string(),
    }
}

/// Preset, then file, then overrides.
pub fn resolve(
    preset: Option<Preset>,
    file: Option<(&str, &str)>,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut table = preset.map(Preset::table).unwrap_or_default();
    if let Some((origin, text)) = file {
        merge(&mut table, parse_table(text, origin)?);
    }
    let mut cfg = from_table(table)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for p in [Preset::Fig2, Preset::Fig3, Preset::Lgcheck] {
            resolve(Some(p), None, None).unwrap();
        }
    }

    #[test]
    fn fig2_expansion() {
        let c = resolve(Some(Preset::Fig2), None, None).unwrap();
        assert_eq!(c.data.length, 100);
        assert_eq!(c.chain.filter.n_particles, 200);
        assert_eq!(c.chain.iterations, 100_000);
        assert_eq!(c.chain.proposal.am_start, 5000);
    }

    #[test]
    fn file_overrides_preset() {
        let c = resolve(Some(Preset::Fig3), Some(("x", "[chain]\niterations = 7\n")), Some(4)).unwrap();
        assert_eq!(c.chain.iterations, 7);
        assert_eq!(c.chain.filter.n_particles, 200);
        assert_eq!(c.seed, 4);
    }

    #[test]
    fn missing_and_unknown_fields_are_named() {
        let err = resolve(None, Some(("x", "[model]\nkind = \"theta_logistic\"\nr = 1.0\nzeta = 1.0\nk = 5.0\n")), None)
            .unwrap_err();
        assert_eq!(err.field(), Some("data"));
        let err = resolve(Some(Preset::Fig2), Some(("x", "[data]\nlenght = 3\n")), None).unwrap_err();
        assert_eq!(err.field(), Some("data.lenght"));
        let err = resolve(Some(Preset::Fig2), Some(("x", "[chain.filter]\nparticles = 3\n")), None).unwrap_err();
        assert_eq!(err.field(), Some("chain.filter.particles"));
        let text = "[model]\nkind = \"theta_logistic\"\nr = 1.0\nk = 5.0\n[data]\nlength = 3\n";
        let err = resolve(None, Some(("x", text)), None).unwrap_err();
        assert_eq!(err.field(), Some("model.zeta"));
    }
}
