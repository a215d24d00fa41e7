//! Command-line front end: configuration, datasets, chain runs and their outputs.

pub mod config;
pub mod error;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use pmcmc::diagnostics::{mmse_path, rmse, summarize, ChainSummary};
use pmcmc::models::{simulate, LinearGaussianParams};
use pmcmc::oracle::{kalman_self_check, posterior_equivalence_check, unbiasedness_check, EquivalenceSettings};
use pmcmc::samplers::run_chain_with;
use pmcmc::{Algorithm, ChainConfig, ParticleSystem, StateSpaceModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Preset, RunConfig};
pub use error::CliError;

use config::{BuiltModel, ModelSpec, OracleSpec, StartPath};

#[derive(Debug, Parser)]
#[command(name = "pmcmc", version, about = "Particle MCMC runs from TOML configurations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration, layered over the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Chain seed; overrides `seed` in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "PMCMC_OUT_DIR", default_value = "pmcmc-out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Independent chains, seeded `seed`, `seed + 1`, ...
    #[arg(long, global = true, default_value_t = 1)]
    pub chains: usize,
    /// Worker threads; all cores when unset.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write the particle trace and step log of the last filter run.
    #[arg(long, global = true)]
    pub trace: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Simulate a dataset from the configured model.
    Simulate,
    /// Particle marginal Metropolis-Hastings.
    Pmmh,
    /// Particle Gibbs.
    Pg,
    /// Particle Gibbs with PMMH steps taken with probability `chain.mix_prob`.
    Hybrid,
    /// PMMH driven by the ABC filter (`chain.filter.abc` must be set).
    AbcPmmh,
    /// Kalman self-check, estimator unbiasedness and PMMH-versus-exact-MH agreement.
    OracleCheck,
    /// Summarize an existing chain CSV.
    Diagnose {
        chain_csv: PathBuf,
        /// Dataset CSV with `x_true`, for the posterior-mean path error.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        burn_in: usize,
        #[arg(long, default_value_t = 1000)]
        window: usize,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Pmmh => "pmmh",
            Command::Pg => "pg",
            Command::Hybrid => "hybrid",
            Command::AbcPmmh => "abc-pmmh",
            Command::OracleCheck => "oracle-check",
            Command::Diagnose { .. } => "diagnose",
        }
    }

    fn algorithm(&self) -> Option<Algorithm> {
        match self {
            Command::Pmmh | Command::AbcPmmh => Some(Algorithm::Pmmh),
            Command::Pg => Some(Algorithm::Pg),
            Command::Hybrid => Some(Algorithm::Hybrid),
            _ => None,
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.chains == 0 {
        return Err(CliError::validation("chains", "must be at least 1"));
    }
    if cli.threads == Some(0) {
        return Err(CliError::validation("threads", "must be at least 1"));
    }
    match &cli.command {
        Command::Diagnose { chain_csv, truth, burn_in, window } => {
            diagnose(chain_csv, truth.as_deref(), *burn_in, *window, &cli.out)
        }
        Command::OracleCheck => oracle_check(cli),
        _ => {
            let cfg = load_config(cli)?;
            match cfg.model.build()? {
                BuiltModel::ThetaLogistic(m, truth) => run_model(cli, &cfg, &m, &truth),
                BuiltModel::LinearGaussian(m, truth) => run_model(cli, &cfg, &m, &truth),
                BuiltModel::NonlinearGain(m, truth) => run_model(cli, &cfg, &m, &truth),
            }
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(CliError::io(format!("reading {}", p.display())))?),
        None => None,
    };
    let origin = cli.config.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    config::resolve(cli.preset, text.as_deref().map(|t| (origin.as_str(), t)), cli.seed)
}

// ---------------------------------------------------------------------------
// Datasets.

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Latent states, when known.
    pub states: Option<Vec<f64>>,
    pub observations: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetRow {
    n: usize,
    x_true: Option<f64>,
    y: f64,
}

/// Writes `n,x_true,y` with 0-based `n`; `x_true` is empty when unknown.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for (n, &y) in ds.observations.iter().enumerate() {
        w.serialize(DatasetRow { n, x_true: ds.states.as_ref().map(|s| s[n]), y })?;
    }
    w.flush().map_err(CliError::io(format!("writing {}", path.display())))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut states = Vec::new();
    let mut observations = Vec::new();
    for (i, row) in r.deserialize::<DatasetRow>().enumerate() {
        let row = row?;
        if row.n != i {
            return Err(CliError::Runtime(format!("{}: row {i} has n = {}", path.display(), row.n)));
        }
        states.push(row.x_true);
        observations.push(row.y);
    }
    let states = states.into_iter().collect::<Option<Vec<f64>>>();
    Ok(Dataset { states, observations })
}

fn load_dataset<M: StateSpaceModel>(cfg: &RunConfig, model: &M, truth: &[f64]) -> Result<Dataset, CliError> {
    match &cfg.data.path {
        Some(p) => {
            let ds = read_dataset(p)?;
            if ds.observations.len() != cfg.data.length {
                return Err(CliError::validation(
                    "data.length",
                    format!("{} has {} observations", p.display(), ds.observations.len()),
                ));
            }
            Ok(ds)
        }
        None => {
            if !model.in_support(truth) {
                return Err(CliError::validation("model", format!("{truth:?} lies outside the prior support")));
            }
            let sim = simulate(model, truth, cfg.data.length, cfg.data.seed)
                .map_err(|e| CliError::validation("data", e.to_string()))?;
            Ok(Dataset { states: Some(sim.states), observations: sim.observations })
        }
    }
}

// ---------------------------------------------------------------------------
// Chains.

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub seed: u64,
    #[serde(flatten)]
    pub chain: ChainSummary,
    pub total_cap_hits: usize,
    /// Distinct proposal dimensions seen over the run.
    pub proposal_dims: Vec<usize>,
    pub initial_path_rmse: Option<f64>,
    /// RMSE of the running posterior-mean path at the configured iterations.
    pub checkpoint_rmse: BTreeMap<usize, f64>,
}

#[derive(Serialize)]
struct ChainEntry {
    dir: String,
    seed: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    preset: Option<&'static str>,
    seed: u64,
    chains: Vec<ChainEntry>,
    threads: Option<usize>,
    trace: bool,
    config: &'a RunConfig,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(format!("writing {}", path.display())))
}

fn with_file<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(CliError::io(ctx()))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(CliError::io(ctx()))
}

fn write_run_files(cfg: &RunConfig, cli: &Cli, chains: Vec<ChainEntry>) -> Result<(), CliError> {
    let manifest = Manifest {
        tool: "pmcmc",
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name(),
        preset: cli.preset.map(Preset::name),
        seed: cfg.seed,
        chains,
        threads: cli.threads,
        trace: cli.trace,
        config: cfg,
    };
    write_json(&manifest, &cli.out.join("manifest.json"))?;
    let resolved = toml::to_string(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(cli.out.join("config.toml"), resolved).map_err(CliError::io("writing config.toml"))
}

fn chain_config(cfg: &RunConfig, y: &[f64]) -> ChainConfig {
    let mut chain = cfg.chain.clone();
    if let StartPath::AboveData { offset } = cfg.start {
        let top = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        chain.init.path = Some(vec![top + offset; y.len()]);
    }
    chain
}

fn run_model<M: StateSpaceModel>(cli: &Cli, cfg: &RunConfig, model: &M, truth: &[f64]) -> Result<(), CliError> {
    let ds = load_dataset(cfg, model, truth)?;
    let Some(algorithm) = cli.command.algorithm() else {
        create_dir(&cli.out)?;
        write_dataset(&ds, &cli.out.join("dataset.csv"))?;
        return write_run_files(cfg, cli, Vec::new());
    };
    if matches!(cli.command, Command::AbcPmmh) && cfg.chain.filter.abc.is_none() {
        return Err(CliError::validation("chain.filter.abc", "abc-pmmh needs an ABC filter configuration"));
    }
    let chain = chain_config(cfg, &ds.observations);
    chain
        .validate(algorithm, model.param_dim(), ds.observations.len())
        .map_err(|e| CliError::validation("chain", e.to_string()))?;

    create_dir(&cli.out)?;
    write_dataset(&ds, &cli.out.join("dataset.csv"))?;
    let jobs: Vec<(PathBuf, u64)> = if cli.chains == 1 {
        vec![(cli.out.clone(), cfg.seed)]
    } else {
        (0..cli.chains).map(|i| (cli.out.join(format!("chain_{i}")), cfg.seed.wrapping_add(i as u64))).collect()
    };
    let entries = jobs
        .iter()
        .map(|(d, s)| ChainEntry {
            dir: d.strip_prefix(&cli.out).unwrap_or(d).display().to_string(),
            seed: *s,
        })
        .collect();
    write_run_files(cfg, cli, entries)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let summaries = pool.install(|| {
        jobs.par_iter()
            .map(|(dir, seed)| {
                let job = ChainJob { cfg, chain: &chain, algorithm, dataset: &ds, dir, seed: *seed, trace: cli.trace };
                job.execute(model)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    for s in &summaries {
        println!(
            "{}",
            serde_json::json!({
                "seed": s.seed,
                "acceptance_rate": s.chain.acceptance_rate,
                "mmse_rmse": s.chain.mmse_rmse,
                "theta_mean": s.chain.theta_mean,
            })
        );
    }
    Ok(())
}

struct ChainJob<'a> {
    cfg: &'a RunConfig,
    chain: &'a ChainConfig,
    algorithm: Algorithm,
    dataset: &'a Dataset,
    dir: &'a Path,
    seed: u64,
    trace: bool,
}

impl ChainJob<'_> {
    fn execute<M: StateSpaceModel>(&self, model: &M) -> Result<RunSummary, CliError> {
        create_dir(self.dir)?;
        let y = &self.dataset.observations;
        let mut final_system: Option<ParticleSystem> = None;
        let out = run_chain_with(self.algorithm, model, y, self.chain, self.seed, |_, _, step| {
            if self.trace && step.system.is_some() {
                final_system.clone_from(&step.system);
            }
        })?;

        with_file(&self.dir.join("chain.csv"), |w| out.write_csv(w))?;
        with_file(&self.dir.join("records.csv"), |w| out.write_records_csv(w))?;
        if self.trace {
            match &final_system {
                Some(sys) => {
                    with_file(&self.dir.join("trace.csv"), |w| sys.write_trace(w))?;
                    with_file(&self.dir.join("steps.csv"), |w| sys.write_step_log(w))?;
                }
                None => eprintln!("note: no filter ran after initialization; no trace written"),
            }
        }

        let diag = &self.cfg.diagnostics;
        let truth = self.dataset.states.as_deref();
        let start = out.path_iters.partition_point(|&i| i <= diag.burn_in);
        let mmse = if start < out.paths.len() { Some(mmse_path(&out.paths[start..], 0).map_err(runtime)?) } else { None };
        if let Some(m) = &mmse {
            with_file(&self.dir.join("mmse.csv"), |w| {
                writeln!(w, "n,x_mmse,x_true")?;
                for (n, x) in m.iter().enumerate() {
                    let t = truth.map(|t| t[n].to_string()).unwrap_or_default();
                    writeln!(w, "{n},{x},{t}")?;
                }
                Ok(())
            })?;
        }
        let mut checkpoint_rmse = BTreeMap::new();
        if let Some(t) = truth {
            for &c in &diag.checkpoints {
                let paths = out.paths_until(c);
                if !paths.is_empty() {
                    checkpoint_rmse.insert(c, rmse(&mmse_path(paths, 0).map_err(runtime)?, t));
                }
            }
        }
        let changed: Vec<bool> = out.records.iter().map(|r| r.state_changed).collect();
        let mmse_rmse = mmse.as_ref().zip(truth).map(|(m, t)| rmse(m, t));
        let mut dims: Vec<usize> = out.records.iter().map(|r| r.proposal_dim).collect();
        dims.sort_unstable();
        dims.dedup();
        let summary = RunSummary {
            algorithm: self.algorithm,
            seed: self.seed,
            chain: summarize(&out.thetas, &out.accepted, &changed, out.param_names.clone(), diag.window, mmse_rmse),
            total_cap_hits: out.records.iter().map(|r| r.cap_hits).sum(),
            proposal_dims: dims,
            initial_path_rmse: truth.map(|t| rmse(&out.initial.path, t)),
            checkpoint_rmse,
        };
        write_json(&summary, &self.dir.join("summary.json"))?;
        Ok(summary)
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

// ---------------------------------------------------------------------------
// Oracle checks.

fn oracle_check(cli: &Cli) -> Result<(), CliError> {
    let (oracle, params, seed) = if cli.config.is_some() || cli.preset.is_some() {
        let cfg = load_config(cli)?;
        let params = match &cfg.model {
            ModelSpec::LinearGaussian(p) => p.params(),
            _ => LinearGaussianParams::default(),
        };
        (cfg.oracle, params, cfg.seed)
    } else {
        (OracleSpec::default(), LinearGaussianParams::default(), cli.seed.unwrap_or(0))
    };
    params.validate().map_err(|e| CliError::validation("model", e.to_string()))?;
    create_dir(&cli.out)?;

    let mut results = serde_json::Map::new();
    let mut failed = Vec::new();
    let mut report = |name: &str, passed: bool, value: serde_json::Value| {
        println!("{}", serde_json::json!({ "check": name, "passed": passed, "report": value }));
        if !passed {
            failed.push(name.to_string());
        }
        results.insert(name.to_string(), value);
    };

    let kalman = kalman_self_check(100, 5, 1e-8, seed);
    report("kalman_self_check", kalman.passed, to_value(&kalman)?);

    let unbiased = unbiasedness_check(
        &params,
        oracle.unbiasedness_len,
        oracle.unbiasedness_particles,
        oracle.unbiasedness_runs,
        seed,
    )
    .map_err(runtime)?;
    report("unbiasedness", unbiased.passed, to_value(&unbiased)?);

    let settings = EquivalenceSettings {
        params,
        len: oracle.equivalence_len,
        n_particles: oracle.equivalence_particles,
        iterations: oracle.equivalence_iterations,
        burn_in_fraction: oracle.equivalence_burn_in,
        thin: oracle.equivalence_thin,
        proposal_std: oracle.equivalence_proposal_std,
        threshold: oracle.ks_threshold,
    };
    let equiv = posterior_equivalence_check(&settings, seed)?;
    report("posterior_equivalence", equiv.passed, to_value(&equiv)?);

    write_json(&results, &cli.out.join("oracle.json"))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::OracleFailed(failed.join(", ")))
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(v).map_err(runtime)
}

// ---------------------------------------------------------------------------
// Diagnostics of an existing chain.

/// Parsed `chain.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTable {
    pub theta_names: Vec<String>,
    pub accepted: Vec<bool>,
    pub log_mls: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    /// `(iter, path)` for rows carrying a path.
    pub paths: Vec<(usize, Vec<f64>)>,
}

impl ChainTable {
    /// A row changes state when its parameter or likelihood differs from the
    /// previous row, or when both rows carry paths that differ.
    pub fn changed(&self) -> Vec<bool> {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let path_at: BTreeMap<usize, &Vec<f64>> = self.paths.iter().map(|(i, p)| (*i, p)).collect();
        (0..self.thetas.len())
            .map(|i| {
                i == 0
                    || bits(&self.thetas[i]) != bits(&self.thetas[i - 1])
                    || self.log_mls[i].to_bits() != self.log_mls[i - 1].to_bits()
                    || match (path_at.get(&(i + 1)), path_at.get(&i)) {
                        (Some(a), Some(b)) => bits(a) != bits(b),
                        _ => false,
                    }
            })
            .collect()
    }
}

pub fn read_chain_csv(path: &Path) -> Result<ChainTable, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Runtime(format!("{}: missing column {name}", path.display())))
    };
    let (c_iter, c_acc, c_ml) = (col("iter")?, col("accepted")?, col("log_ml")?);
    let theta_cols: Vec<usize> = (0..headers.len()).filter(|&i| headers[i].starts_with("theta_")).collect();
    let path_cols: Vec<usize> = (0..headers.len()).filter(|&i| headers[i].starts_with("path_")).collect();
    let bad = |line: usize, what: &str| CliError::Runtime(format!("{}: line {line}: bad {what}", path.display()));
    let num = |s: &str, line: usize, what: &str| s.parse::<f64>().map_err(|_| bad(line, what));

    let mut table = ChainTable {
        theta_names: theta_cols.iter().map(|&i| headers[i].to_string()).collect(),
        accepted: Vec::new(),
        log_mls: Vec::new(),
        thetas: Vec::new(),
        paths: Vec::new(),
    };
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let iter: usize = rec[c_iter].parse().map_err(|_| bad(line, "iter"))?;
        table.accepted.push(&rec[c_acc] == "1");
        table.log_mls.push(num(&rec[c_ml], line, "log_ml")?);
        table.thetas.push(theta_cols.iter().map(|&i| num(&rec[i], line, "theta")).collect::<Result<_, _>>()?);
        if !path_cols.is_empty() && !rec[path_cols[0]].is_empty() {
            let p = path_cols.iter().map(|&i| num(&rec[i], line, "path")).collect::<Result<_, _>>()?;
            table.paths.push((iter, p));
        }
    }
    if table.thetas.is_empty() {
        return Err(CliError::Runtime(format!("{}: no iterations", path.display())));
    }
    Ok(table)
}

fn diagnose(chain_csv: &Path, truth: Option<&Path>, burn_in: usize, window: usize, out: &Path) -> Result<(), CliError> {
    if window == 0 {
        return Err(CliError::validation("window", "must be at least 1"));
    }
    let table = read_chain_csv(chain_csv)?;
    let mmse_rmse = match truth {
        Some(p) => {
            let states = read_dataset(p)?
                .states
                .ok_or_else(|| CliError::Runtime(format!("{} has no x_true column values", p.display())))?;
            let kept: Vec<Vec<f64>> =
                table.paths.iter().filter(|(i, _)| *i > burn_in).map(|(_, p)| p.clone()).collect();
            if kept.is_empty() {
                None
            } else {
                let m = mmse_path(&kept, 0).map_err(runtime)?;
                if m.len() != states.len() {
                    return Err(CliError::Runtime("path length differs from the dataset".into()));
                }
                Some(rmse(&m, &states))
            }
        }
        None => None,
    };
    let changed = table.changed();
    let summary = summarize(&table.thetas, &table.accepted, &changed, table.theta_names.clone(), window, mmse_rmse);
    create_dir(out)?;
    write_json(&summary, &out.join("diagnostics.json"))?;
    println!("{}", serde_json::to_string(&summary).map_err(runtime)?);
    Ok(())
}
