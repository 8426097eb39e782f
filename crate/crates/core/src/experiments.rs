//! Experiment driver: Table-style accuracy runs, Δt / N / dimension sweeps
//! and single solves, all written as CSV plus a JSON manifest.
//!
//! Every trial draws its master seed from `derive_seed(seed, TRIAL, trial)`;
//! jobs run on the rayon pool and are merged by job index, so output bytes
//! do not depend on the number of worker threads.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lq_model::{builtin_2d, mass_spring, LqProblem, TimeGrid};
use crate::policy::{
    gains_from_matrices, run_policy_iteration, IterationHistory, Method, PolicyConfig,
};
use crate::riccati::{solve_riccati, RiccatiSolution, DEFAULT_REFINE};
use crate::rng::{derive_seed, tags};
use crate::score::Jitter;

pub const DT_GRID: [f64; 7] = [0.004, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4];
pub const N_GRID: [usize; 7] = [10, 50, 100, 500, 1000, 2000, 4000];
pub const P_GRID: [usize; 10] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Table1,
    SweepDt,
    SweepN,
    SweepDim,
    Solve,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Table1 => "table1",
            Command::SweepDt => "sweep-dt",
            Command::SweepN => "sweep-n",
            Command::SweepDim => "sweep-dim",
            Command::Solve => "solve",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table1" => Ok(Command::Table1),
            "sweep-dt" => Ok(Command::SweepDt),
            "sweep-n" => Ok(Command::SweepN),
            "sweep-dim" => Ok(Command::SweepDim),
            "solve" => Ok(Command::Solve),
            other => Err(Error::Config(format!("unknown command {other:?}"))),
        }
    }
}

/// A solver method or the Riccati oracle (the latter only for `solve`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MethodChoice {
    Oracle,
    Solver(Method),
}

impl FromStr for MethodChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().eq_ignore_ascii_case("oracle") {
            Ok(MethodChoice::Oracle)
        } else {
            s.parse().map(MethodChoice::Solver)
        }
    }
}

impl TryFrom<String> for MethodChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MethodChoice> for String {
    fn from(m: MethodChoice) -> String {
        match m {
            MethodChoice::Oracle => "oracle".into(),
            MethodChoice::Solver(m) => m.label().to_ascii_lowercase(),
        }
    }
}

/// Where the LQ instance comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProblemSource {
    Builtin2d,
    MassSpring(usize),
    Json(PathBuf),
}

impl FromStr for ProblemSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "builtin-2d" {
            return Ok(ProblemSource::Builtin2d);
        }
        if let Some(p) = s.strip_prefix("mass-spring:") {
            let p: usize = p
                .parse()
                .map_err(|_| Error::Config(format!("bad mass-spring size in {s:?}")))?;
            if p == 0 {
                return Err(Error::Config("mass-spring size must be positive".into()));
            }
            return Ok(ProblemSource::MassSpring(p));
        }
        if s.is_empty() {
            return Err(Error::Config("empty problem source".into()));
        }
        Ok(ProblemSource::Json(PathBuf::from(s)))
    }
}

impl ProblemSource {
    pub fn load(&self) -> Result<LqProblem> {
        match self {
            ProblemSource::Builtin2d => Ok(builtin_2d()),
            ProblemSource::MassSpring(p) => mass_spring(*p),
            ProblemSource::Json(path) => LqProblem::load(path).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
                other => other,
            }),
        }
    }
}

/// Experiment settings; JSON keys mirror the command-line flags.
///
/// Unset numeric fields take the command's defaults in [`ExperimentConfig::resolve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Command,
    #[serde(default = "default_problem")]
    pub problem: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<MethodChoice>>,
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub jitter: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_values: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_values: Option<Vec<usize>>,
    /// Stop a trial at its first unstable iteration (it is excluded anyway).
    #[serde(default = "default_true")]
    pub halt_on_instability: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

fn default_problem() -> String {
    "builtin-2d".into()
}

fn default_out() -> PathBuf {
    PathBuf::from("results")
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn new(experiment: Command) -> Self {
        Self {
            experiment,
            problem: default_problem(),
            methods: None,
            samples: None,
            dt: None,
            horizon: None,
            iters: None,
            trials: None,
            seed: 0,
            out: default_out(),
            jitter: false,
            initial_mean: None,
            dt_values: None,
            n_values: None,
            p_values: None,
            halt_on_instability: true,
            tolerance: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fills command defaults and validates.
    pub fn resolve(&self) -> Result<Resolved> {
        let cmd = self.experiment;
        let (n_def, iters_def) = match cmd {
            Command::Table1 => (2000, 200),
            Command::Solve => (2000, 200),
            Command::SweepDt | Command::SweepN | Command::SweepDim => (1000, 50),
        };
        let samples = self.samples.unwrap_or(n_def);
        let dt = self.dt.unwrap_or(0.02);
        let iters = self.iters.unwrap_or(iters_def);
        let trials = match cmd {
            Command::Solve => self.trials.unwrap_or(1),
            _ => self.trials.unwrap_or(15),
        };
        if samples == 0 || iters == 0 || trials == 0 {
            return Err(Error::Config("N, iters and trials must be positive".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if let Some(t) = self.horizon {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("T must be positive, got {t}")));
            }
        }
        if let Some(tol) = self.tolerance {
            if tol.is_nan() || tol <= 0.0 {
                return Err(Error::Config("tolerance must be positive".into()));
            }
        }

        let choices = match &self.methods {
            Some(m) if m.is_empty() => return Err(Error::Config("method list is empty".into())),
            Some(m) => m.clone(),
            None if cmd == Command::Solve => vec![MethodChoice::Solver(Method::TrC)],
            None => Method::ALL
                .iter()
                .map(|m| MethodChoice::Solver(*m))
                .collect(),
        };
        let oracle_only = choices == [MethodChoice::Oracle];
        if choices.contains(&MethodChoice::Oracle) && !(cmd == Command::Solve && oracle_only) {
            return Err(Error::Config(
                "method oracle is only valid alone with solve".into(),
            ));
        }
        if cmd == Command::Solve && choices.len() != 1 {
            return Err(Error::Config("solve takes exactly one method".into()));
        }
        let mut methods: Vec<Method> = Vec::new();
        for c in &choices {
            if let MethodChoice::Solver(m) = c {
                if !methods.contains(m) {
                    methods.push(*m);
                }
            }
        }

        let dt_values = self.dt_values.clone().unwrap_or_else(|| DT_GRID.to_vec());
        let n_values = self.n_values.clone().unwrap_or_else(|| N_GRID.to_vec());
        let p_values = self.p_values.clone().unwrap_or_else(|| P_GRID.to_vec());
        if dt_values.is_empty() || n_values.is_empty() || p_values.is_empty() {
            return Err(Error::Config("sweep value lists must be nonempty".into()));
        }
        if dt_values.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || n_values.contains(&0)
            || p_values.contains(&0)
        {
            return Err(Error::Config("sweep values must be positive".into()));
        }

        let problem = if cmd == Command::SweepDim {
            None
        } else {
            Some(self.build_problem(&self.problem.parse()?)?)
        };

        // fail on bad grids before any trial runs
        let grid_err = |e: Error| Error::Config(e.to_string());
        match (&problem, cmd) {
            (Some(prob), Command::SweepDt) => {
                for &dt in &dt_values {
                    sweep_grid(prob.horizon(), dt).map_err(grid_err)?;
                }
            }
            (Some(prob), _) => {
                TimeGrid::new(prob.horizon(), dt).map_err(grid_err)?;
            }
            (None, _) => {
                for &p in &p_values {
                    let prob = self.build_problem(&ProblemSource::MassSpring(p))?;
                    TimeGrid::new(prob.horizon(), dt).map_err(grid_err)?;
                }
            }
        }

        let jitter = if self.jitter {
            Jitter::TraceRelative
        } else {
            Jitter::None
        };
        Ok(Resolved {
            config: self.clone(),
            command: cmd,
            problem,
            methods,
            oracle_only,
            samples,
            dt,
            iters,
            trials,
            jitter,
            dt_values,
            n_values,
            p_values,
        })
    }

    fn build_problem(&self, source: &ProblemSource) -> Result<LqProblem> {
        let mut prob = source.load()?;
        if let Some(t) = self.horizon {
            prob = prob.with_horizon(t)?;
        }
        if let Some(m0) = &self.initial_mean {
            prob = prob.with_initial_mean(DVector::from_column_slice(m0))?;
        }
        Ok(prob)
    }
}

/// A validated configuration with defaults filled in.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub command: Command,
    pub problem: Option<LqProblem>,
    pub methods: Vec<Method>,
    pub oracle_only: bool,
    pub samples: usize,
    pub dt: f64,
    pub iters: usize,
    pub trials: usize,
    pub jitter: Jitter,
    pub dt_values: Vec<f64>,
    pub n_values: Vec<usize>,
    pub p_values: Vec<usize>,
}

impl Resolved {
    fn problem(&self) -> &LqProblem {
        self.problem
            .as_ref()
            .expect("problem resolved for this command")
    }

    fn policy_config(&self, samples: usize, grid: TimeGrid, seed: u64) -> PolicyConfig {
        let mut cfg = PolicyConfig::new(samples, grid, self.iters, seed);
        cfg.jitter = self.jitter;
        cfg.tolerance = self.config.tolerance;
        cfg.halt_on_instability = self.config.halt_on_instability;
        cfg
    }
}

/// Master seed of trial `trial`.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, tags::TRIAL, trial as u64)
}

/// Outcome of one policy-iteration trial.
#[derive(Debug, Clone)]
pub struct TrialResult {
    pub method: Method,
    pub trial: usize,
    pub seed: u64,
    pub unstable: bool,
    pub mse: Option<f64>,
    pub final_cost: f64,
    pub history: Option<IterationHistory>,
}

impl TrialResult {
    fn from_history(trial: usize, seed: u64, h: IterationHistory, keep: bool) -> Self {
        TrialResult {
            method: h.method,
            trial,
            seed,
            unstable: h.unstable(),
            mse: h.final_mse(),
            final_cost: h
                .records
                .last()
                .map_or(h.initial_cost.mean, |r| r.cost.mean),
            history: keep.then_some(h),
        }
    }

    /// A trial that could not run at all (e.g. too few samples for the class).
    fn failed(method: Method, trial: usize, seed: u64) -> Self {
        TrialResult {
            method,
            trial,
            seed,
            unstable: true,
            mse: None,
            final_cost: f64::NAN,
            history: None,
        }
    }
}

/// Runs one trial; solver-level failures count as instability.
pub fn run_trial(
    prob: &LqProblem,
    method: Method,
    cfg: &PolicyConfig,
    oracle: &RiccatiSolution,
    trial: usize,
    keep_history: bool,
) -> Result<TrialResult> {
    match run_policy_iteration(prob, method, cfg, Some(oracle)) {
        Ok(h) => Ok(TrialResult::from_history(trial, cfg.seed, h, keep_history)),
        Err(
            Error::TooFewSamples { .. } | Error::SingularCovariance { .. } | Error::NonFinite(_),
        ) => Ok(TrialResult::failed(method, trial, cfg.seed)),
        Err(e) => Err(e),
    }
}

/// Mean, sample standard deviation, min and max over the stable trials.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MseStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub stable: usize,
    pub unstable: usize,
}

pub fn mse_stats<'a>(results: impl IntoIterator<Item = &'a TrialResult>) -> MseStats {
    let mut values = Vec::new();
    let mut unstable = 0;
    for r in results {
        match (r.unstable, r.mse) {
            (false, Some(m)) => values.push(m),
            _ => unstable += 1,
        }
    }
    let k = values.len();
    let nan = f64::NAN;
    if k == 0 {
        return MseStats {
            mean: nan,
            std: nan,
            min: nan,
            max: nan,
            stable: 0,
            unstable,
        };
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let std = if k > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    MseStats {
        mean,
        std,
        min: values.iter().cloned().fold(f64::INFINITY, f64::min),
        max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        stable: k,
        unstable,
    }
}

/// Spearman rank correlation with average ranks for ties; `None` when
/// fewer than two points or a constant series.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Counts reported to the caller (exit status 2 when nothing was stable).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub trials: usize,
    pub unstable: usize,
}

impl RunSummary {
    pub fn all_unstable(&self) -> bool {
        self.trials > 0 && self.unstable == self.trials
    }

    fn add(&mut self, results: &[TrialResult]) {
        self.trials += results.len();
        self.unstable += results.iter().filter(|r| r.unstable).count();
    }
}

/// Runs the configured command and writes its files under `config.out`.
pub fn run(config: &ExperimentConfig) -> Result<RunSummary> {
    let resolved = config.resolve()?;
    fs::create_dir_all(&config.out)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", config.out.display())))?;
    match resolved.command {
        Command::Table1 => cmd_table1(&resolved),
        Command::SweepDt => cmd_sweep_dt(&resolved),
        Command::SweepN => cmd_sweep_n(&resolved),
        Command::SweepDim => cmd_sweep_dim(&resolved),
        Command::Solve => cmd_solve(&resolved),
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| format!("{x:e}"))
}

fn matrix_header(prefix: &str, rows: usize, cols: usize) -> String {
    let mut out = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            out.push(format!("{prefix}[{i}][{j}]"));
        }
    }
    out.join(",")
}

fn matrix_cells(m: &DMatrix<f64>) -> String {
    let mut out = Vec::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(format!("{:e}", m[(i, j)]));
        }
    }
    out.join(",")
}

/// Fitted `G_t` against the oracle, one row per grid point.
fn write_g_comparison<W: Write>(
    mut out: W,
    label: Option<Method>,
    matrices: &[DMatrix<f64>],
    grid: &TimeGrid,
    oracle: &RiccatiSolution,
    header: bool,
) -> Result<()> {
    let n = oracle.g(0).nrows();
    if header {
        let lead = if label.is_some() { "method,k,t" } else { "k,t" };
        writeln!(
            out,
            "{lead},{},{}",
            matrix_header("G", n, n),
            matrix_header("Gstar", n, n)
        )?;
    }
    for (k, t) in grid.times().enumerate() {
        if let Some(m) = label {
            write!(out, "{m},")?;
        }
        writeln!(
            out,
            "{k},{t:e},{},{}",
            matrix_cells(&matrices[k]),
            matrix_cells(oracle.g(k))
        )?;
    }
    Ok(())
}

fn write_cost_series<W: Write>(mut out: W, results: &[TrialResult]) -> Result<()> {
    writeln!(out, "method,trial,iter,cost,cost_se,mse,unstable_flag")?;
    for r in results {
        let Some(h) = &r.history else { continue };
        writeln!(
            out,
            "{},{},0,{:e},{:e},NaN,0",
            r.method, r.trial, h.initial_cost.mean, h.initial_cost.std_error
        )?;
        for rec in &h.records {
            writeln!(
                out,
                "{},{},{},{:e},{:e},{},{}",
                r.method,
                r.trial,
                rec.iter,
                rec.cost.mean,
                rec.cost.std_error,
                fmt_opt(rec.mse),
                u8::from(rec.unstable)
            )?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config: &'a ExperimentConfig,
    resolved: ManifestResolved<'a>,
    trial_seeds: Vec<u64>,
    files: Vec<&'a str>,
    summary: RunSummary,
    notes: Vec<&'a str>,
}

#[derive(Serialize)]
struct ManifestResolved<'a> {
    methods: Vec<&'a str>,
    samples: usize,
    dt: f64,
    horizon: Option<f64>,
    iters: usize,
    trials: usize,
    jitter: bool,
    dt_values: &'a [f64],
    n_values: &'a [usize],
    p_values: &'a [usize],
}

fn write_manifest(r: &Resolved, files: &[&str], summary: RunSummary) -> Result<()> {
    let mut notes = vec![
        "MSE uses a left Riemann sum over t < T",
        "per-trial MSE is taken after the last iteration; unstable trials are counted, not averaged",
    ];
    if matches!(
        r.command,
        Command::SweepDt | Command::SweepN | Command::SweepDim
    ) && r.config.iters.is_none()
    {
        notes.push("sweep iteration count defaults to 50 (runtime compromise)");
    }
    if r.config.halt_on_instability {
        notes.push("a trial stops at its first unstable iteration");
    }
    let manifest = Manifest {
        command: r.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        config: &r.config,
        resolved: ManifestResolved {
            methods: r.methods.iter().map(|m| m.label()).collect(),
            samples: r.samples,
            dt: r.dt,
            horizon: r.problem.as_ref().map(LqProblem::horizon),
            iters: r.iters,
            trials: r.trials,
            jitter: r.config.jitter,
            dt_values: &r.dt_values,
            n_values: &r.n_values,
            p_values: &r.p_values,
        },
        trial_seeds: (0..r.trials)
            .map(|t| trial_seed(r.config.seed, t))
            .collect(),
        files: files.to_vec(),
        summary,
        notes,
    };
    let mut out = create(&r.config.out, "manifest.json")?;
    serde_json::to_writer_pretty(&mut out, &manifest)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

/// One job per (method, trial), results in job order.
fn run_jobs(
    prob: &LqProblem,
    methods: &[Method],
    r: &Resolved,
    samples: usize,
    grid: &TimeGrid,
    oracle: &RiccatiSolution,
    keep_history: bool,
) -> Result<Vec<TrialResult>> {
    let jobs: Vec<(Method, usize)> = methods
        .iter()
        .flat_map(|m| (0..r.trials).map(move |t| (*m, t)))
        .collect();
    jobs.par_iter()
        .map(|(m, t)| {
            let cfg = r.policy_config(samples, grid.clone(), trial_seed(r.config.seed, *t));
            run_trial(prob, *m, &cfg, oracle, *t, keep_history)
        })
        .collect()
}

/// Accuracy comparison on one problem: per-trial MSE, per-method summary,
/// cost series and the final `G_t` of trial 0.
pub fn cmd_table1(r: &Resolved) -> Result<RunSummary> {
    let prob = r.problem();
    let grid = TimeGrid::new(prob.horizon(), r.dt)?;
    let oracle = solve_riccati(prob, &grid, DEFAULT_REFINE)?;
    let results = run_jobs(prob, &r.methods, r, r.samples, &grid, &oracle, true)?;
    let dir = &r.config.out;

    let mut out = create(dir, "table1_trials.csv")?;
    writeln!(out, "method,trial,seed,mse,unstable_flag,final_cost")?;
    for t in &results {
        writeln!(
            out,
            "{},{},{},{},{},{:e}",
            t.method,
            t.trial,
            t.seed,
            fmt_opt(t.mse),
            u8::from(t.unstable),
            t.final_cost
        )?;
    }
    out.flush()?;

    let mut out = create(dir, "table1_summary.csv")?;
    writeln!(
        out,
        "method,mean_mse,std_mse,min_mse,max_mse,stable_trials,unstable_trials"
    )?;
    for m in &r.methods {
        let s = mse_stats(results.iter().filter(|t| t.method == *m));
        writeln!(
            out,
            "{m},{:e},{:e},{:e},{:e},{},{}",
            s.mean, s.std, s.min, s.max, s.stable, s.unstable
        )?;
    }
    out.flush()?;

    let mut out = create(dir, "table1_costs.csv")?;
    write_cost_series(&mut out, &results)?;
    out.flush()?;

    let mut out = create(dir, "table1_gt.csv")?;
    let mut first = true;
    for t in results.iter().filter(|t| t.trial == 0) {
        let Some(sol) = t.history.as_ref().and_then(|h| h.final_solution.as_ref()) else {
            continue;
        };
        write_g_comparison(
            &mut out,
            Some(t.method),
            &sol.matrices(),
            &grid,
            &oracle,
            first,
        )?;
        first = false;
    }
    if first {
        writeln!(out, "method,k,t")?;
    }
    out.flush()?;

    let mut summary = RunSummary::default();
    summary.add(&results);
    write_manifest(
        r,
        &[
            "table1_trials.csv",
            "table1_summary.csv",
            "table1_costs.csv",
            "table1_gt.csv",
        ],
        summary,
    )?;
    Ok(summary)
}

fn write_sweep(
    r: &Resolved,
    name: &str,
    key: &str,
    points: &[(String, Vec<TrialResult>)],
) -> Result<RunSummary> {
    let dir = &r.config.out;
    let trials_file = format!("{name}.csv");
    let summary_file = format!("{name}_summary.csv");
    let mut out = create(dir, &trials_file)?;
    writeln!(out, "{key},method,trial,seed,mse,unstable_flag")?;
    for (value, results) in points {
        for t in results {
            writeln!(
                out,
                "{value},{},{},{},{},{}",
                t.method,
                t.trial,
                t.seed,
                fmt_opt(t.mse),
                u8::from(t.unstable)
            )?;
        }
    }
    out.flush()?;

    let mut out = create(dir, &summary_file)?;
    writeln!(
        out,
        "{key},method,mean_mse,std_mse,min_mse,max_mse,stable_trials,unstable_trials"
    )?;
    let mut summary = RunSummary::default();
    for (value, results) in points {
        summary.add(results);
        for m in &r.methods {
            let s = mse_stats(results.iter().filter(|t| t.method == *m));
            writeln!(
                out,
                "{value},{m},{:e},{:e},{:e},{:e},{},{}",
                s.mean, s.std, s.min, s.max, s.stable, s.unstable
            )?;
        }
    }
    out.flush()?;
    write_manifest(r, &[&trials_file, &summary_file], summary)?;
    Ok(summary)
}

/// Uniform grid with `round(T/Δt)` steps, so steps that do not divide the
/// horizon (0.3 into 4) still run; the CSV records the effective step.
pub fn sweep_grid(horizon: f64, dt: f64) -> Result<TimeGrid> {
    let steps = (horizon / dt).round().max(1.0) as usize;
    TimeGrid::from_steps(horizon, steps)
}

/// MSE against the time step over `dt_values`.
pub fn cmd_sweep_dt(r: &Resolved) -> Result<RunSummary> {
    let prob = r.problem();
    let mut points = Vec::new();
    for &dt in &r.dt_values {
        let grid = sweep_grid(prob.horizon(), dt)?;
        let oracle = solve_riccati(prob, &grid, DEFAULT_REFINE)?;
        let results = run_jobs(prob, &r.methods, r, r.samples, &grid, &oracle, false)?;
        points.push((format!("{dt:e},{:e}", grid.dt()), results));
    }
    write_sweep(r, "sweep_dt", "dt,dt_effective", &points)
}

/// MSE against the sample size over `n_values`.
pub fn cmd_sweep_n(r: &Resolved) -> Result<RunSummary> {
    let prob = r.problem();
    let grid = TimeGrid::new(prob.horizon(), r.dt)?;
    let oracle = solve_riccati(prob, &grid, DEFAULT_REFINE)?;
    let mut points = Vec::new();
    for &n in &r.n_values {
        let results = run_jobs(prob, &r.methods, r, n, &grid, &oracle, false)?;
        points.push((n.to_string(), results));
    }
    write_sweep(r, "sweep_n", "N", &points)
}

/// Normalised MSE on the mass-spring chain for each `p` in `p_values`.
pub fn cmd_sweep_dim(r: &Resolved) -> Result<RunSummary> {
    let mut points = Vec::new();
    for &p in &r.p_values {
        let prob = r.config.build_problem(&ProblemSource::MassSpring(p))?;
        let grid = TimeGrid::new(prob.horizon(), r.dt)?;
        let oracle = solve_riccati(&prob, &grid, DEFAULT_REFINE)?;
        let results = run_jobs(&prob, &r.methods, r, r.samples, &grid, &oracle, false)?;
        points.push((p.to_string(), results));
    }
    write_sweep(r, "sweep_dim", "p", &points)
}

/// One policy-iteration run (or the oracle alone).
pub fn cmd_solve(r: &Resolved) -> Result<RunSummary> {
    let prob = r.problem();
    let grid = TimeGrid::new(prob.horizon(), r.dt)?;
    let oracle = solve_riccati(prob, &grid, DEFAULT_REFINE)?;
    let dir = &r.config.out;

    let mut out = create(dir, "oracle.csv")?;
    oracle.write_csv(&mut out)?;
    out.flush()?;
    if r.oracle_only {
        let summary = RunSummary::default();
        write_manifest(r, &["oracle.csv"], summary)?;
        return Ok(summary);
    }

    let method = r.methods[0];
    let cfg = r.policy_config(r.samples, grid.clone(), trial_seed(r.config.seed, 0));
    let result = run_trial(prob, method, &cfg, &oracle, 0, true)?;
    let mut summary = RunSummary::default();
    summary.add(std::slice::from_ref(&result));

    let mut files = vec![
        "oracle.csv",
        "solve_history.csv",
        "solve_g.csv",
        "solve_gain.csv",
    ];
    let mut out = create(dir, "solve_history.csv")?;
    match &result.history {
        Some(h) => h.write_csv(&mut out)?,
        None => writeln!(out, "iter,cost,mse,unstable_flag")?,
    }
    out.flush()?;

    let matrices = result
        .history
        .as_ref()
        .and_then(|h| h.final_solution.as_ref())
        .map(|s| s.matrices());
    let mut out = create(dir, "solve_g.csv")?;
    let mut gains_out = create(dir, "solve_gain.csv")?;
    match matrices {
        Some(ms) => {
            write_g_comparison(&mut out, None, &ms, &grid, &oracle, true)?;
            let gains = gains_from_matrices(prob, &ms);
            let exact = gains_from_matrices(prob, oracle.matrices());
            let (m, n) = gains[0].shape();
            writeln!(
                gains_out,
                "k,t,{},{}",
                matrix_header("K", m, n),
                matrix_header("Kstar", m, n)
            )?;
            for (k, t) in grid.times().enumerate() {
                writeln!(
                    gains_out,
                    "{k},{t:e},{},{}",
                    matrix_cells(&gains[k]),
                    matrix_cells(&exact[k])
                )?;
            }
        }
        None => {
            writeln!(out, "k,t")?;
            writeln!(gains_out, "k,t")?;
        }
    }
    out.flush()?;
    gains_out.flush()?;
    files.push("manifest.json");
    files.pop();
    write_manifest(r, &files, summary)?;
    Ok(summary)
}
