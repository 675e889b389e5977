//! Figure-level experiments, hyperparameter tuning and gate evaluation.
//!
//! Every experiment is a pure function of its spec: trials and grid points run
//! on the rayon pool, but results are collected in index order and every seed is
//! derived as `seed ^ mix64(index)`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::ExpectationMode;
use crate::problems::{self, GeneratorSpec, Problem, ProblemType};
use crate::solvers::{Algorithm, Solver, SolverConfig};

mod compare;
mod eigs;
mod suites;

pub use compare::{
    compare_algorithms, exp_fig_compare, exp_fig_cond, AlgorithmResult, ComparisonSettings, CompareSpec, CondSpec,
    SgdEtaScale,
};
pub use eigs::{exp_fig_eigs, exp_fig_lambs, EigsFamily, EigsSpec, LambsSpec, TrialSpectrum, WitnessSpec};
pub use suites::{exp_equivalence_suite, exp_operator_suite, EquivalenceSpec, LemmaSpec, OperatorSpec, SizeSpec};

/// A CSV artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub file: String,
    pub csv: String,
}

/// A pass/fail check with the measured value and its threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Gate {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), passed: value <= threshold, value, threshold, detail: String::new() }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), passed: value >= threshold, value, threshold, detail: String::new() }
    }

    pub fn greater(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { name: name.into(), passed: value > threshold, value, threshold, detail: String::new() }
    }

    pub fn flag(name: impl Into<String>, passed: bool) -> Self {
        Self { name: name.into(), passed, value: passed as u8 as f64, threshold: 1.0, detail: String::new() }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

/// Everything an experiment produces.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub name: String,
    pub summary: serde_json::Value,
    pub tables: Vec<Table>,
    pub gates: Vec<Gate>,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }

    pub fn table(&self, file: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.file == file)
    }

    /// `summary.json` with the gates embedded.
    pub fn summary_json(&self) -> Result<String> {
        let v = serde_json::json!({
            "name": self.name,
            "summary": self.summary,
            "gates": self.gates,
            "passed": self.passed(),
        });
        Ok(serde_json::to_string_pretty(&v)?)
    }

    /// Write every table plus `summary.json` under `dir`; returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for t in &self.tables {
            let p = dir.join(&t.file);
            std::fs::write(&p, &t.csv)?;
            out.push(p);
        }
        let p = dir.join("summary.json");
        std::fs::write(&p, self.summary_json()?)?;
        out.push(p);
        Ok(out)
    }
}

/// Where a problem comes from in a config file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemSource {
    File {
        path: PathBuf,
    },
    Generated {
        generator: GeneratorSpec,
        #[serde(default)]
        problem_type: ProblemType,
    },
}

impl ProblemSource {
    /// Relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<Problem> {
        match self {
            ProblemSource::File { path } => {
                let p = if path.is_absolute() { path.clone() } else { base.join(path) };
                let text = std::fs::read_to_string(&p)?;
                Ok(serde_json::from_str(&text)?)
            }
            ProblemSource::Generated { generator, problem_type } => problems::generate(generator, *problem_type),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        if let ProblemSource::Generated { generator, .. } = self {
            generator.seed = seed;
        }
    }
}

/// All experiment kinds, tagged by `name`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ExperimentSpec {
    FigEigs(EigsSpec),
    FigLambs(LambsSpec),
    FigCond(CondSpec),
    FigCompare(CompareSpec),
    EquivalenceSuite(EquivalenceSpec),
    OperatorSuite(OperatorSpec),
}

impl ExperimentSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentSpec::FigEigs(_) => "fig_eigs",
            ExperimentSpec::FigLambs(_) => "fig_lambs",
            ExperimentSpec::FigCond(_) => "fig_cond",
            ExperimentSpec::FigCompare(_) => "fig_compare",
            ExperimentSpec::EquivalenceSuite(_) => "equivalence_suite",
            ExperimentSpec::OperatorSuite(_) => "operator_suite",
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentSpec::FigEigs(s) => s.seed,
            ExperimentSpec::FigLambs(s) => s.seed,
            ExperimentSpec::FigCond(s) => s.seed,
            ExperimentSpec::FigCompare(s) => s.seed,
            ExperimentSpec::EquivalenceSuite(s) => s.seed,
            ExperimentSpec::OperatorSuite(s) => s.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ExperimentSpec::FigEigs(s) => s.seed = seed,
            ExperimentSpec::FigLambs(s) => s.seed = seed,
            ExperimentSpec::FigCond(s) => s.seed = seed,
            ExperimentSpec::FigCompare(s) => s.seed = seed,
            ExperimentSpec::EquivalenceSuite(s) => s.seed = seed,
            ExperimentSpec::OperatorSuite(s) => s.seed = seed,
        }
    }

    /// Expectation mode for the experiments that take one.
    pub fn set_mode(&mut self, mode: ExpectationMode) -> Result<()> {
        match self {
            ExperimentSpec::FigEigs(s) => s.mode = mode,
            ExperimentSpec::FigLambs(s) => s.mode = mode,
            other => {
                return Err(Error::InvalidSpec(format!("{} does not take an expectation mode", other.name())));
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> Option<ExpectationMode> {
        match self {
            ExperimentSpec::FigEigs(s) => Some(s.mode),
            ExperimentSpec::FigLambs(s) => Some(s.mode),
            _ => None,
        }
    }
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput> {
    match spec {
        ExperimentSpec::FigEigs(s) => exp_fig_eigs(s),
        ExperimentSpec::FigLambs(s) => exp_fig_lambs(s),
        ExperimentSpec::FigCond(s) => exp_fig_cond(s),
        ExperimentSpec::FigCompare(s) => exp_fig_compare(s),
        ExperimentSpec::EquivalenceSuite(s) => exp_equivalence_suite(s),
        ExperimentSpec::OperatorSuite(s) => exp_operator_suite(s),
    }
}

/// `n` points log-spaced from `lo` to `hi` inclusive.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}

/// Step sizes `1e-4 ... 1`, 13 points.
pub fn default_eta_grid() -> Vec<f64> {
    logspace(1e-4, 1.0, 13)
}

pub fn default_mu_grid() -> Vec<f64> {
    vec![0.5, 0.8, 0.9, 0.95, 0.99]
}

/// One evaluated grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub eta: f64,
    pub mu: f64,
    pub final_err: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tuned {
    pub config: SolverConfig,
    pub final_err: f64,
    pub grid: Vec<GridPoint>,
}

/// Grid search minimizing the final `err_sq` after `budget` iterations among runs
/// that neither diverged nor failed; ties go to smaller `eta`, then smaller `mu`.
///
/// `base` supplies everything but `eta`, `mu` and `iterations`. Momentum values are
/// used only for SPRING.
pub fn tune(problem: &Problem, base: &SolverConfig, etas: &[f64], mus: &[f64], budget: usize) -> Result<Tuned> {
    if etas.is_empty() {
        return Err(Error::InvalidSpec("empty step-size grid".into()));
    }
    let mut etas = etas.to_vec();
    etas.sort_by(f64::total_cmp);
    let mut mus = if base.algorithm == Algorithm::Spring && !mus.is_empty() { mus.to_vec() } else { vec![base.mu] };
    mus.sort_by(f64::total_cmp);
    let points: Vec<(f64, f64)> = etas.iter().flat_map(|&e| mus.iter().map(move |&m| (e, m))).collect();
    let grid = points
        .par_iter()
        .map(|&(eta, mu)| -> Result<GridPoint> {
            let mut c = base.clone();
            c.eta = eta;
            c.mu = mu;
            c.iterations = budget;
            let trace = Solver::new(problem, c)?.run();
            let final_err = trace.final_err();
            let bad = trace.diverged || trace.error.is_some() || !final_err.is_finite();
            Ok(GridPoint { eta, mu, final_err, diverged: bad })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<&GridPoint> = None;
    for g in grid.iter().filter(|g| !g.diverged) {
        if best.is_none_or(|b| g.final_err < b.final_err) {
            best = Some(g);
        }
    }
    let b = best.ok_or(Error::AllDiverged)?;
    let mut config = base.clone();
    config.eta = b.eta;
    config.mu = b.mu;
    Ok(Tuned { config, final_err: b.final_err, grid: grid.clone() })
}

/// Render rows as CSV with a header.
pub(crate) fn csv_table<I>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Median with `+inf` allowed; even counts average the middle pair.
pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a.is_infinite() || b.is_infinite() { b } else { 0.5 * (a + b) }
    }
}

pub(crate) fn fmt_opt(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}
