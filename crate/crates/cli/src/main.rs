//! `sngd`: generate problems, run solvers, compute spectral reports and run experiments.
//!
//! Exit codes: 0 on success, 1 on a usage or validation error, 2 when `--check`
//! is set and a gate fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use sngd_core::experiments::{run_experiment, ExperimentOutput, ExperimentSpec, Gate, ProblemSource};
use sngd_core::kernels::{ExpectationMode, SamplerSpec};
use sngd_core::problems::{self, GeneratorSpec, Problem, ProblemType};
use sngd_core::solvers::{verify_equivalences, Solver, SolverConfig};
use sngd_core::spectral::{compute_report, m_spectrum, rate_predictors};

#[derive(Parser, Debug)]
#[command(name = "sngd", version, about = "Sketched natural-gradient solvers and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Exit with status 2 when any gate fails.
    #[arg(long, global = true)]
    check: bool,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Expectation mode for spectra and experiments.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Monte Carlo draws when `--mode mc`.
    #[arg(long, global = true, default_value_t = 10_000)]
    mc_samples: usize,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate a problem and write problem.json.
    Generate,
    /// Run one solver and write trace.csv, trace.json and summary.json.
    Solve,
    /// Compute alpha, beta, gamma and the step-matrix spectrum.
    Spectra,
    /// Check the SNGD/Kaczmarz and SPRING/ARK identities on coupled streams.
    Equivalence,
    /// Run a named experiment.
    Experiment,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Solve => "solve",
            Command::Spectra => "spectra",
            Command::Equivalence => "equivalence",
            Command::Experiment => "experiment",
        }
    }

    fn schema_hint(self) -> &'static str {
        match self {
            Command::Generate => {
                r#"{"generator": {"kind": "svd_conditioned", "m": 100, "n": 10, "kappa_j": 10, "kappa_h": 10, "seed": 1}, "problem_type": "llq"}"#
            }
            Command::Solve => {
                r#"{"problem": {"generator": {"kind": "gaussian_rows", "m": 100, "n": 20, "seed": 1}, "problem_type": "lls"}, "solver": {"algorithm": "sngd", "eta": 1.0, "k": 5, "T": 200, "seed": 1}}"#
            }
            Command::Spectra => {
                r#"{"problem": {"path": "problem.json"}, "lambda": 0.1, "sampler": {"kind": "k_dpp", "k": 2}, "mode": {"kind": "exact_enumeration"}}"#
            }
            Command::Equivalence => {
                r#"{"problem": {"generator": {"kind": "gaussian_rows", "m": 100, "n": 20}}, "solver": {"algorithm": "spring", "eta": 0.95, "mu": 0.9, "lambda": 0.1, "k": 5, "T": 200, "seed": 1}}"#
            }
            Command::Experiment => {
                r#"{"name": "fig_eigs" | "fig_lambs" | "fig_cond" | "fig_compare" | "equivalence_suite" | "operator_suite", ...experiment fields}"#
            }
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Exact,
    Mc,
}

#[derive(Debug, Serialize, Deserialize)]
struct GenerateConfig {
    generator: GeneratorSpec,
    #[serde(default)]
    problem_type: ProblemType,
}

#[derive(Debug, Serialize, Deserialize)]
struct SolveConfig {
    problem: ProblemSource,
    solver: SolverConfig,
}

fn default_mode() -> ExpectationMode {
    ExpectationMode::exact()
}

#[derive(Debug, Serialize, Deserialize)]
struct SpectraConfig {
    problem: ProblemSource,
    #[serde(default)]
    lambda: f64,
    sampler: SamplerSpec,
    #[serde(default = "default_mode")]
    mode: ExpectationMode,
}

fn default_sngd_rk_tol() -> f64 {
    1e-10
}

fn default_ark_tol() -> f64 {
    1e-9
}

#[derive(Debug, Serialize, Deserialize)]
struct EquivalenceConfig {
    problem: ProblemSource,
    /// Supplies `eta`, `mu`, `lambda`, `k`, `T` and the seed.
    solver: SolverConfig,
    #[serde(default = "default_sngd_rk_tol")]
    sngd_rk_tol: f64,
    #[serde(default = "default_ark_tol")]
    ark_tol: f64,
}

/// Result of a subcommand before anything is written.
struct Artifacts {
    files: Vec<(String, String)>,
    gates: Vec<Gate>,
    config: Value,
}

impl Artifacts {
    fn new(config: &impl Serialize) -> anyhow::Result<Self> {
        Ok(Self { files: Vec::new(), gates: Vec::new(), config: serde_json::to_value(config)? })
    }

    fn json(&mut self, file: &str, v: &impl Serialize) -> anyhow::Result<()> {
        self.files.push((file.into(), serde_json::to_string_pretty(v)?));
        Ok(())
    }
}

fn read_config<T: for<'de> Deserialize<'de>>(cli: &Cli) -> anyhow::Result<(T, Vec<u8>, PathBuf)> {
    let path = cli.config.as_ref().ok_or_else(|| anyhow!("--config is required"))?;
    let bytes = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg = serde_json::from_slice(&bytes).with_context(|| {
        format!("config {} does not match the {} schema, e.g.\n  {}", path.display(), cli.command.name(), cli.command.schema_hint())
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, bytes, base))
}

fn mode_override(cli: &Cli) -> Option<ExpectationMode> {
    cli.mode.map(|m| match m {
        Mode::Exact => ExpectationMode::exact(),
        Mode::Mc => ExpectationMode::monte_carlo(cli.mc_samples, cli.seed.unwrap_or(0)),
    })
}

fn reject_mode(cli: &Cli) -> anyhow::Result<()> {
    if cli.mode.is_some() {
        bail!("--mode applies only to spectra and experiment");
    }
    Ok(())
}

fn generate(cli: &Cli) -> anyhow::Result<(Artifacts, Vec<u8>)> {
    reject_mode(cli)?;
    let (mut cfg, bytes, _) = read_config::<GenerateConfig>(cli)?;
    if let Some(s) = cli.seed {
        cfg.generator.seed = s;
    }
    let problem = problems::generate(&cfg.generator, cfg.problem_type)?;
    let mut a = Artifacts::new(&cfg)?;
    a.json("problem.json", &problem)?;
    Ok((a, bytes))
}

fn solve(cli: &Cli) -> anyhow::Result<(Artifacts, Vec<u8>)> {
    reject_mode(cli)?;
    let (mut cfg, bytes, base) = read_config::<SolveConfig>(cli)?;
    if let Some(s) = cli.seed {
        cfg.solver.seed = s;
    }
    let problem = cfg.problem.load(&base)?;
    let trace = Solver::new(&problem, cfg.solver.clone())?.run();
    let summary = json!({
        "algorithm": cfg.solver.algorithm.name(),
        "iterations": trace.records.len().saturating_sub(1),
        "initial_err": trace.initial_err(),
        "final_err": trace.final_err(),
        "final_rel_err": trace.final_err() / trace.initial_err(),
        "time_to_1e-6": trace.time_to(1e-6),
        "diverged": trace.diverged,
        "error": trace.error,
    });
    let mut a = Artifacts::new(&cfg)?;
    a.files.push(("trace.csv".into(), trace.to_csv()));
    a.json("trace.json", &trace)?;
    a.json("summary.json", &summary)?;
    a.gates.push(Gate::flag("run completed without divergence", !trace.diverged && trace.error.is_none()));
    Ok((a, bytes))
}

fn spectra(cli: &Cli) -> anyhow::Result<(Artifacts, Vec<u8>)> {
    let (mut cfg, bytes, base) = read_config::<SpectraConfig>(cli)?;
    if let Some(m) = mode_override(cli) {
        cfg.mode = m;
    } else if let (Some(s), ExpectationMode::MonteCarlo { mc_samples, .. }) = (cli.seed, cfg.mode) {
        cfg.mode = ExpectationMode::monte_carlo(mc_samples, s);
    }
    let problem = cfg.problem.load(&base)?;
    let report = compute_report(&problem, cfg.lambda, cfg.sampler, &cfg.mode)?;
    let invariants = report.invariants();
    let spectrum = match &problem {
        Problem::Llq(p) => Some(m_spectrum(p, cfg.lambda, cfg.sampler, &cfg.mode)?),
        Problem::Lls(_) => None,
    };
    let out = json!({
        "alpha": report.alpha,
        "beta": report.beta,
        "gamma": report.gamma,
        "invariants": invariants,
        "predictions": rate_predictors(&report),
        "report": report,
        "m_spectrum": spectrum,
    });
    let mut a = Artifacts::new(&cfg)?;
    a.json("spectral_report.json", &out)?;
    a.gates.push(Gate::flag("spectral invariants hold", invariants.all));
    Ok((a, bytes))
}

fn equivalence(cli: &Cli) -> anyhow::Result<(Artifacts, Vec<u8>)> {
    reject_mode(cli)?;
    let (mut cfg, bytes, base) = read_config::<EquivalenceConfig>(cli)?;
    if let Some(s) = cli.seed {
        cfg.solver.seed = s;
    }
    let problem = cfg.problem.load(&base)?;
    let r = verify_equivalences(&problem, &cfg.solver, cfg.solver.iterations)?;
    let mut a = Artifacts::new(&cfg)?;
    a.gates = vec![
        Gate::at_most("SNGD(eta=1) vs regularized Kaczmarz", r.sngd_rk, cfg.sngd_rk_tol),
        Gate::at_most("SPRING vs ARK momentum map", r.ark_phi, cfg.ark_tol),
        Gate::at_most("SPRING vs ARK iterate map", r.ark_theta, cfg.ark_tol),
        Gate::flag("coupled sample streams identical", r.samples_identical),
    ];
    let mut csv = String::from("t,sngd_rk,ark_phi,ark_theta\n");
    for s in &r.steps {
        use sngd_core::solvers::fmt_f64;
        csv += &format!("{},{},{},{}\n", s.t, fmt_f64(s.sngd_rk), fmt_f64(s.ark_phi), fmt_f64(s.ark_theta));
    }
    a.files.push(("equivalence.csv".into(), csv));
    a.json("equivalence.json", &r)?;
    Ok((a, bytes))
}

fn experiment(cli: &Cli) -> anyhow::Result<(Artifacts, Vec<u8>)> {
    let (mut spec, bytes, _) = read_config::<ExperimentSpec>(cli)?;
    if let Some(s) = cli.seed {
        spec.set_seed(s);
    }
    if let Some(m) = mode_override(cli) {
        spec.set_mode(m)?;
    }
    let out: ExperimentOutput = run_experiment(&spec)?;
    let mut a = Artifacts::new(&spec)?;
    a.files = out.tables.iter().map(|t| (t.file.clone(), t.csv.clone())).collect();
    a.files.push(("summary.json".into(), out.summary_json()?));
    a.gates = out.gates;
    Ok((a, bytes))
}

/// Run the subcommand, write artifacts and the manifest, and return whether gates passed.
fn run(cli: &Cli) -> anyhow::Result<bool> {
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global()?;
    }
    let (artifacts, config_bytes) = match cli.command {
        Command::Generate => generate(cli)?,
        Command::Solve => solve(cli)?,
        Command::Spectra => spectra(cli)?,
        Command::Equivalence => equivalence(cli)?,
        Command::Experiment => experiment(cli)?,
    };
    let passed = artifacts.gates.iter().all(|g| g.passed);
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    for (file, body) in &artifacts.files {
        let p = cli.out.join(file);
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    }
    let status = match (cli.check, passed) {
        (false, _) => "unchecked",
        (true, true) => "passed",
        (true, false) => "gates_failed",
    };
    let mut outputs: Vec<&str> = artifacts.files.iter().map(|f| f.0.as_str()).collect();
    outputs.sort_unstable();
    let manifest = json!({
        "tool": "sngd",
        "version": env!("CARGO_PKG_VERSION"),
        "core_version": sngd_core::VERSION,
        "command": cli.command.name(),
        "config_sha256": hex::encode(Sha256::digest(&config_bytes)),
        "effective_config": artifacts.config,
        "seed_override": cli.seed,
        "mode_override": mode_override(cli),
        "status": status,
        "gates": artifacts.gates,
        "outputs": outputs,
    });
    std::fs::write(cli.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for g in &artifacts.gates {
        println!("{} {} (value {:e}, threshold {:e}){}", if g.passed { "PASS" } else { "FAIL" }, g.name, g.value, g.threshold,
            if g.detail.is_empty() { String::new() } else { format!(" [{}]", g.detail) });
    }
    Ok(passed)
}

fn main() -> ExitCode {
    // clap would exit with 2 on usage errors; 2 is reserved for gate failures.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(passed) if passed || !cli.check => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
