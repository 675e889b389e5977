//! Tuned SGD / SNGD / SPRING comparisons on conditioned least-quadratics instances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{csv_table, default_eta_grid, default_mu_grid, fmt_opt, median, tune, ExperimentOutput, Gate, GridPoint, Table};
use crate::error::Result;
use crate::linalg::Vector;
use crate::problems::{gen_conditioned_llq, GeneratorKind, GeneratorSpec, Problem};
use crate::rng::derive_seed;
use crate::solvers::{fmt_f64, Algorithm, Solver, SolverConfig, Trace, WeightedSgd};

/// How the SGD step-size grid relates to the shared grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SgdEtaScale {
    /// Shared grid divided by the mean row Lipschitz constant.
    #[default]
    InverseMeanLipschitz,
    Raw,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ComparisonSettings {
    pub iterations: usize,
    pub tune_iterations: usize,
    pub eta_grid: Vec<f64>,
    pub mu_grid: Vec<f64>,
    /// Add `mu = 0` to the SPRING grid so that it contains SNGD.
    pub spring_includes_zero_momentum: bool,
    pub lambda: f64,
    pub solver_seed: u64,
    pub solver_seeds: usize,
    /// Relative `err_sq` target for time-to-tolerance.
    pub tolerance: f64,
    /// Continue past `iterations` up to this many steps when the target is not
    /// reached; `0` means measure within `iterations` only.
    pub tolerance_horizon: usize,
    pub sgd_eta_scale: SgdEtaScale,
    pub algorithms: Vec<Algorithm>,
}

impl Default for ComparisonSettings {
    fn default() -> Self {
        Self {
            iterations: 2000,
            tune_iterations: 500,
            eta_grid: default_eta_grid(),
            mu_grid: default_mu_grid(),
            spring_includes_zero_momentum: true,
            lambda: 0.0,
            solver_seed: 3,
            solver_seeds: 5,
            tolerance: 1e-6,
            tolerance_horizon: 0,
            sgd_eta_scale: SgdEtaScale::default(),
            algorithms: vec![Algorithm::Sgd, Algorithm::Sngd, Algorithm::Spring],
        }
    }
}

impl ComparisonSettings {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.solver_seeds.max(1)).map(|i| derive_seed(self.solver_seed, i as u64)).collect()
    }
}

/// Tuned configuration and seeded runs of one algorithm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlgorithmResult {
    pub algorithm: Algorithm,
    /// Tuned configuration, carrying the tuning seed.
    pub config: SolverConfig,
    pub tuning_final_rel_err: f64,
    pub grid: Vec<GridPoint>,
    pub seeds: Vec<u64>,
    /// `err_sq(T) / err_sq(0)` per seed; `+inf` for diverged runs.
    pub final_rel_err: Vec<f64>,
    pub median_final_rel_err: f64,
    pub time_to_tol: Vec<Option<usize>>,
    pub median_time_to_tol: Option<usize>,
    /// Trailing-10% median below leading-10% median on every non-diverged run.
    pub decreasing: bool,
    pub median_curve: Vec<f64>,
    #[serde(skip)]
    pub traces: Vec<Trace>,
}

fn window_medians(e: &[f64]) -> (f64, f64) {
    let w = e.len().div_ceil(10).max(1);
    (median(&e[..w]), median(&e[e.len() - w..]))
}

fn median_hit(hits: &[Option<usize>]) -> Option<usize> {
    let v: Vec<f64> = hits.iter().map(|h| h.map_or(f64::INFINITY, |t| t as f64)).collect();
    let m = median(&v);
    m.is_finite().then(|| m.ceil() as usize)
}

/// Tune each algorithm on `problem` at batch size `k`, then run every seed.
pub fn compare_algorithms(problem: &Problem, k: usize, s: &ComparisonSettings) -> Result<Vec<AlgorithmResult>> {
    let seeds = s.seeds();
    let e0 = problem.theta_star().norm_squared();
    let lbar = WeightedSgd::new(problem)?.mean_lipschitz();
    s.algorithms
        .iter()
        .map(|&alg| {
            let base = SolverConfig::new(alg, 1.0, k, s.iterations, seeds[0]).with_lambda(s.lambda);
            let etas: Vec<f64> = match (alg, s.sgd_eta_scale) {
                (Algorithm::Sgd, SgdEtaScale::InverseMeanLipschitz) => s.eta_grid.iter().map(|e| e / lbar).collect(),
                _ => s.eta_grid.clone(),
            };
            let mut mus = s.mu_grid.clone();
            if s.spring_includes_zero_momentum && !mus.contains(&0.0) {
                mus.insert(0, 0.0);
            }
            let tuned = tune(problem, &base, &etas, &mus, s.tune_iterations)?;
            let runs = seeds
                .par_iter()
                .map(|&seed| -> Result<(Trace, Option<usize>)> {
                    let mut c = tuned.config.clone();
                    c.seed = seed;
                    c.iterations = s.iterations;
                    let solver = Solver::new(problem, c)?;
                    let trace = solver.run();
                    let mut hit = trace.time_to(s.tolerance);
                    if hit.is_none() && !trace.diverged && s.tolerance_horizon > s.iterations {
                        hit = solver.first_hit(Vector::zeros(problem.n()), s.tolerance, s.tolerance_horizon)?.t;
                    }
                    Ok((trace, hit))
                })
                .collect::<Result<Vec<_>>>()?;
            let (traces, hits): (Vec<Trace>, Vec<Option<usize>>) = runs.into_iter().unzip();
            let finals: Vec<f64> = traces
                .iter()
                .map(|t| if t.diverged || t.error.is_some() { f64::INFINITY } else { t.final_err() / t.initial_err() })
                .collect();
            let decreasing = traces.iter().filter(|t| !t.diverged && t.error.is_none()).all(|t| {
                let (lead, trail) = window_medians(&t.err_series());
                trail < lead
            });
            let curve = (0..=s.iterations)
                .map(|i| {
                    let v: Vec<f64> = traces
                        .iter()
                        .map(|t| t.records.get(i).map_or(f64::INFINITY, |r| r.err_sq / t.initial_err()))
                        .collect();
                    median(&v)
                })
                .collect();
            Ok(AlgorithmResult {
                algorithm: alg,
                config: tuned.config,
                tuning_final_rel_err: tuned.final_err / e0,
                grid: tuned.grid,
                seeds: seeds.clone(),
                median_final_rel_err: median(&finals),
                final_rel_err: finals,
                median_time_to_tol: median_hit(&hits),
                time_to_tol: hits,
                decreasing,
                median_curve: curve,
                traces,
            })
        })
        .collect()
}

fn curves_csv(results: &[AlgorithmResult]) -> String {
    let mut header = vec!["t"];
    header.extend(results.iter().map(|r| r.algorithm.name()));
    let n = results.iter().map(|r| r.median_curve.len()).max().unwrap_or(0);
    let rows = (0..n).map(|t| {
        let mut row = vec![t.to_string()];
        row.extend(results.iter().map(|r| fmt_f64(r.median_curve.get(t).copied().unwrap_or(f64::INFINITY))));
        row
    });
    csv_table(&header, rows)
}

fn result_tables(label: &str, results: &[AlgorithmResult], tables: &mut Vec<Table>) {
    tables.push(Table { file: format!("{label}_median.csv"), csv: curves_csv(results) });
    for r in results {
        for (i, t) in r.traces.iter().enumerate() {
            tables.push(Table { file: format!("{label}_{}_seed{i}.csv", r.algorithm.name()), csv: t.to_csv() });
        }
    }
}

fn summary_rows(key: &str, results: &[AlgorithmResult]) -> Vec<Vec<String>> {
    results
        .iter()
        .map(|r| {
            vec![
                key.to_string(),
                r.algorithm.name().to_string(),
                fmt_f64(r.config.eta),
                fmt_f64(r.config.mu),
                fmt_f64(r.tuning_final_rel_err),
                fmt_f64(r.median_final_rel_err),
                fmt_opt(r.median_time_to_tol),
            ]
        })
        .collect()
}

const SUMMARY_HEADER: [&str; 7] =
    ["instance", "algorithm", "eta", "mu", "tuning_final_rel_err", "median_final_rel_err", "median_time_to_tol"];

fn find(results: &[AlgorithmResult], alg: Algorithm) -> Option<&AlgorithmResult> {
    results.iter().find(|r| r.algorithm == alg)
}

fn llq_instance(m: usize, n: usize, kappa_j: f64, kappa_h: f64, seed: u64) -> Result<Problem> {
    let spec = GeneratorSpec::new(GeneratorKind::SvdConditioned, m, n, seed).with_kappas(kappa_j, kappa_h);
    Ok(gen_conditioned_llq(&spec)?.into())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CondSpec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// `(kappa_j, kappa_h)` per instance.
    pub kappa_pairs: Vec<(f64, f64)>,
    pub seed: u64,
    /// Tuned SNGD may exceed tuned SGD by at most this factor.
    pub sgd_slack: f64,
    pub settings: ComparisonSettings,
}

impl Default for CondSpec {
    fn default() -> Self {
        Self {
            m: 10_000,
            n: 100,
            k: 10,
            kappa_pairs: vec![(1000.0, 100.0), (100.0, 1000.0)],
            seed: 0,
            sgd_slack: 1.1,
            settings: ComparisonSettings::default(),
        }
    }
}

pub fn exp_fig_cond(spec: &CondSpec) -> Result<ExperimentOutput> {
    let mut tables = Vec::new();
    let mut gates = Vec::new();
    let mut rows = Vec::new();
    let mut instances = Vec::new();
    for (i, &(kj, kh)) in spec.kappa_pairs.iter().enumerate() {
        let seed = derive_seed(spec.seed, i as u64);
        let problem = llq_instance(spec.m, spec.n, kj, kh, seed)?;
        let results = compare_algorithms(&problem, spec.k, &spec.settings)?;
        let label = format!("cond_kj{kj}_kh{kh}");
        if let (Some(sgd), Some(sngd), Some(spring)) =
            (find(&results, Algorithm::Sgd), find(&results, Algorithm::Sngd), find(&results, Algorithm::Spring))
        {
            gates.push(Gate::at_most(
                format!("{label}: tuned SPRING <= tuned SNGD"),
                spring.tuning_final_rel_err,
                sngd.tuning_final_rel_err,
            ));
            gates.push(Gate::at_most(
                format!("{label}: SNGD final <= {} x SGD final", spec.sgd_slack),
                sngd.median_final_rel_err,
                spec.sgd_slack * sgd.median_final_rel_err,
            ));
        }
        let dec = results.iter().all(|r| r.decreasing);
        gates.push(Gate::flag(format!("{label}: trailing median below leading median"), dec));
        rows.extend(summary_rows(&label, &results));
        result_tables(&label, &results, &mut tables);
        instances.push(json!({ "label": label, "kappa_j": kj, "kappa_h": kh, "instance_seed": seed, "results": results }));
    }
    tables.push(Table { file: "cond_summary.csv".into(), csv: csv_table(&SUMMARY_HEADER, rows) });
    let summary = json!({ "m": spec.m, "n": spec.n, "k": spec.k, "seed": spec.seed, "settings": spec.settings, "instances": instances });
    Ok(ExperimentOutput { name: "fig_cond".into(), summary, tables, gates })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareSpec {
    pub m: usize,
    pub n: usize,
    pub kappa_j: f64,
    pub kappa_h: f64,
    pub ks: Vec<usize>,
    /// Instance seed.
    pub seed: u64,
    /// SGD and SNGD final errors at the smallest `k` may differ by at most this factor.
    pub sgd_factor: f64,
    pub settings: ComparisonSettings,
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            m: 2000,
            n: 100,
            kappa_j: 100.0,
            kappa_h: 10.0,
            ks: vec![1, 3, 10, 30],
            seed: 11,
            sgd_factor: 2.0,
            settings: ComparisonSettings {
                tune_iterations: 2000,
                solver_seeds: 1,
                tolerance_horizon: 5_000_000,
                ..ComparisonSettings::default()
            },
        }
    }
}

/// `time(SNGD) / time(SPRING)`; `None` unless both reached the target.
pub fn speedup(results: &[AlgorithmResult]) -> Option<f64> {
    let a = find(results, Algorithm::Sngd)?.median_time_to_tol?;
    let b = find(results, Algorithm::Spring)?.median_time_to_tol?;
    Some(a as f64 / b.max(1) as f64)
}

pub fn exp_fig_compare(spec: &CompareSpec) -> Result<ExperimentOutput> {
    let problem = llq_instance(spec.m, spec.n, spec.kappa_j, spec.kappa_h, spec.seed)?;
    let mut tables = Vec::new();
    let mut gates = Vec::new();
    let mut rows = Vec::new();
    let mut per_k = Vec::new();
    let mut speedups = Vec::new();
    let mut ks = spec.ks.clone();
    ks.sort_unstable();
    for &k in &ks {
        let results = compare_algorithms(&problem, k, &spec.settings)?;
        let label = format!("compare_k{k}");
        let sp = speedup(&results);
        if let (Some(sngd), Some(spring)) = (find(&results, Algorithm::Sngd), find(&results, Algorithm::Spring)) {
            let (a, b) = (sngd.median_time_to_tol, spring.median_time_to_tol);
            let passed = matches!((b, a), (Some(x), Some(y)) if x <= y) || (b.is_some() && a.is_none());
            gates.push(Gate {
                name: format!("k={k}: SPRING time-to-tol <= SNGD time-to-tol"),
                passed,
                value: b.map_or(f64::INFINITY, |t| t as f64),
                threshold: a.map_or(f64::INFINITY, |t| t as f64),
                detail: format!("tolerance {:e}, horizon {}", spec.settings.tolerance, spec.settings.tolerance_horizon),
            });
        }
        if k == ks[0] {
            if let (Some(sgd), Some(sngd)) = (find(&results, Algorithm::Sgd), find(&results, Algorithm::Sngd)) {
                let (a, b) = (sgd.median_final_rel_err, sngd.median_final_rel_err);
                let ratio = (a / b).max(b / a);
                gates.push(
                    Gate::at_most(format!("k={k}: SGD final within {}x of SNGD final", spec.sgd_factor), ratio, spec.sgd_factor)
                        .with_detail(format!("SGD {a:.4e}, SNGD {b:.4e}")),
                );
            }
        }
        speedups.push((k, sp));
        rows.extend(summary_rows(&k.to_string(), &results));
        result_tables(&label, &results, &mut tables);
        per_k.push(json!({ "k": k, "speedup": sp, "results": results }));
    }
    if let (Some(&(k0, s0)), Some(&(k1, s1))) = (speedups.first(), speedups.last()) {
        if k0 != k1 {
            gates.push(
                Gate::at_least(
                    format!("speedup at k={k0} >= speedup at k={k1}"),
                    s0.unwrap_or(f64::NAN),
                    s1.unwrap_or(f64::NAN),
                )
                .with_detail("speedup = SNGD time-to-tol / SPRING time-to-tol"),
            );
        }
    }
    tables.push(Table { file: "compare_summary.csv".into(), csv: csv_table(&SUMMARY_HEADER, rows) });
    let summary = json!({
        "m": spec.m, "n": spec.n, "kappa_j": spec.kappa_j, "kappa_h": spec.kappa_h, "seed": spec.seed,
        "settings": spec.settings, "batches": per_k,
    });
    Ok(ExperimentOutput { name: "fig_compare".into(), summary, tables, gates })
}
