//! Equivalence and exact-operator verification suites.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{csv_table, ExperimentOutput, Gate, Table};
use crate::error::Result;
use crate::kernels::{gaussian_sketch_projector, ExpectationMode, SamplerSpec};
use crate::linalg::{self, fro, spectral_norm, Matrix, EIG_FLOOR};
use crate::problems::{
    gen_conditioned_llq, gen_diag_sketch, gen_gaussian_lls, GeneratorKind, GeneratorSpec, Problem,
};
use crate::rng::{derive_seed, seeded};
use crate::solvers::{fmt_f64, verify_equivalences, Algorithm, NgdOperator, SolverConfig, SolverState};
use crate::spectral::{compute_report, expected_projector, one_step_operator};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EquivalenceSpec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub iterations: usize,
    pub eta: f64,
    pub mu: f64,
    pub seed: u64,
    pub solver_seed: u64,
    pub sngd_rk_tol: f64,
    pub ark_tol: f64,
}

impl Default for EquivalenceSpec {
    fn default() -> Self {
        Self {
            m: 100,
            n: 20,
            k: 5,
            lambda: 0.1,
            iterations: 200,
            eta: 0.95,
            mu: 0.9,
            seed: 0,
            solver_seed: 1,
            sngd_rk_tol: 1e-10,
            ark_tol: 1e-9,
        }
    }
}

pub fn exp_equivalence_suite(spec: &EquivalenceSpec) -> Result<ExperimentOutput> {
    let g = GeneratorSpec::new(GeneratorKind::GaussianRows, spec.m, spec.n, spec.seed);
    let problem: Problem = gen_gaussian_lls(&g)?.into();
    let config = SolverConfig::new(Algorithm::Spring, spec.eta, spec.k, spec.iterations, spec.solver_seed)
        .with_lambda(spec.lambda)
        .with_mu(spec.mu);
    let r = verify_equivalences(&problem, &config, spec.iterations)?;
    let rows = r.steps.iter().map(|s| vec![s.t.to_string(), fmt_f64(s.sngd_rk), fmt_f64(s.ark_phi), fmt_f64(s.ark_theta)]);
    let table = Table { file: "equivalence.csv".into(), csv: csv_table(&["t", "sngd_rk", "ark_phi", "ark_theta"], rows) };
    let gates = vec![
        Gate::at_most("SNGD(eta=1) vs regularized Kaczmarz", r.sngd_rk, spec.sngd_rk_tol),
        Gate::at_most("SPRING vs ARK momentum map", r.ark_phi, spec.ark_tol),
        Gate::at_most("SPRING vs ARK iterate map", r.ark_theta, spec.ark_tol),
        Gate::flag("coupled sample streams identical", r.samples_identical),
    ];
    let summary = json!({
        "m": spec.m, "n": spec.n, "k": spec.k, "lambda": spec.lambda, "seed": spec.seed,
        "solver_seed": spec.solver_seed, "iterations": r.iterations, "eta": r.eta, "mu": r.mu,
        "eta_tilde": r.eta_tilde, "sngd_rk": r.sngd_rk, "ark_phi": r.ark_phi, "ark_theta": r.ark_theta,
        "sngd_rk_error_scaled": r.sngd_rk_error_scaled, "ark_phi_error_scaled": r.ark_phi_error_scaled,
        "ark_theta_error_scaled": r.ark_theta_error_scaled, "max_scale_growth": r.max_scale_growth,
    });
    Ok(ExperimentOutput { name: "equivalence_suite".into(), summary, tables: vec![table], gates })
}

/// One enumerable instance size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSpec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    #[serde(default)]
    pub lambda: f64,
}

impl SizeSpec {
    pub fn new(m: usize, n: usize, k: usize, lambda: f64) -> Self {
        Self { m, n, k, lambda }
    }
}

/// Mean of a Gaussian sketch of `diag(r^(n-1), ..., r, 1)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LemmaSpec {
    pub ratio: f64,
    pub n: usize,
    pub k: usize,
    pub mc_samples: usize,
    pub sigmas: f64,
}

impl Default for LemmaSpec {
    fn default() -> Self {
        Self { ratio: 2.0, n: 3, k: 1, mc_samples: 100_000, sigmas: 4.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OperatorSpec {
    pub seed: u64,
    pub lls_contraction: Vec<SizeSpec>,
    pub beta_instances: usize,
    pub gamma_instances: usize,
    /// Least-quadratics instances for the k-DPP contraction check (`m <= 10`, `k <= 3`).
    pub dpp_contraction: Vec<SizeSpec>,
    pub dpp_kappa: f64,
    pub ngd_instances: usize,
    pub ngd_steps: usize,
    pub large_lambda: Vec<SizeSpec>,
    pub large_lambda_factor: f64,
    pub lemma: LemmaSpec,
}

impl Default for OperatorSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            lls_contraction: vec![
                SizeSpec::new(8, 3, 2, 0.0),
                SizeSpec::new(10, 4, 3, 0.0),
                SizeSpec::new(8, 3, 2, 0.1),
                SizeSpec::new(10, 4, 3, 0.1),
            ],
            beta_instances: 50,
            gamma_instances: 50,
            dpp_contraction: vec![
                SizeSpec::new(6, 3, 2, 0.0),
                SizeSpec::new(7, 2, 1, 0.0),
                SizeSpec::new(8, 3, 2, 0.1),
                SizeSpec::new(9, 3, 3, 0.2),
                SizeSpec::new(10, 4, 3, 0.05),
            ],
            dpp_kappa: 5.0,
            ngd_instances: 20,
            ngd_steps: 50,
            large_lambda: vec![SizeSpec::new(6, 3, 2, 0.0), SizeSpec::new(8, 4, 3, 0.0)],
            large_lambda_factor: 1e6,
            lemma: LemmaSpec::default(),
        }
    }
}

/// One row of `operator_suite.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckRow {
    pub check: &'static str,
    pub instance: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl CheckRow {
    fn upper(check: &'static str, instance: usize, s: &SizeSpec, value: f64, bound: f64) -> Self {
        Self { check, instance, m: s.m, n: s.n, k: s.k, lambda: s.lambda, value, bound, passed: value <= bound }
    }

    fn lower(check: &'static str, instance: usize, s: &SizeSpec, value: f64, bound: f64) -> Self {
        Self { passed: value >= bound, ..Self::upper(check, instance, s, value, bound) }
    }
}

const LAMBDAS: [f64; 4] = [0.0, 0.01, 0.1, 1.0];

fn random_size(seed: u64) -> (SizeSpec, f64, u64) {
    let mut r = seeded(seed);
    let m = r.random_range(4..=10);
    let n = r.random_range(2..=4.min(m - 1));
    let k = r.random_range(1..=3.min(m - 1));
    let lambda = LAMBDAS[r.random_range(0..LAMBDAS.len())];
    let shape = r.random_range(0.0..2.0);
    (SizeSpec::new(m, n, k, lambda), shape, r.random())
}

fn lls_at(s: &SizeSpec, decay: f64, seed: u64) -> Result<Problem> {
    let g = GeneratorSpec::new(GeneratorKind::GaussianRows, s.m, s.n, seed).with_decay(decay);
    Ok(gen_gaussian_lls(&g)?.into())
}

fn llq_at(s: &SizeSpec, kappa_j: f64, kappa_h: f64, seed: u64) -> Result<Problem> {
    let g = GeneratorSpec::new(GeneratorKind::SvdConditioned, s.m, s.n, seed).with_kappas(kappa_j, kappa_h);
    Ok(gen_conditioned_llq(&g)?.into())
}

fn lls_contraction(spec: &OperatorSpec) -> Result<Vec<CheckRow>> {
    let exact = ExpectationMode::exact();
    spec.lls_contraction
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let p = lls_at(s, 0.5, derive_seed(spec.seed, 100 + i as u64))?;
            let sampler = SamplerSpec::uniform(s.k);
            let alpha = linalg::sym_extremes(&expected_projector(&p, s.lambda, sampler, &exact)?.mean).0;
            let op = one_step_operator(&p, 1.0, s.lambda, sampler, &exact)?;
            Ok(CheckRow::upper("lls_contraction", i, s, op.factor, 1.0 - alpha + 1e-10))
        })
        .collect()
}

fn beta_bounds(spec: &OperatorSpec) -> Result<Vec<CheckRow>> {
    let exact = ExpectationMode::exact();
    (0..spec.beta_instances)
        .into_par_iter()
        .map(|i| {
            let (s, decay, seed) = random_size(derive_seed(spec.seed, 1000 + i as u64));
            let p = lls_at(&s, decay, seed)?;
            let r = compute_report(&p, s.lambda, SamplerSpec::uniform(s.k), &exact)?;
            Ok([
                CheckRow::lower("beta_lower", i, &s, r.beta, 1.0 - 1e-8),
                CheckRow::upper("beta_upper", i, &s, r.beta, 1.0 / r.alpha + 1e-8),
            ])
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

fn gamma_bound(spec: &OperatorSpec) -> Result<Vec<CheckRow>> {
    let exact = ExpectationMode::exact();
    (0..spec.gamma_instances)
        .into_par_iter()
        .map(|i| {
            let (s, shape, seed) = random_size(derive_seed(spec.seed, 2000 + i as u64));
            let (kj, kh) = (10f64.powf(shape * 0.75), 10f64.powf(1.5 - shape * 0.75));
            let p = llq_at(&s, kj, kh, seed)?;
            let r = compute_report(&p, s.lambda, SamplerSpec::uniform(s.k), &exact)?;
            Ok(CheckRow::lower("gamma_lower", i, &s, r.gamma, 1.0 / r.kappa_qbar - 1e-8))
        })
        .collect()
}

/// Exact least-quadratics contraction under k-DPP sampling, plus the diagnostics
/// that go with it: the commutator (gated) and the same factor under uniform
/// sampling (reported only).
fn dpp_contraction(spec: &OperatorSpec) -> Result<Vec<CheckRow>> {
    let exact = ExpectationMode::exact();
    spec.dpp_contraction
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let p = llq_at(s, spec.dpp_kappa, spec.dpp_kappa, derive_seed(spec.seed, 3000 + i as u64))?;
            let dpp = SamplerSpec::k_dpp(s.k, s.lambda);
            let r = compute_report(&p, s.lambda, dpp, &exact)?;
            let eta = r.gamma / r.htilde_max;
            let bound = 1.0 - r.alpha * r.gamma / r.htilde_kappa;
            let op = one_step_operator(&p, eta, s.lambda, dpp, &exact)?;
            let ur = compute_report(&p, s.lambda, SamplerSpec::uniform(s.k), &exact)?;
            let ueta = ur.gamma / ur.htilde_max;
            let uop = one_step_operator(&p, ueta, s.lambda, SamplerSpec::uniform(s.k), &exact)?;
            let ubound = 1.0 - ur.alpha * ur.gamma / ur.htilde_kappa;
            let mut slack = CheckRow::upper("uniform_contraction_slack", i, s, uop.factor - ubound, 0.0);
            slack.passed = true;
            Ok([
                CheckRow::upper("dpp_llq_contraction", i, s, op.factor, bound + 1e-8),
                CheckRow::upper("dpp_commutator", i, s, r.commutator, 1e-8),
                slack,
            ])
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

fn ngd_rate(spec: &OperatorSpec) -> Result<Vec<CheckRow>> {
    (0..spec.ngd_instances)
        .into_par_iter()
        .map(|i| {
            let mut r = seeded(derive_seed(spec.seed, 4000 + i as u64));
            let m = r.random_range(10..=40);
            let n = r.random_range(2..=6);
            let kj = 10f64.powf(r.random_range(0.0..2.0));
            let kh = 5.0 * 10f64.powf(r.random_range(0.0..1.0));
            let s = SizeSpec::new(m, n, m, 0.0);
            let p = llq_at(&s, kj, kh, r.random())?;
            let gis = linalg::sym_power(p.gram(), -0.5, EIG_FLOOR).matrix;
            let mut ht = &gis * p.jhj() * &gis;
            linalg::symmetrize(&mut ht);
            let (lo, hi) = linalg::sym_extremes(&ht);
            let eta = 1.0 / hi;
            let op = NgdOperator::new(&p, 0.0)?;
            let j = p.jacobian();
            let mut state = SolverState::new(crate::linalg::Vector::zeros(n));
            let mut prev = (j * (&state.theta - p.theta_star())).norm();
            let mut worst = 0f64;
            for _ in 0..spec.ngd_steps {
                state = op.step(&p, &state, eta);
                let cur = (j * (&state.theta - p.theta_star())).norm();
                worst = worst.max(cur / prev);
                prev = cur;
            }
            Ok(CheckRow::upper("ngd_rate", i, &s, worst, 1.0 - lo / hi + 1e-10))
        })
        .collect()
}

fn large_lambda(spec: &OperatorSpec) -> Result<Vec<CheckRow>> {
    let exact = ExpectationMode::exact();
    spec.large_lambda
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let p = lls_at(s, 0.5, derive_seed(spec.seed, 5000 + i as u64))?;
            let j = p.jacobian();
            let lambda = spec.large_lambda_factor * spectral_norm(j).powi(2);
            let pbar = expected_projector(&p, lambda, SamplerSpec::uniform(s.k), &exact)?.mean;
            let g = p.gram();
            let dev = fro(&(pbar * lambda - g * (s.k as f64 / s.m as f64)));
            let s = SizeSpec { lambda, ..s.clone() };
            Ok(CheckRow::upper("large_lambda_limit", i, &s, dev, 1e-4 * fro(g)))
        })
        .collect()
}

fn lemma_rows(spec: &OperatorSpec) -> Result<(Vec<CheckRow>, Matrix, Matrix)> {
    let l = &spec.lemma;
    let g = GeneratorSpec::new(GeneratorKind::DiagForSketch, l.n, l.n, spec.seed).with_ratio(l.ratio);
    let d = gen_diag_sketch(&g)?;
    let e = gaussian_sketch_projector(&d, l.k, l.mc_samples, derive_seed(spec.seed, 6000))?;
    let se = e.stderr.clone().expect("Monte Carlo carries a standard error");
    let s = SizeSpec::new(l.n, l.n, l.k, 0.0);
    let mut rows = Vec::new();
    let mut idx = 0;
    for a in 0..l.n {
        for b in 0..l.n {
            if a != b {
                rows.push(CheckRow::upper("sketch_offdiagonal", idx, &s, e.mean[(a, b)].abs(), l.sigmas * se[(a, b)]));
                idx += 1;
            }
        }
    }
    for a in 0..l.n - 1 {
        let drop = e.mean[(a, a)] - e.mean[(a + 1, a + 1)];
        let tol = l.sigmas * (se[(a, a)].powi(2) + se[(a + 1, a + 1)].powi(2)).sqrt();
        rows.push(CheckRow::lower("sketch_diagonal_order", a, &s, drop, -tol));
    }
    Ok((rows, e.mean, se))
}

pub fn exp_operator_suite(spec: &OperatorSpec) -> Result<ExperimentOutput> {
    let mut rows = Vec::new();
    rows.extend(lls_contraction(spec)?);
    rows.extend(beta_bounds(spec)?);
    rows.extend(gamma_bound(spec)?);
    rows.extend(dpp_contraction(spec)?);
    rows.extend(ngd_rate(spec)?);
    rows.extend(large_lambda(spec)?);
    let (lemma, sketch_mean, sketch_se) = lemma_rows(spec)?;
    rows.extend(lemma);

    let mut checks: Vec<&'static str> = Vec::new();
    for r in &rows {
        if !checks.contains(&r.check) {
            checks.push(r.check);
        }
    }
    let mut gates = Vec::new();
    let mut per_check = serde_json::Map::new();
    for c in checks {
        let these: Vec<&CheckRow> = rows.iter().filter(|r| r.check == c).collect();
        let failed = these.iter().filter(|r| !r.passed).count();
        // The worst margin is the most informative single number.
        let worst = these
            .iter()
            .max_by(|a, b| margin(a).total_cmp(&margin(b)))
            .expect("non-empty");
        per_check.insert(c.into(), json!({ "instances": these.len(), "failed": failed, "worst_margin": margin(worst) }));
        if c == "uniform_contraction_slack" {
            continue;
        }
        gates.push(Gate {
            name: format!("{c}: every instance within bound"),
            passed: failed == 0,
            value: worst.value,
            threshold: worst.bound,
            detail: format!("{} instances, {failed} failed", these.len()),
        });
    }
    let rows_csv = rows.iter().map(|r| {
        vec![
            r.check.to_string(),
            r.instance.to_string(),
            r.m.to_string(),
            r.n.to_string(),
            r.k.to_string(),
            fmt_f64(r.lambda),
            fmt_f64(r.value),
            fmt_f64(r.bound),
            (r.passed as u8).to_string(),
        ]
    });
    let header = ["check", "instance", "m", "n", "k", "lambda", "value", "bound", "passed"];
    let table = Table { file: "operator_suite.csv".into(), csv: csv_table(&header, rows_csv) };
    let summary = json!({
        "seed": spec.seed,
        "checks": per_check,
        "sketch_mean": linalg_rows(&sketch_mean),
        "sketch_stderr": linalg_rows(&sketch_se),
    });
    Ok(ExperimentOutput { name: "operator_suite".into(), summary, tables: vec![table], gates })
}

/// Signed distance past the bound; positive means violated.
fn margin(r: &CheckRow) -> f64 {
    if r.check == "beta_lower" || r.check == "gamma_lower" || r.check == "sketch_diagonal_order" {
        r.bound - r.value
    } else {
        r.value - r.bound
    }
}

fn linalg_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equivalence_default_passes() {
        let out = exp_equivalence_suite(&EquivalenceSpec::default()).unwrap();
        assert!(out.passed(), "{:?}", out.gates);
        assert!(out.table("equivalence.csv").unwrap().csv.lines().count() > 200);
    }

    #[test]
    fn reduced_operator_suite_passes() {
        let spec = OperatorSpec {
            beta_instances: 5,
            gamma_instances: 5,
            ngd_instances: 3,
            dpp_contraction: vec![SizeSpec::new(6, 3, 2, 0.0), SizeSpec::new(7, 3, 2, 0.1)],
            lemma: LemmaSpec { mc_samples: 4000, ..LemmaSpec::default() },
            ..OperatorSpec::default()
        };
        let out = exp_operator_suite(&spec).unwrap();
        assert!(out.passed(), "{:#?}", out.gates);
        let csv = &out.tables[0].csv;
        let failed = csv.lines().skip(1).filter(|l| l.ends_with(",0")).count();
        let reported: u64 = out.summary["checks"]
            .as_object()
            .unwrap()
            .iter()
            .filter(|(k, _)| *k != "uniform_contraction_slack")
            .map(|(_, v)| v["failed"].as_u64().unwrap())
            .sum();
        assert_eq!(failed as u64, reported);
    }

    #[test]
    fn random_sizes_are_enumerable() {
        for i in 0..200 {
            let (s, _, _) = random_size(i);
            assert!(s.k < s.m && s.n < s.m && s.m <= 10);
        }
    }
}
