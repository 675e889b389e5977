//! Eigenvalue clouds of the expected step matrix over random instance families.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{csv_table, default_eta_grid, ExperimentOutput, Gate, Table};
use crate::error::Result;
use crate::kernels::{ExpectationMode, SamplerSpec};
use crate::linalg::spectral_norm;
use crate::problems::{gen_conditioned_llq, GeneratorKind, GeneratorSpec, LlqProblem, Problem};
use crate::rng::derive_seed;
use crate::solvers::{fmt_f64, Algorithm, Solver, SolverConfig};
use crate::spectral::{expected_step_matrix, min_real_direction, spectrum_of};

fn default_mode() -> ExpectationMode {
    ExpectationMode::exact()
}

/// One `(m, n, k, lambda)` family of random strongly consistent instances.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EigsFamily {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub trials: usize,
    pub kappa_j: f64,
    pub kappa_h: f64,
    /// Gate: negative fraction strictly above this.
    pub min_negative_fraction: Option<f64>,
    /// Gate: negative fraction at most this.
    pub max_negative_fraction: Option<f64>,
    /// When set, use `lambda = factor * |J|_2^2` per instance instead of `lambda`.
    pub lambda_scale: Option<f64>,
}

impl Default for EigsFamily {
    fn default() -> Self {
        Self {
            m: 4,
            n: 2,
            k: 1,
            lambda: 0.0,
            trials: 1000,
            kappa_j: 10.0,
            kappa_h: 10.0,
            min_negative_fraction: None,
            max_negative_fraction: None,
            lambda_scale: None,
        }
    }
}

impl EigsFamily {
    pub fn sized(m: usize, n: usize, k: usize, lambda: f64) -> Self {
        Self { m, n, k, lambda, ..Self::default() }
    }

    fn label(&self) -> String {
        match self.lambda_scale {
            Some(s) => format!("m{}_n{}_k{}_lambda{}xJ2", self.m, self.n, self.k, s),
            None => format!("m{}_n{}_k{}_lambda{}", self.m, self.n, self.k, self.lambda),
        }
    }

    fn instance(&self, seed: u64, trial: usize) -> Result<(u64, LlqProblem)> {
        let s = derive_seed(seed, trial as u64);
        let spec = GeneratorSpec::new(GeneratorKind::SvdConditioned, self.m, self.n, s)
            .with_kappas(self.kappa_j, self.kappa_h);
        Ok((s, gen_conditioned_llq(&spec)?))
    }

    fn lambda_for(&self, p: &LlqProblem) -> f64 {
        match self.lambda_scale {
            Some(f) => f * spectral_norm(p.jacobian()).powi(2),
            None => self.lambda,
        }
    }
}

/// Start SNGD on the eigenvector of the most negative `xi` instance and check
/// that every step size diverges.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct WitnessSpec {
    /// Index into `families`.
    pub family: usize,
    pub eta_grid: Vec<f64>,
    pub max_iterations: usize,
    pub div_factor: f64,
    pub solver_seed: u64,
}

impl Default for WitnessSpec {
    fn default() -> Self {
        Self { family: 0, eta_grid: default_eta_grid(), max_iterations: 5_000_000, div_factor: 1e12, solver_seed: 7 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EigsSpec {
    pub families: Vec<EigsFamily>,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: ExpectationMode,
    pub witness: Option<WitnessSpec>,
}

impl Default for EigsSpec {
    fn default() -> Self {
        Self {
            families: vec![
                EigsFamily { min_negative_fraction: Some(0.0), ..EigsFamily::sized(4, 2, 1, 0.0) },
                EigsFamily { max_negative_fraction: Some(0.005), ..EigsFamily::sized(100, 10, 1, 0.0) },
                EigsFamily { max_negative_fraction: Some(0.0), lambda_scale: Some(1e3), ..EigsFamily::sized(4, 2, 1, 0.0) },
            ],
            seed: 1,
            mode: ExpectationMode::exact(),
            witness: None,
        }
    }
}

/// Eigenvalues of `M` for one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialSpectrum {
    pub trial: usize,
    pub seed: u64,
    pub lambda: f64,
    pub xi: f64,
    pub eigenvalues: Vec<(f64, f64)>,
}

fn family_spectra(f: &EigsFamily, seed: u64, mode: &ExpectationMode) -> Result<Vec<TrialSpectrum>> {
    (0..f.trials)
        .into_par_iter()
        .map(|t| {
            let (s, p) = f.instance(seed, t)?;
            let lambda = f.lambda_for(&p);
            let m = expected_step_matrix(&p, lambda, SamplerSpec::uniform(f.k), &mode.reseeded(t as u64))?;
            let sp = spectrum_of(&m, lambda);
            Ok(TrialSpectrum { trial: t, seed: s, lambda, xi: sp.xi, eigenvalues: sp.eigenvalues })
        })
        .collect()
}

/// One row per eigenvalue: `trial,seed,lambda,index,re,im,xi`.
pub fn spectra_csv(trials: &[TrialSpectrum]) -> String {
    let rows = trials.iter().flat_map(|t| {
        t.eigenvalues.iter().enumerate().map(move |(i, &(re, im))| {
            vec![
                t.trial.to_string(),
                t.seed.to_string(),
                fmt_f64(t.lambda),
                i.to_string(),
                fmt_f64(re),
                fmt_f64(im),
                fmt_f64(t.xi),
            ]
        })
    });
    csv_table(&["trial", "seed", "lambda", "index", "re", "im", "xi"], rows)
}

pub fn negative_fraction(trials: &[TrialSpectrum]) -> f64 {
    if trials.is_empty() {
        return 0.0;
    }
    trials.iter().filter(|t| t.xi < 0.0).count() as f64 / trials.len() as f64
}

/// Every non-real eigenvalue has its conjugate in the same list.
pub fn conjugate_symmetric(ev: &[(f64, f64)]) -> bool {
    ev.iter().all(|&(re, im)| {
        let tol = 1e-9 * (1.0 + re.abs() + im.abs());
        im.abs() <= tol || ev.iter().any(|&(r2, i2)| (r2 - re).abs() <= tol && (i2 + im).abs() <= tol)
    })
}

pub fn exp_fig_eigs(spec: &EigsSpec) -> Result<ExperimentOutput> {
    let mut tables = Vec::new();
    let mut gates = Vec::new();
    let mut fams = Vec::new();
    let mut clouds = Vec::new();
    for f in &spec.families {
        let trials = family_spectra(f, spec.seed, &spec.mode)?;
        let frac = negative_fraction(&trials);
        let neg = trials.iter().filter(|t| t.xi < 0.0).count();
        let label = f.label();
        if let Some(lo) = f.min_negative_fraction {
            gates.push(Gate::greater(format!("{label} negative fraction"), frac, lo));
        }
        if let Some(hi) = f.max_negative_fraction {
            gates.push(Gate::at_most(format!("{label} negative fraction"), frac, hi));
        }
        tables.push(Table { file: format!("eigs_{label}.csv"), csv: spectra_csv(&trials) });
        fams.push(json!({
            "m": f.m, "n": f.n, "k": f.k, "lambda": f.lambda, "lambda_scale": f.lambda_scale,
            "trials": f.trials, "kappa_j": f.kappa_j, "kappa_h": f.kappa_h,
            "negative": neg, "negative_fraction": frac,
        }));
        clouds.push(trials);
    }
    let mut summary = json!({ "seed": spec.seed, "mode": spec.mode, "families": fams });
    if let Some(w) = &spec.witness {
        let (table, wsum, gate) = divergence_witness(spec, w, &clouds)?;
        tables.push(table);
        summary["witness"] = wsum;
        gates.push(gate);
    }
    Ok(ExperimentOutput { name: "fig_eigs".into(), summary, tables, gates })
}

fn divergence_witness(
    spec: &EigsSpec,
    w: &WitnessSpec,
    clouds: &[Vec<TrialSpectrum>],
) -> Result<(Table, serde_json::Value, Gate)> {
    let name = "divergence witness: every step size diverges";
    let header = ["eta", "diverged", "iterations"];
    let worst = clouds.get(w.family).and_then(|c| c.iter().min_by(|a, b| a.xi.total_cmp(&b.xi)));
    let Some(worst) = worst.filter(|t| t.xi < 0.0) else {
        let gate = Gate::flag(name, false).with_detail("no instance with negative xi in the witness family");
        return Ok((Table { file: "witness.csv".into(), csv: csv_table(&header, []) }, json!(null), gate));
    };
    let f = &spec.families[w.family];
    let (_, p) = f.instance(spec.seed, worst.trial)?;
    let mode = spec.mode.reseeded(worst.trial as u64);
    let m = expected_step_matrix(&p, worst.lambda, SamplerSpec::uniform(f.k), &mode)?;
    let (z, v) = min_real_direction(&m);
    let theta0 = p.theta_star() + &v;
    let problem = Problem::Llq(p);
    let runs = w
        .eta_grid
        .par_iter()
        .map(|&eta| {
            let mut c = SolverConfig::new(Algorithm::Sngd, eta, f.k, w.max_iterations, w.solver_seed)
                .with_lambda(worst.lambda);
            c.div_factor = w.div_factor;
            Solver::new(&problem, c)?.first_hit(theta0.clone(), 0.0, w.max_iterations)
        })
        .collect::<Result<Vec<_>>>()?;
    let diverged = runs.iter().filter(|h| h.diverged).count();
    let rows = w
        .eta_grid
        .iter()
        .zip(&runs)
        .map(|(&eta, h)| vec![fmt_f64(eta), (h.diverged as u8).to_string(), h.iterations.to_string()]);
    let table = Table { file: "witness.csv".into(), csv: csv_table(&header, rows) };
    let summary = json!({
        "trial": worst.trial, "instance_seed": worst.seed, "xi": worst.xi,
        "eigenvalue": [z.re, z.im], "direction": v.as_slice(),
        "diverged": diverged, "grid_points": w.eta_grid.len(),
    });
    let gate = Gate::at_least(name, diverged as f64, w.eta_grid.len() as f64)
        .with_detail(format!("instance seed {} with xi = {:.4e}", worst.seed, worst.xi));
    Ok((table, summary, gate))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LambsSpec {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// The first entry is the baseline; the last is the shifted value.
    pub lambdas: Vec<f64>,
    pub trials: usize,
    pub kappa_j: f64,
    pub kappa_h: f64,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: ExpectationMode,
}

impl Default for LambsSpec {
    fn default() -> Self {
        Self {
            m: 4,
            n: 2,
            k: 1,
            lambdas: vec![0.0, 1.0],
            trials: 1000,
            kappa_j: 10.0,
            kappa_h: 10.0,
            seed: 1,
            mode: ExpectationMode::exact(),
        }
    }
}

/// Mean of `sign(xi(last) - xi(first))` over paired trials, in `[-1, 1]`.
pub fn paired_shift(first: &[TrialSpectrum], last: &[TrialSpectrum]) -> f64 {
    if first.is_empty() {
        return 0.0;
    }
    let s: f64 = first
        .iter()
        .zip(last)
        .map(|(a, b)| {
            let d = b.xi - a.xi;
            if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 }
        })
        .sum();
    s / first.len() as f64
}

pub fn exp_fig_lambs(spec: &LambsSpec) -> Result<ExperimentOutput> {
    let mut clouds = Vec::new();
    let mut tables = Vec::new();
    let mut per = Vec::new();
    for &lambda in &spec.lambdas {
        // The same instances for every lambda: the family seed ignores lambda.
        let f = EigsFamily {
            m: spec.m,
            n: spec.n,
            k: spec.k,
            lambda,
            trials: spec.trials,
            kappa_j: spec.kappa_j,
            kappa_h: spec.kappa_h,
            ..EigsFamily::default()
        };
        let trials = family_spectra(&f, spec.seed, &spec.mode)?;
        per.push(json!({ "lambda": lambda, "negative_fraction": negative_fraction(&trials) }));
        tables.push(Table { file: format!("lambs_lambda{lambda}.csv"), csv: spectra_csv(&trials) });
        clouds.push(trials);
    }
    let mut gates = Vec::new();
    let mut summary = json!({ "seed": spec.seed, "mode": spec.mode, "trials": spec.trials, "lambdas": per });
    if let (Some(first), Some(last)) = (clouds.first(), clouds.last()) {
        let (f0, f1) = (negative_fraction(first), negative_fraction(last));
        gates.push(
            Gate::at_most("negative fraction at shifted lambda <= baseline", f1, f0)
                .with_detail(format!("lambda {} vs {}", spec.lambdas[spec.lambdas.len() - 1], spec.lambdas[0])),
        );
        let sym = clouds.iter().flatten().all(|t| conjugate_symmetric(&t.eigenvalues));
        gates.push(Gate::flag("spectra symmetric about the real axis", sym));
        let complex = first.iter().filter(|t| t.eigenvalues.iter().any(|e| e.1 != 0.0)).count();
        let shift = paired_shift(first, last);
        let majority = first.iter().zip(last).filter(|(a, b)| b.xi >= a.xi).count() as f64 / first.len().max(1) as f64;
        summary["paired_shift"] = json!(shift);
        summary["paired_nondecreasing_fraction"] = json!(majority);
        summary["baseline_trials_with_complex_pairs"] = json!(complex);
    }
    Ok(ExperimentOutput { name: "fig_lambs".into(), summary, tables, gates })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(trials: usize) -> EigsSpec {
        EigsSpec {
            families: vec![EigsFamily { trials, min_negative_fraction: Some(0.0), ..EigsFamily::sized(4, 2, 1, 0.0) }],
            ..EigsSpec::default()
        }
    }

    #[test]
    fn summary_recomputes_from_csv() {
        let out = exp_fig_eigs(&small(60)).unwrap();
        let mut r = csv::Reader::from_reader(out.tables[0].csv.as_bytes());
        let mut xi = std::collections::BTreeMap::new();
        for rec in r.records() {
            let rec = rec.unwrap();
            xi.insert(rec[0].parse::<usize>().unwrap(), rec[6].parse::<f64>().unwrap());
        }
        assert_eq!(xi.len(), 60);
        let neg = xi.values().filter(|&&x| x < 0.0).count();
        assert_eq!(out.summary["families"][0]["negative"], json!(neg));
        let frac = out.summary["families"][0]["negative_fraction"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&frac));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let a = exp_fig_eigs(&small(30)).unwrap();
        let b = exp_fig_eigs(&small(30)).unwrap();
        assert_eq!(a.tables, b.tables);
    }

    #[test]
    fn conjugate_pairs_detected() {
        assert!(conjugate_symmetric(&[(1.0, 2.0), (1.0, -2.0), (3.0, 0.0)]));
        assert!(!conjugate_symmetric(&[(1.0, 2.0), (3.0, 0.0)]));
    }

    #[test]
    fn paired_shift_in_range() {
        let out = exp_fig_lambs(&LambsSpec { trials: 40, ..LambsSpec::default() }).unwrap();
        let s = out.summary["paired_shift"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert_eq!(out.tables.len(), 2);
    }

    #[test]
    fn monte_carlo_mode_runs() {
        let mut s = small(5);
        s.mode = ExpectationMode::monte_carlo(200, 3);
        let out = exp_fig_eigs(&s).unwrap();
        assert_eq!(out.summary["families"][0]["trials"], json!(5));
    }
}
