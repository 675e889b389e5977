//! SGD, NGD, SNGD, SPRING, regularized Kaczmarz and ARK.
//!
//! All stochastic methods draw the sample for iteration `t` from stream `t` of the
//! configured seed, independent of the algorithm. Two solvers sharing a seed and a
//! sampler therefore see the same sequence `S_0, S_1, ...`.

use nalgebra::Cholesky;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, BlockPinv, SampleSet, Sampler, SamplerKind, SamplerSpec};
use crate::linalg::{Matrix, Vector};
use crate::problems::Problem;
use crate::rng::{self, Rng};

pub const DEFAULT_DIV_FACTOR: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sgd,
    Ngd,
    Sngd,
    Spring,
    Rk,
    Ark,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::Ngd => "ngd",
            Algorithm::Sngd => "sngd",
            Algorithm::Spring => "spring",
            Algorithm::Rk => "rk",
            Algorithm::Ark => "ark",
        }
    }
}

/// Hyperparameters of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    /// Step size; Kaczmarz ignores it.
    pub eta: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub mu: f64,
    /// ARK step size; defaults to `1 - (1 - eta) / mu`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_tilde: Option<f64>,
    pub k: usize,
    #[serde(alias = "T")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default = "default_div_factor")]
    pub div_factor: f64,
    #[serde(default)]
    pub record_samples: bool,
}

fn default_div_factor() -> f64 {
    DEFAULT_DIV_FACTOR
}

impl SolverConfig {
    pub fn new(algorithm: Algorithm, eta: f64, k: usize, iterations: usize, seed: u64) -> Self {
        Self {
            algorithm,
            eta,
            lambda: 0.0,
            mu: 0.0,
            eta_tilde: None,
            k,
            iterations,
            seed,
            sampler: SamplerKind::UniformWithoutReplacement,
            div_factor: DEFAULT_DIV_FACTOR,
            record_samples: false,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_sampler(mut self, kind: SamplerKind) -> Self {
        self.sampler = kind;
        self
    }

    pub fn sampler_spec(&self) -> SamplerSpec {
        SamplerSpec { kind: self.sampler, k: self.k, lambda: self.lambda }
    }

    /// `eta_tilde` if set, else `1 - (1 - eta) / mu`.
    pub fn ark_eta_tilde(&self) -> f64 {
        self.eta_tilde.unwrap_or(1.0 - (1.0 - self.eta) / self.mu)
    }

    pub fn validate(&self, problem: &Problem) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return bad(format!("mu must lie in [0, 1), got {}", self.mu));
        }
        if self.algorithm == Algorithm::Ark && self.mu <= 0.0 {
            return bad("ark requires mu > 0".into());
        }
        if matches!(self.algorithm, Algorithm::Ark | Algorithm::Rk) && problem.as_lls().is_none() {
            return bad(format!("{} is defined for least squares only", self.algorithm.name()));
        }
        if self.algorithm != Algorithm::Ngd && (self.k == 0 || self.k > problem.m()) {
            return bad(format!("k = {} must lie in [1, {}]", self.k, problem.m()));
        }
        if !(self.div_factor > 1.0) {
            return bad("div_factor must exceed 1".into());
        }
        Ok(())
    }
}

/// Iterate pair. For ARK `theta` and `phi` hold the transformed iterates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverState {
    #[serde(with = "crate::linalg::serde_vector")]
    pub theta: Vector,
    #[serde(with = "crate::linalg::serde_vector")]
    pub phi: Vector,
    pub t: usize,
}

impl SolverState {
    pub fn new(theta: Vector) -> Self {
        let n = theta.len();
        Self { theta, phi: Vector::zeros(n), t: 0 }
    }
}

/// Rows `S` of the function-space gradient: `H_S J theta + q_S`, or `J_S theta - b_S`.
pub fn function_space_gradient(problem: &Problem, theta: &Vector, set: &SampleSet) -> Vector {
    problem.gradient_rows(theta, set.indices())
}

/// `theta - eta J_S^{+(lambda)} r_S`.
pub fn sngd_step(problem: &Problem, state: &SolverState, set: &SampleSet, config: &SolverConfig) -> Result<SolverState> {
    let block = kernels::select_rows(problem.jacobian(), set);
    let r = function_space_gradient(problem, &state.theta, set);
    let step = BlockPinv::new(&block, config.lambda)?.apply(&r);
    Ok(SolverState { theta: &state.theta - step * config.eta, phi: state.phi.clone(), t: state.t + 1 })
}

/// Regularized Kaczmarz: `theta - J_S^{+(lambda)} (J_S theta - b_S)`.
pub fn rk_step(problem: &Problem, state: &SolverState, set: &SampleSet, config: &SolverConfig) -> Result<SolverState> {
    let lls = problem
        .as_lls()
        .ok_or_else(|| Error::InvalidSpec("regularized Kaczmarz needs a least-squares problem".into()))?;
    let block = kernels::select_rows(lls.jacobian(), set);
    let residual = lls.gradient_rows(&state.theta, set.indices());
    let step = BlockPinv::new(&block, config.lambda)?.apply(&residual);
    Ok(SolverState { theta: &state.theta - step, phi: state.phi.clone(), t: state.t + 1 })
}

/// `phi' = mu phi + J_S^{+(lambda)} (r_S - mu J_S phi)`, `theta' = theta - eta phi'`.
pub fn spring_step(problem: &Problem, state: &SolverState, set: &SampleSet, config: &SolverConfig) -> Result<SolverState> {
    let block = kernels::select_rows(problem.jacobian(), set);
    let r = function_space_gradient(problem, &state.theta, set);
    let inner = r - &block * &state.phi * config.mu;
    let phi = &state.phi * config.mu + BlockPinv::new(&block, config.lambda)?.apply(&inner);
    let theta = &state.theta - &phi * config.eta;
    Ok(SolverState { theta, phi, t: state.t + 1 })
}

/// ARK on the transformed pair `(theta~, phi~)`:
/// `w = J_S^{+(lambda)}(J_S theta~ - b_S)`, `phi~' = mu (phi~ - w)`, `theta~' = theta~ - w + eta~ phi~'`.
pub fn ark_step(problem: &Problem, state: &SolverState, set: &SampleSet, config: &SolverConfig) -> Result<SolverState> {
    let lls = problem
        .as_lls()
        .ok_or_else(|| Error::InvalidSpec("ARK needs a least-squares problem".into()))?;
    let block = kernels::select_rows(lls.jacobian(), set);
    let residual = lls.gradient_rows(&state.theta, set.indices());
    let w = BlockPinv::new(&block, config.lambda)?.apply(&residual);
    let phi = (&state.phi - &w) * config.mu;
    let theta = &state.theta - &w + &phi * config.ark_eta_tilde();
    Ok(SolverState { theta, phi, t: state.t + 1 })
}

/// Full-batch natural gradient with the `n x n` side of the Woodbury identity.
pub struct NgdOperator {
    factor: Cholesky<f64, nalgebra::Dyn>,
}

impl NgdOperator {
    pub fn new(problem: &Problem, lambda: f64) -> Result<Self> {
        let mut a = problem.gram().clone();
        for i in 0..a.nrows() {
            a[(i, i)] += lambda;
        }
        let factor = Cholesky::new(a).ok_or(Error::RankDeficient { sigma_min: 0.0, sigma_max: f64::NAN })?;
        Ok(Self { factor })
    }

    /// `theta - eta (J^T J + lambda I)^{-1} J^T (H J theta + q)`.
    pub fn step(&self, problem: &Problem, state: &SolverState, eta: f64) -> SolverState {
        let g = problem.jacobian().transpose() * problem.full_gradient(&state.theta);
        let dir = self.factor.solve(&g);
        SolverState { theta: &state.theta - dir * eta, phi: state.phi.clone(), t: state.t + 1 }
    }
}

/// One NGD step; builds the factorization each call (use [`NgdOperator`] in loops).
pub fn ngd_step(problem: &Problem, state: &SolverState, config: &SolverConfig) -> Result<SolverState> {
    Ok(NgdOperator::new(problem, config.lambda)?.step(problem, state, config.eta))
}

/// Importance weights for SGD: `L_i = |J_i| |(HJ)_i|`, `w_i = L_i / mean(L)`, `p_i = L_i / sum(L)`.
#[derive(Clone, Debug)]
pub struct WeightedSgd {
    pub lipschitz: Vec<f64>,
    pub weights: Vec<f64>,
    pub probabilities: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl WeightedSgd {
    pub fn new(problem: &Problem) -> Result<Self> {
        let j = problem.jacobian();
        let hj = problem.hj();
        let lipschitz: Vec<f64> = (0..j.nrows()).map(|i| j.row(i).norm() * hj.row(i).norm()).collect();
        let total: f64 = lipschitz.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidSpec("all row Lipschitz constants vanish".into()));
        }
        let mean = total / lipschitz.len() as f64;
        let weights = lipschitz.iter().map(|l| l / mean).collect();
        let probabilities = lipschitz.iter().map(|l| l / total).collect();
        let dist = WeightedIndex::new(&lipschitz).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        Ok(Self { lipschitz, weights, probabilities, dist })
    }

    /// Mean of the row Lipschitz constants.
    pub fn mean_lipschitz(&self) -> f64 {
        self.lipschitz.iter().sum::<f64>() / self.lipschitz.len() as f64
    }

    /// `k` i.i.d. row indices drawn with probabilities `p_i`, in draw order.
    pub fn draw(&self, rng: &mut Rng, k: usize) -> Vec<usize> {
        (0..k).map(|_| self.dist.sample(rng)).collect()
    }

    /// `(1/k) sum_i (1/w_i) J_i^T r_i` for the drawn rows.
    pub fn direction(&self, problem: &Problem, theta: &Vector, rows: &[usize]) -> Vector {
        let r = problem.gradient_rows(theta, rows);
        let j = problem.jacobian();
        let mut d = Vector::zeros(j.ncols());
        for (pos, &i) in rows.iter().enumerate() {
            d.axpy(r[pos] / self.weights[i], &j.row(i).transpose(), 1.0);
        }
        d / rows.len() as f64
    }
}

/// `theta - (eta / k) sum (1/w_i) J_i^T (H_i J theta + q_i)` over `k` weighted draws.
pub fn sgd_step(
    problem: &Problem,
    state: &SolverState,
    rng: &mut Rng,
    config: &SolverConfig,
    weights: &WeightedSgd,
) -> SolverState {
    let rows = weights.draw(rng, config.k);
    let d = weights.direction(problem, &state.theta, &rows);
    SolverState { theta: &state.theta - d * config.eta, phi: state.phi.clone(), t: state.t + 1 }
}

/// One row of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub err_sq: f64,
    #[serde(rename = "err_JtJ")]
    pub err_jtj: f64,
    #[serde(rename = "err_Qinv", default, skip_serializing_if = "Option::is_none")]
    pub err_qinv: Option<f64>,
    pub loss: f64,
    pub diverged: bool,
    /// Sample that produced this iterate from the previous one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_indices: Option<Vec<usize>>,
}

/// Per-iteration error history of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub config: SolverConfig,
    pub records: Vec<TraceRecord>,
    pub diverged: bool,
    /// Set when a step failed; the trace stops at the last good iterate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(with = "crate::linalg::serde_vector")]
    pub final_theta: Vector,
}

impl Trace {
    pub fn initial_err(&self) -> f64 {
        self.records[0].err_sq
    }

    pub fn final_err(&self) -> f64 {
        self.records.last().map(|r| r.err_sq).unwrap_or(f64::NAN)
    }

    /// First `t` with `err_sq <= rel * err_sq(0)`.
    pub fn time_to(&self, rel: f64) -> Option<usize> {
        let target = rel * self.initial_err();
        self.records.iter().find(|r| !r.diverged && r.err_sq <= target).map(|r| r.t)
    }

    pub fn err_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.err_sq).collect()
    }

    /// CSV with header `t,err_sq,err_JtJ,err_Qinv,loss,diverged`; empty `err_Qinv`
    /// when the metric was not requested.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "err_sq", "err_JtJ", "err_Qinv", "loss", "diverged"])
            .expect("in-memory write");
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                fmt_f64(r.err_sq),
                fmt_f64(r.err_jtj),
                r.err_qinv.map(fmt_f64).unwrap_or_default(),
                fmt_f64(r.loss),
                (r.diverged as u8).to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("ascii")
    }
}

/// 17 significant digits, round-trip exact.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Precomputed pieces for repeated runs on one problem.
pub struct Solver<'a> {
    problem: &'a Problem,
    config: SolverConfig,
    sampler: Option<Sampler>,
    ngd: Option<NgdOperator>,
    sgd: Option<WeightedSgd>,
    qinv: Option<Matrix>,
}

impl<'a> Solver<'a> {
    pub fn new(problem: &'a Problem, config: SolverConfig) -> Result<Self> {
        config.validate(problem)?;
        let sampler = match config.algorithm {
            Algorithm::Sngd | Algorithm::Spring | Algorithm::Rk | Algorithm::Ark => {
                Some(Sampler::new(config.sampler_spec(), problem.jacobian())?)
            }
            _ => None,
        };
        let ngd = match config.algorithm {
            Algorithm::Ngd => Some(NgdOperator::new(problem, config.lambda)?),
            _ => None,
        };
        let sgd = match config.algorithm {
            Algorithm::Sgd => Some(WeightedSgd::new(problem)?),
            _ => None,
        };
        Ok(Self { problem, config, sampler, ngd, sgd, qinv: None })
    }

    /// Also record `|theta - theta*|^2` in the norm of this matrix.
    pub fn with_qinv(mut self, qinv: Matrix) -> Self {
        self.qinv = Some(qinv);
        self
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// Sample used at iteration `t`.
    pub fn sample_at(&self, t: usize) -> Option<SampleSet> {
        let sampler = self.sampler.as_ref()?;
        let mut r = rng::stream_rng(self.config.seed, t as u64);
        Some(sampler.draw(&mut r))
    }

    /// Advance one iteration; returns the sampled rows when the method samples.
    pub fn step(&self, state: &SolverState) -> Result<(SolverState, Option<Vec<usize>>)> {
        let p = self.problem;
        let c = &self.config;
        match c.algorithm {
            Algorithm::Ngd => Ok((self.ngd.as_ref().unwrap().step(p, state, c.eta), None)),
            Algorithm::Sgd => {
                let w = self.sgd.as_ref().unwrap();
                let mut r = rng::stream_rng(c.seed, state.t as u64);
                let rows = w.draw(&mut r, c.k);
                let d = w.direction(p, &state.theta, &rows);
                let next = SolverState { theta: &state.theta - d * c.eta, phi: state.phi.clone(), t: state.t + 1 };
                Ok((next, Some(rows)))
            }
            alg => {
                let set = self.sample_at(state.t).expect("sampling method");
                let next = match alg {
                    Algorithm::Sngd => sngd_step(p, state, &set, c)?,
                    Algorithm::Spring => spring_step(p, state, &set, c)?,
                    Algorithm::Rk => rk_step(p, state, &set, c)?,
                    Algorithm::Ark => ark_step(p, state, &set, c)?,
                    _ => unreachable!(),
                };
                Ok((next, Some(set.indices().to_vec())))
            }
        }
    }

    fn record(&self, theta: &Vector, t: usize, diverged: bool, samples: Option<Vec<usize>>) -> TraceRecord {
        let e = theta - self.problem.theta_star();
        TraceRecord {
            t,
            err_sq: e.norm_squared(),
            err_jtj: e.dot(&(self.problem.gram() * &e)).max(0.0),
            err_qinv: self.qinv.as_ref().map(|q| e.dot(&(q * &e)).max(0.0)),
            loss: self.problem.loss(theta),
            diverged,
            sample_indices: if self.config.record_samples { samples } else { None },
        }
    }

    /// Run from `theta_0 = 0`.
    pub fn run(&self) -> Trace {
        self.run_from(Vector::zeros(self.problem.n()))
    }

    /// First iteration with `|theta_t - theta*|^2 <= rel * |theta_0 - theta*|^2`, without
    /// recording a trace. The iterate sequence is the one [`Solver::run_from`] produces.
    pub fn first_hit(&self, theta0: Vector, rel: f64, max_iterations: usize) -> Result<Hit> {
        let star = self.problem.theta_star();
        let mut state = SolverState::new(theta0);
        let e0 = (&state.theta - star).norm_squared();
        let (target, limit) = (rel * e0, self.config.div_factor * e0);
        if e0 <= target {
            return Ok(Hit { t: Some(0), diverged: false, iterations: 0 });
        }
        for _ in 0..max_iterations {
            state = self.step(&state)?.0;
            let e = (&state.theta - star).norm_squared();
            if !e.is_finite() || e > limit {
                return Ok(Hit { t: None, diverged: true, iterations: state.t });
            }
            if e <= target {
                return Ok(Hit { t: Some(state.t), diverged: false, iterations: state.t });
            }
        }
        Ok(Hit { t: None, diverged: false, iterations: state.t })
    }

    /// Run from a given starting point. Step failures truncate the trace and set `error`.
    pub fn run_from(&self, theta0: Vector) -> Trace {
        let mut state = SolverState::new(theta0);
        let first = self.record(&state.theta, 0, false, None);
        let limit = self.config.div_factor * first.err_sq;
        let mut records = vec![first];
        let mut diverged = false;
        let mut error = None;
        for _ in 0..self.config.iterations {
            match self.step(&state) {
                Ok((next, samples)) => {
                    state = next;
                    let mut rec = self.record(&state.theta, state.t, false, samples);
                    if !rec.err_sq.is_finite() || rec.err_sq > limit {
                        rec.diverged = true;
                        diverged = true;
                    }
                    records.push(rec);
                    if diverged {
                        break;
                    }
                }
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        Trace { config: self.config.clone(), records, diverged, error, final_theta: state.theta }
    }
}

/// Outcome of [`Solver::first_hit`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    /// Hitting time, if the tolerance was reached.
    pub t: Option<usize>,
    pub diverged: bool,
    /// Iterations actually performed.
    pub iterations: usize,
}

/// Convenience wrapper: validate, build caches and run from zero.
pub fn run(problem: &Problem, config: &SolverConfig) -> Result<Trace> {
    Ok(Solver::new(problem, config.clone())?.run())
}

/// Deviations between coupled runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub iterations: usize,
    /// `max_t |theta_t(SNGD, eta = 1) - theta_t(RK)| / s_t`.
    ///
    /// The per-step scale is `s_t = max(1 + |theta_0|, |reference iterate at t|)`, so
    /// bounded runs are measured against `1 + |theta_0|` and growing runs per iterate.
    pub sngd_rk: f64,
    /// `max_t |phi~_t + mu phi_t| / s_t`.
    pub ark_phi: f64,
    /// `max_t |theta~_t - (theta_t - mu phi_t)| / s_t`.
    pub ark_theta: f64,
    /// Largest `s_t / (1 + |theta_0|)`; above 1 only when the iterates grew.
    pub max_scale_growth: f64,
    /// The same three maxima with each step's deviation divided by `max(|theta_t - theta*|, tiny)`.
    pub sngd_rk_error_scaled: f64,
    pub ark_phi_error_scaled: f64,
    pub ark_theta_error_scaled: f64,
    pub eta: f64,
    pub mu: f64,
    pub eta_tilde: f64,
    /// Whether every coupled pair consumed identical samples.
    pub samples_identical: bool,
    /// Scaled deviations per iteration.
    pub steps: Vec<EquivalenceStep>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EquivalenceStep {
    pub t: usize,
    pub sngd_rk: f64,
    pub ark_phi: f64,
    pub ark_theta: f64,
}

/// Run SNGD(eta = 1) against RK and SPRING against ARK on coupled streams.
///
/// `config` supplies `k`, `lambda`, `mu`, `eta`, the seed and the sampler; its
/// algorithm field is ignored.
pub fn verify_equivalences(problem: &Problem, config: &SolverConfig, iterations: usize) -> Result<EquivalenceReport> {
    verify_equivalences_from(problem, config, iterations, Vector::zeros(problem.n()))
}

pub fn verify_equivalences_from(
    problem: &Problem,
    config: &SolverConfig,
    iterations: usize,
    theta0: Vector,
) -> Result<EquivalenceReport> {
    let with = |alg: Algorithm, eta: f64| {
        let mut c = config.clone();
        c.algorithm = alg;
        c.eta = eta;
        c.iterations = iterations;
        Solver::new(problem, c)
    };
    let sngd = with(Algorithm::Sngd, 1.0)?;
    let rk = with(Algorithm::Rk, 1.0)?;
    let spring = with(Algorithm::Spring, config.eta)?;
    let ark = with(Algorithm::Ark, config.eta)?;
    let mu = config.mu;
    let base = 1.0 + theta0.norm();
    let mut growth = 1.0f64;
    let star = problem.theta_star();

    let mut s = [SolverState::new(theta0.clone()), SolverState::new(theta0.clone())];
    let mut a = [SolverState::new(theta0.clone()), SolverState::new(theta0)];
    let mut out = [0.0f64; 6];
    let mut identical = true;
    let mut steps = Vec::with_capacity(iterations);
    for t in 1..=iterations {
        let (s0, i0) = sngd.step(&s[0])?;
        let (s1, i1) = rk.step(&s[1])?;
        let (a0, j0) = spring.step(&a[0])?;
        let (a1, j1) = ark.step(&a[1])?;
        identical &= i0 == i1 && j0 == j1 && i0 == j0;
        s = [s0, s1];
        a = [a0, a1];
        let d_rk = (&s[0].theta - &s[1].theta).norm();
        let (mapped_theta, mapped_phi) = (&a[0].theta - &a[0].phi * mu, &a[0].phi * (-mu));
        let d_phi = (&a[1].phi - &mapped_phi).norm();
        let d_theta = (&a[1].theta - &mapped_theta).norm();
        let s_rk = base.max(s[0].theta.norm());
        let s_ark = base.max(mapped_theta.norm()).max(mapped_phi.norm());
        growth = growth.max(s_rk / base).max(s_ark / base);
        let e_s = (&s[0].theta - star).norm().max(f64::MIN_POSITIVE);
        let e_a = (&a[0].theta - star).norm().max(f64::MIN_POSITIVE);
        steps.push(EquivalenceStep { t, sngd_rk: d_rk / s_rk, ark_phi: d_phi / s_ark, ark_theta: d_theta / s_ark });
        for (slot, v) in out.iter_mut().zip([
            d_rk / s_rk,
            d_phi / s_ark,
            d_theta / s_ark,
            d_rk / e_s,
            d_phi / e_a,
            d_theta / e_a,
        ]) {
            // NaN poisons the maximum on purpose
            *slot = if v.is_nan() || slot.is_nan() { f64::NAN } else { slot.max(v) };
        }
    }
    Ok(EquivalenceReport {
        iterations,
        sngd_rk: out[0],
        ark_phi: out[1],
        ark_theta: out[2],
        max_scale_growth: growth,
        sngd_rk_error_scaled: out[3],
        ark_phi_error_scaled: out[4],
        ark_theta_error_scaled: out[5],
        eta: config.eta,
        mu,
        eta_tilde: ark.config().ark_eta_tilde(),
        samples_identical: identical,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{self, GeneratorKind, GeneratorSpec, ProblemType};

    fn lls(m: usize, n: usize, seed: u64) -> Problem {
        problems::generate(&GeneratorSpec::new(GeneratorKind::GaussianRows, m, n, seed), ProblemType::Lls).unwrap()
    }

    fn llq(m: usize, n: usize, seed: u64) -> Problem {
        let spec = GeneratorSpec::new(GeneratorKind::SvdConditioned, m, n, seed).with_kappas(5.0, 4.0);
        problems::generate(&spec, ProblemType::Llq).unwrap()
    }

    fn random_set(m: usize, k: usize, seed: u64) -> SampleSet {
        let mut r = rng::seeded(seed);
        let mut v = rand::seq::index::sample(&mut r, m, k).into_vec();
        v.sort_unstable();
        SampleSet::new(v, m).unwrap()
    }

    #[test]
    fn zero_residual_at_solution() {
        for p in [lls(20, 4, 1), llq(20, 4, 2)] {
            let r = function_space_gradient(&p, p.theta_star(), &random_set(20, 5, 3));
            assert!(r.norm() < 1e-12);
        }
    }

    #[test]
    fn full_set_residual() {
        let p = lls(10, 3, 5);
        let theta = Vector::from_element(3, 0.3);
        let r = function_space_gradient(&p, &theta, &SampleSet::full(10));
        let lls = p.as_lls().unwrap();
        assert!((r - (lls.jacobian() * &theta - lls.b())).norm() < 1e-14);
    }

    #[test]
    fn llq_residual_matches_dense_oracle() {
        let p = llq(30, 5, 4);
        let q = p.as_llq().unwrap();
        let theta = Vector::from_fn(5, |i, _| i as f64 - 2.0);
        let dense = q.hessian().to_dense() * (q.jacobian() * &theta) + q.q();
        let set = random_set(30, 7, 6);
        let r = function_space_gradient(&p, &theta, &set);
        let oracle = Vector::from_iterator(7, set.indices().iter().map(|&i| dense[i]));
        assert!((&r - &oracle).norm() <= 1e-12 * oracle.norm());
    }

    #[test]
    fn full_batch_sngd_solves_in_one_step() {
        let p = lls(12, 4, 7);
        let c = SolverConfig::new(Algorithm::Sngd, 1.0, 12, 1, 0);
        let s = sngd_step(&p, &SolverState::new(Vector::zeros(4)), &SampleSet::full(12), &c).unwrap();
        assert!((s.theta - p.theta_star()).norm() < 1e-10);
    }

    #[test]
    fn zero_step_is_identity() {
        let p = lls(12, 4, 7);
        let c = SolverConfig::new(Algorithm::Sngd, 0.0, 3, 1, 0);
        let st = SolverState::new(Vector::from_element(4, 1.5));
        let s = sngd_step(&p, &st, &random_set(12, 3, 1), &c).unwrap();
        assert_eq!(s.theta, st.theta);
    }

    #[test]
    fn sngd_error_follows_projector() {
        let p = lls(15, 5, 8);
        let c = SolverConfig::new(Algorithm::Sngd, 0.7, 3, 1, 0).with_lambda(0.2);
        let st = SolverState::new(Vector::from_fn(5, |i, _| (i as f64).sin()));
        let set = random_set(15, 3, 2);
        let next = sngd_step(&p, &st, &set, &c).unwrap();
        let proj = kernels::projector(&kernels::select_rows(p.jacobian(), &set), 0.2).unwrap();
        let e = &st.theta - p.theta_star();
        let oracle = &e - &proj * &e * 0.7;
        let got = next.theta - p.theta_star();
        assert!((&got - &oracle).norm() <= 1e-12 * oracle.norm());
    }

    #[test]
    fn spring_without_momentum_is_sngd() {
        let p = llq(15, 4, 3);
        let c = SolverConfig::new(Algorithm::Spring, 0.8, 4, 1, 0).with_lambda(0.05);
        let st = SolverState::new(Vector::from_element(4, -1.0));
        let set = random_set(15, 4, 9);
        let a = spring_step(&p, &st, &set, &c).unwrap();
        let b = sngd_step(&p, &st, &set, &c).unwrap();
        assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn spring_first_step_momentum() {
        let p = llq(15, 4, 3);
        let c = SolverConfig::new(Algorithm::Spring, 0.8, 4, 1, 0).with_mu(0.9);
        let st = SolverState::new(Vector::from_element(4, 2.0));
        let set = random_set(15, 4, 1);
        let a = spring_step(&p, &st, &set, &c).unwrap();
        let r = function_space_gradient(&p, &st.theta, &set);
        let oracle = kernels::reg_pinv_apply(&kernels::select_rows(p.jacobian(), &set), 0.0, &r).unwrap();
        assert!((a.phi - oracle).norm() < 1e-14);
    }

    #[test]
    fn full_batch_spring_tracks_ngd() {
        let p = llq(12, 3, 11);
        for mu in [0.3, 0.9] {
            let spring = Solver::new(&p, SolverConfig::new(Algorithm::Spring, 0.5, 12, 50, 0).with_mu(mu)).unwrap();
            let ngd = NgdOperator::new(&p, 0.0).unwrap();
            let mut s = SolverState::new(Vector::zeros(3));
            for _ in 0..50 {
                let dir_ngd = {
                    let next = ngd.step(&p, &s, 1.0);
                    &s.theta - next.theta
                };
                s = spring.step(&s).unwrap().0;
                assert!((&s.phi - &dir_ngd).norm() <= 1e-10 * dir_ngd.norm().max(1e-300), "mu {mu}");
            }
        }
    }

    #[test]
    fn ark_first_step_expansion() {
        let p = lls(12, 4, 2);
        let c = SolverConfig::new(Algorithm::Ark, 0.95, 3, 1, 0).with_mu(0.9);
        let st = SolverState::new(Vector::from_element(4, 0.5));
        let set = random_set(12, 3, 4);
        let a = ark_step(&p, &st, &set, &c).unwrap();
        let block = kernels::select_rows(p.jacobian(), &set);
        let w0 = kernels::reg_pinv_apply(&block, 0.0, &function_space_gradient(&p, &st.theta, &set)).unwrap();
        let eta_tilde = 17.0 / 18.0;
        assert!((c.ark_eta_tilde() - eta_tilde).abs() < 1e-15);
        let oracle = &st.theta - &w0 * (1.0 + eta_tilde * 0.9);
        assert!((a.theta - oracle).norm() < 1e-13);
    }

    #[test]
    fn ark_small_momentum_is_kaczmarz() {
        let p = lls(12, 4, 2);
        let mut c = SolverConfig::new(Algorithm::Ark, 0.95, 3, 1, 0).with_mu(1e-12);
        c.eta_tilde = Some(0.5);
        let st = SolverState::new(Vector::from_element(4, 0.5));
        let set = random_set(12, 3, 4);
        let a = ark_step(&p, &st, &set, &c).unwrap();
        let k = rk_step(&p, &st, &set, &c).unwrap();
        assert!(a.phi.norm() < 1e-10 && (a.theta - k.theta).norm() < 1e-10);
    }

    #[test]
    fn ngd_one_step_on_lls() {
        let p = lls(12, 4, 3);
        let c = SolverConfig::new(Algorithm::Ngd, 1.0, 12, 1, 0);
        let s = ngd_step(&p, &SolverState::new(Vector::zeros(4)), &c).unwrap();
        assert!((s.theta - p.theta_star()).norm() < 1e-10);
    }

    #[test]
    fn ngd_isotropic_hessian_solves_in_one_step() {
        // kappa_h = 1 gives H~ = I
        let spec = GeneratorSpec::new(GeneratorKind::SvdConditioned, 10, 3, 5).with_kappas(3.0, 1.0);
        let p = problems::generate(&spec, ProblemType::Llq).unwrap();
        let c = SolverConfig::new(Algorithm::Ngd, 1.0, 10, 1, 0);
        let s = ngd_step(&p, &SolverState::new(Vector::zeros(3)), &c).unwrap();
        assert!((s.theta - p.theta_star()).norm() < 1e-10);
    }

    #[test]
    fn sgd_fixed_point_and_equal_weights() {
        let p = lls(20, 3, 4);
        let w = WeightedSgd::new(&p).unwrap();
        assert!((w.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let c = SolverConfig::new(Algorithm::Sgd, 0.1, 4, 1, 0);
        let st = SolverState::new(p.theta_star().clone());
        let next = sgd_step(&p, &st, &mut rng::seeded(1), &c, &w);
        assert!((next.theta - p.theta_star()).norm() < 1e-12);

        // rows of equal norm: unit weights
        let mut j = p.jacobian().clone();
        for i in 0..20 {
            let r = j.row(i).normalize();
            j.set_row(i, &r);
        }
        let theta = Vector::from_element(3, 1.0);
        let b = &j * &theta;
        let q: Problem = problems::LlsProblem::new(j, b, theta, None).unwrap().into();
        let w = WeightedSgd::new(&q).unwrap();
        assert!(w.weights.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn trace_zero_iterations() {
        let p = lls(10, 3, 1);
        let t = run(&p, &SolverConfig::new(Algorithm::Sngd, 1.0, 2, 0, 0)).unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.records[0].t, 0);
    }

    #[test]
    fn divergence_flag_and_early_stop() {
        let p = lls(10, 3, 1);
        let mut c = SolverConfig::new(Algorithm::Sgd, 50.0, 1, 10_000, 0);
        c.div_factor = 1e6;
        let t = run(&p, &c).unwrap();
        assert!(t.diverged);
        assert!(t.records.last().unwrap().diverged);
        assert!(t.records.len() < 10_001);
        assert!(t.records[..t.records.len() - 1].iter().all(|r| !r.diverged));
    }

    #[test]
    fn first_hit_matches_trace() {
        let p = lls(30, 4, 3);
        let s = Solver::new(&p, SolverConfig::new(Algorithm::Sngd, 1.0, 3, 400, 9)).unwrap();
        let trace = s.run();
        let hit = s.first_hit(Vector::zeros(4), 1e-6, 400).unwrap();
        assert_eq!(hit.t, trace.time_to(1e-6));
        assert!(hit.t.is_some());
    }

    #[test]
    fn config_validation() {
        let p = lls(10, 3, 1);
        let ok = SolverConfig::new(Algorithm::Spring, 0.5, 2, 1, 0);
        assert!(ok.validate(&p).is_ok());
        assert!(ok.clone().with_mu(1.0).validate(&p).is_err());
        assert!(SolverConfig::new(Algorithm::Ark, 0.5, 2, 1, 0).validate(&p).is_err());
        assert!(SolverConfig::new(Algorithm::Sngd, -1.0, 2, 1, 0).validate(&p).is_err());
        assert!(SolverConfig::new(Algorithm::Sngd, 1.0, 11, 1, 0).validate(&p).is_err());
        let q = llq(10, 3, 1);
        assert!(SolverConfig::new(Algorithm::Rk, 1.0, 2, 1, 0).validate(&q).is_err());
    }

    #[test]
    fn csv_layout() {
        let p = lls(10, 3, 1);
        let t = run(&p, &SolverConfig::new(Algorithm::Sngd, 1.0, 2, 2, 0)).unwrap();
        let csv = t.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "t,err_sq,err_JtJ,err_Qinv,loss,diverged");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first.len(), 6);
        assert_eq!(first[0], "0");
        assert_eq!(first[3], "");
        assert_eq!(first[1].parse::<f64>().unwrap(), t.records[0].err_sq);
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn degenerate_momentum_limit_is_finite() {
        let p = lls(30, 5, 2);
        let c = SolverConfig::new(Algorithm::Spring, 1.0, 3, 0, 1).with_mu(1.0 - 1e-12);
        let r = verify_equivalences(&p, &c, 50).unwrap();
        assert!((r.eta_tilde - 1.0).abs() < 1e-15);
        assert!(r.ark_phi.is_finite() && r.ark_theta.is_finite() && r.sngd_rk.is_finite());
    }
}
