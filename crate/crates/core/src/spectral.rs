//! Rate-governing spectral quantities and exact one-step operators.
//!
//! With `G = J^T J` and `P(S) = J_S^{+(lambda)} J_S`:
//!
//! * `alpha = lambda_min(P̄)` and `beta = lambda_max(E[(P̄^{-1/2} P P̄^{-1/2})^2])`;
//! * `Q̄ = G^{-1/2} P̄ G^{-1/2}` and `gamma = 1 / lambda_max(E[G^{-1/2} P Q̄^{-1} P G^{-1/2}])`;
//! * `H~ = G^{-1/2} J^T H J G^{-1/2}`;
//! * `M = P̄ J^+ H J` with `xi = min Re eig(M)`.
//!
//! Under k-DPP sampling the kernel regularization is always the projector's
//! `lambda`; the `lambda` field of the supplied sampler spec is overwritten.

use nalgebra::Cholesky;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ExpectationMode, SampleSet, Sampler, SamplerKind, SamplerSpec};
use crate::linalg::{self, Matrix, Vector, EIG_FLOOR};
use crate::problems::{LlqProblem, Problem};

/// Slack on the analytic inequalities checked by [`SpectralReport::invariants`].
pub const INVARIANT_TOL: f64 = 1e-8;

fn effective_sampler(spec: SamplerSpec, lambda: f64) -> SamplerSpec {
    match spec.kind {
        SamplerKind::KDpp => SamplerSpec { lambda, ..spec },
        SamplerKind::UniformWithoutReplacement => spec,
    }
}

fn build_sampler(problem: &Problem, spec: SamplerSpec, lambda: f64, mode: &ExpectationMode) -> Result<Sampler> {
    let spec = effective_sampler(spec, lambda);
    match mode {
        ExpectationMode::ExactEnumeration { enumeration_budget } => {
            Sampler::with_budget(spec, problem.jacobian(), *enumeration_budget)
        }
        ExpectationMode::MonteCarlo { .. } => Sampler::new(spec, problem.jacobian()),
    }
}

fn block_projector(j: &Matrix, lambda: f64) -> impl Fn(&SampleSet) -> Result<Matrix> + Sync + '_ {
    move |s| kernels::projector(&kernels::select_rows(j, s), lambda)
}

/// `P̄ = E[P(S)]`.
pub fn expected_projector(
    problem: &Problem,
    lambda: f64,
    sampler: SamplerSpec,
    mode: &ExpectationMode,
) -> Result<kernels::Expectation> {
    let s = build_sampler(problem, sampler, lambda, mode)?;
    kernels::expect_matrix(block_projector(problem.jacobian(), lambda), &s, mode)
}

/// Everything the rate statements depend on, for one `(problem, lambda, sampler)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectralReport {
    pub lambda: f64,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub sampler: SamplerSpec,
    pub mode: ExpectationMode,
    /// Terms per expectation pass.
    pub terms: usize,
    #[serde(rename = "Pbar", with = "linalg::serde_matrix")]
    pub pbar: Matrix,
    #[serde(rename = "Pbar_stderr", with = "linalg::serde_opt_matrix")]
    pub pbar_stderr: Option<Matrix>,
    pub alpha: f64,
    /// Standard error of `v^T P(S) v` for the minimizing eigenvector `v` (Monte Carlo only).
    pub alpha_stderr: Option<f64>,
    pub beta: f64,
    #[serde(rename = "Qbar", with = "linalg::serde_matrix")]
    pub qbar: Matrix,
    pub kappa_qbar: f64,
    pub gamma: f64,
    #[serde(rename = "Htilde", with = "linalg::serde_matrix")]
    pub htilde: Matrix,
    #[serde(rename = "Htilde_kappa")]
    pub htilde_kappa: f64,
    #[serde(rename = "Htilde_max")]
    pub htilde_max: f64,
    pub kappa_j: f64,
    pub kappa_dem_j: f64,
    /// `0.5 max_i |(HJ)_i| / (|H~|_2 |J_i|)`.
    pub c_tilde: f64,
    /// `lambda_min(J^T H J) / tr(J^T H J)`.
    pub jhj_min_over_trace: f64,
    pub kappa_jhj: f64,
    /// `|P̄ G - G P̄|_F / (|G|_F |P̄|_F)`.
    pub commutator: f64,
    /// Relative floor applied to eigenvalues before inverse powers.
    pub eig_floor: f64,
    /// Eigenvalues of `P̄` and `G` raised to the floor.
    pub floored: usize,
}

/// Outcome of the analytic checks on a report.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReportInvariants {
    pub alpha_in_unit_interval: bool,
    pub beta_at_least_one: bool,
    pub beta_at_most_inverse_alpha: bool,
    pub gamma_at_least_inverse_kappa_qbar: bool,
    pub condition_numbers_at_least_one: bool,
    pub all: bool,
}

impl SpectralReport {
    pub fn invariants(&self) -> ReportInvariants {
        let tol = INVARIANT_TOL;
        let a = self.alpha > 0.0 && self.alpha <= 1.0 + tol;
        let b1 = self.beta >= 1.0 - tol;
        let b2 = self.beta <= 1.0 / self.alpha + tol;
        let g = self.gamma >= 1.0 / self.kappa_qbar - tol;
        let k = [self.kappa_qbar, self.htilde_kappa, self.kappa_j, self.kappa_dem_j, self.kappa_jhj]
            .iter()
            .all(|&x| x >= 1.0 - 1e-12);
        ReportInvariants {
            alpha_in_unit_interval: a,
            beta_at_least_one: b1,
            beta_at_most_inverse_alpha: b2,
            gamma_at_least_inverse_kappa_qbar: g,
            condition_numbers_at_least_one: k,
            all: a && b1 && b2 && g && k,
        }
    }
}

/// Condition-number pieces that depend on the problem only.
struct ProblemSpectra {
    g_isqrt: Matrix,
    htilde: Matrix,
    h_min: f64,
    h_max: f64,
    kappa_j: f64,
    kappa_dem_j: f64,
    c_tilde: f64,
    jhj_min_over_trace: f64,
    kappa_jhj: f64,
    floored: usize,
}

fn problem_spectra(problem: &Problem) -> ProblemSpectra {
    let g = problem.gram();
    let gp = linalg::sym_power(g, -0.5, EIG_FLOOR);
    let mut htilde = &gp.matrix * problem.jhj() * &gp.matrix;
    linalg::symmetrize(&mut htilde);
    let (h_min, h_max) = linalg::sym_extremes(&htilde);
    let (g_min, g_max) = linalg::sym_extremes(g);
    let j = problem.jacobian();
    let hj = problem.hj();
    let c_tilde = 0.5
        * (0..j.nrows())
            .filter_map(|i| {
                let jn = j.row(i).norm();
                (jn > 0.0).then(|| hj.row(i).norm() / (h_max * jn))
            })
            .fold(0.0, f64::max);
    let (x_min, x_max) = linalg::sym_extremes(problem.jhj());
    ProblemSpectra {
        g_isqrt: gp.matrix,
        htilde,
        h_min,
        h_max,
        kappa_j: (g_max / g_min).sqrt(),
        kappa_dem_j: j.norm() / g_min.sqrt(),
        c_tilde,
        jhj_min_over_trace: x_min / problem.jhj().trace(),
        kappa_jhj: x_max / x_min,
        floored: gp.floored,
    }
}

fn check_pbar(pbar: &Matrix) -> Result<(f64, f64)> {
    let (lo, hi) = linalg::sym_extremes(pbar);
    if !(lo >= EIG_FLOOR * hi) || !(hi > 0.0) {
        return Err(Error::IllConditionedPbar { min: lo, max: hi });
    }
    Ok((lo, hi))
}

/// Two passes: `P̄` first, then the second moments for `beta` and `gamma` with
/// the pass-one `P̄` plugged in. Monte Carlo passes use independent streams.
pub fn compute_report(
    problem: &Problem,
    lambda: f64,
    sampler: SamplerSpec,
    mode: &ExpectationMode,
) -> Result<SpectralReport> {
    let n = problem.n();
    let ps = problem_spectra(problem);
    let s = build_sampler(problem, sampler, lambda, mode)?;
    let j = problem.jacobian();
    let first = kernels::expect_matrix(block_projector(j, lambda), &s, mode)?;
    let pbar = first.mean;
    let (alpha, _) = check_pbar(&pbar)?;
    let (_, vecs) = linalg::sym_eig(&pbar);
    let v_min = vecs.column(0).clone_owned();

    let pis = linalg::sym_power(&pbar, -0.5, EIG_FLOOR);
    let mut qbar = &ps.g_isqrt * &pbar * &ps.g_isqrt;
    linalg::symmetrize(&mut qbar);
    let (q_min, q_max) = linalg::sym_extremes(&qbar);
    let qinv = linalg::sym_power(&qbar, -1.0, EIG_FLOOR).matrix;

    // [X^2 | G^{-1/2} P Q̄^{-1} P G^{-1/2} | v^T P v in the (0, 2n) slot]
    let stacked = |set: &SampleSet| -> Result<Matrix> {
        let p = kernels::projector(&kernels::select_rows(j, set), lambda)?;
        let x = &pis.matrix * &p * &pis.matrix;
        let gp = &ps.g_isqrt * &p;
        let y = &gp * &qinv * gp.transpose();
        let mut out = Matrix::zeros(n, 2 * n + 1);
        out.view_mut((0, 0), (n, n)).copy_from(&(&x * &x));
        out.view_mut((0, n), (n, n)).copy_from(&y);
        out[(0, 2 * n)] = v_min.dot(&(&p * &v_min));
        Ok(out)
    };
    let second = kernels::expect_matrix(stacked, &s, &mode.reseeded(1))?;
    let mut a = second.mean.view((0, 0), (n, n)).clone_owned();
    let mut b = second.mean.view((0, n), (n, n)).clone_owned();
    linalg::symmetrize(&mut a);
    linalg::symmetrize(&mut b);
    let beta = linalg::sym_extremes(&a).1;
    let gamma = 1.0 / linalg::sym_extremes(&b).1;
    let alpha_stderr = second.stderr.as_ref().map(|se| se[(0, 2 * n)]);

    let g = problem.gram();
    let commutator = (&pbar * g - g * &pbar).norm() / (g.norm() * pbar.norm());

    Ok(SpectralReport {
        lambda,
        m: problem.m(),
        n,
        k: sampler.k,
        sampler: effective_sampler(sampler, lambda),
        mode: *mode,
        terms: first.terms,
        pbar,
        pbar_stderr: first.stderr,
        alpha,
        alpha_stderr,
        beta,
        qbar,
        kappa_qbar: q_max / q_min,
        gamma,
        htilde: ps.htilde,
        htilde_kappa: ps.h_max / ps.h_min,
        htilde_max: ps.h_max,
        kappa_j: ps.kappa_j,
        kappa_dem_j: ps.kappa_dem_j,
        c_tilde: ps.c_tilde,
        jhj_min_over_trace: ps.jhj_min_over_trace,
        kappa_jhj: ps.kappa_jhj,
        commutator,
        eig_floor: EIG_FLOOR,
        floored: ps.floored + pis.floored,
    })
}

/// Spectrum of the expected step matrix `M = P̄ J^+ H J`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MSpectrum {
    pub lambda: f64,
    /// `(re, im)` pairs sorted by real part, then imaginary part.
    pub eigenvalues: Vec<(f64, f64)>,
    pub xi: f64,
}

/// `J^+ H J = G^{-1} J^T H J`.
pub fn natural_hessian(problem: &Problem) -> Result<Matrix> {
    let ch = Cholesky::new(problem.gram().clone())
        .ok_or(Error::RankDeficient { sigma_min: 0.0, sigma_max: f64::NAN })?;
    Ok(ch.solve(problem.jhj()))
}

/// `M = P̄ J^+ H J`.
pub fn expected_step_matrix(
    problem: &LlqProblem,
    lambda: f64,
    sampler: SamplerSpec,
    mode: &ExpectationMode,
) -> Result<Matrix> {
    let p = Problem::Llq(problem.clone());
    let pbar = expected_projector(&p, lambda, sampler, mode)?.mean;
    Ok(pbar * natural_hessian(&p)?)
}

fn sorted_spectrum(m: &Matrix) -> Vec<(f64, f64)> {
    let mut ev: Vec<(f64, f64)> = m.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect();
    ev.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    ev
}

pub fn spectrum_of(m: &Matrix, lambda: f64) -> MSpectrum {
    let eigenvalues = sorted_spectrum(m);
    let xi = eigenvalues.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
    MSpectrum { lambda, eigenvalues, xi }
}

pub fn m_spectrum(
    problem: &LlqProblem,
    lambda: f64,
    sampler: SamplerSpec,
    mode: &ExpectationMode,
) -> Result<MSpectrum> {
    Ok(spectrum_of(&expected_step_matrix(problem, lambda, sampler, mode)?, lambda))
}

/// Real direction in the invariant subspace of the eigenvalue with smallest real part.
///
/// Complex inverse iteration; the phase is fixed so that the largest component is
/// real, and the real part is returned normalized. Also returns the eigenvalue.
pub fn min_real_direction(m: &Matrix) -> (Complex64, Vector) {
    let n = m.nrows();
    let ev = m.complex_eigenvalues();
    let target = ev.iter().cloned().min_by(|a, b| a.re.total_cmp(&b.re)).expect("n >= 1");
    let shift = target + Complex64::new(1e-10 * (1.0 + target.norm()), 0.0);
    let mut a = m.map(|x| Complex64::new(x, 0.0));
    for i in 0..n {
        a[(i, i)] -= shift;
    }
    let lu = a.lu();
    let mut x = nalgebra::DVector::<Complex64>::from_fn(n, |i, _| Complex64::new(1.0 + i as f64 * 0.1, 0.3));
    for _ in 0..30 {
        match lu.solve(&x) {
            Some(y) => {
                let s = y.norm();
                x = y / Complex64::new(s, 0.0);
            }
            None => break,
        }
    }
    let lead = x.iter().cloned().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap();
    let phase = lead.conj() / lead.norm();
    let v = Vector::from_iterator(n, x.iter().map(|z| (z * phase).re));
    (target, v.normalize())
}

/// `xi(lambda)` over a grid.
pub fn xi_curve(
    problem: &LlqProblem,
    sampler: SamplerSpec,
    mode: &ExpectationMode,
    grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&l| m_spectrum(problem, l, sampler, mode).map(|s| (l, s.xi)))
        .collect()
}

/// Smallest grid `lambda` with `xi > 0` there and at every larger grid point,
/// or `+inf` when the largest grid point already has `xi <= 0`.
pub fn find_lambda0(problem: &LlqProblem, sampler: SamplerSpec, mode: &ExpectationMode, grid: &[f64]) -> Result<f64> {
    let mut g = grid.to_vec();
    g.sort_by(f64::total_cmp);
    let curve = xi_curve(problem, sampler, mode, &g)?;
    let mut lambda0 = f64::INFINITY;
    for &(l, xi) in curve.iter().rev() {
        if xi > 0.0 {
            lambda0 = l;
        } else {
            break;
        }
    }
    Ok(lambda0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorNorm {
    Euclidean,
    QbarInverse,
}

/// Exact expected one-step operator and its worst-case contraction factor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OperatorReport {
    pub norm: OperatorNorm,
    pub eta: f64,
    pub lambda: f64,
    #[serde(with = "linalg::serde_matrix")]
    pub operator: Matrix,
    /// `max_e E|e'|^2 / |e|^2` in `norm`.
    pub factor: f64,
}

/// Least squares: `A = E[(I - eta P)^T (I - eta P)]`, factor `lambda_max(A)`.
/// Least quadratics: `A = E[B^T Q̄^{-1} B]` with `B = I - eta P(S) J^+ H J`,
/// factor `lambda_max(Q̄^{1/2} A Q̄^{1/2})`.
pub fn one_step_operator(
    problem: &Problem,
    eta: f64,
    lambda: f64,
    sampler: SamplerSpec,
    mode: &ExpectationMode,
) -> Result<OperatorReport> {
    if !mode.is_exact() {
        return Err(Error::InvalidSpec("one-step operators require exact enumeration".into()));
    }
    let n = problem.n();
    let j = problem.jacobian();
    let s = build_sampler(problem, sampler, lambda, mode)?;
    let id = Matrix::identity(n, n);
    match problem {
        Problem::Lls(_) => {
            let f = |set: &SampleSet| -> Result<Matrix> {
                let b = &id - kernels::projector(&kernels::select_rows(j, set), lambda)? * eta;
                Ok(b.transpose() * b)
            };
            let mut a = kernels::expect_matrix(f, &s, mode)?.mean;
            linalg::symmetrize(&mut a);
            let factor = linalg::sym_extremes(&a).1;
            Ok(OperatorReport { norm: OperatorNorm::Euclidean, eta, lambda, operator: a, factor })
        }
        Problem::Llq(_) => {
            let pbar = kernels::expect_matrix(block_projector(j, lambda), &s, mode)?.mean;
            check_pbar(&pbar)?;
            let gis = linalg::sym_power(problem.gram(), -0.5, EIG_FLOOR).matrix;
            let mut qbar = &gis * &pbar * &gis;
            linalg::symmetrize(&mut qbar);
            let qinv = linalg::sym_power(&qbar, -1.0, EIG_FLOOR).matrix;
            let qsqrt = linalg::sym_power(&qbar, 0.5, 0.0).matrix;
            let nat = natural_hessian(problem)?;
            let f = |set: &SampleSet| -> Result<Matrix> {
                let p = kernels::projector(&kernels::select_rows(j, set), lambda)?;
                let b = &id - p * &nat * eta;
                Ok(b.transpose() * &qinv * b)
            };
            let mut a = kernels::expect_matrix(f, &s, mode)?.mean;
            linalg::symmetrize(&mut a);
            let mut c = &qsqrt * &a * &qsqrt;
            linalg::symmetrize(&mut c);
            let factor = linalg::sym_extremes(&c).1;
            Ok(OperatorReport { norm: OperatorNorm::QbarInverse, eta, lambda, operator: a, factor })
        }
    }
}

/// Per-step contraction predictions and the SGD rate ceiling.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RatePredictions {
    /// `1 - alpha`.
    pub sngd_lls: f64,
    /// `1 - sqrt(alpha / beta)`.
    pub spring_lls: f64,
    /// `1 - alpha gamma / kappa(H~)`.
    pub sngd_llq: f64,
    /// `1 - 1 / kappa(H~)`.
    pub ngd: f64,
    /// `C~ kappa(H~) k lambda_min(J^T H J) / tr(J^T H J) / kappa(J^T H J)`.
    pub alpha_sgd_bound: f64,
}

pub fn rate_predictors(r: &SpectralReport) -> RatePredictions {
    RatePredictions {
        sngd_lls: 1.0 - r.alpha,
        spring_lls: 1.0 - (r.alpha / r.beta).sqrt(),
        sngd_llq: 1.0 - r.alpha * r.gamma / r.htilde_kappa,
        ngd: 1.0 - 1.0 / r.htilde_kappa,
        alpha_sgd_bound: r.c_tilde * r.htilde_kappa * r.k as f64 * r.jhj_min_over_trace / r.kappa_jhj,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{self, GeneratorKind, GeneratorSpec, ProblemType};

    fn gaussian(m: usize, n: usize, seed: u64, ty: ProblemType) -> Problem {
        let spec = GeneratorSpec::new(GeneratorKind::GaussianRows, m, n, seed).with_kappas(1.0, 10.0);
        problems::generate(&spec, ty).unwrap()
    }

    #[test]
    fn full_batch_report_is_trivial() {
        let p = gaussian(6, 3, 1, ProblemType::Lls);
        let r = compute_report(&p, 0.0, SamplerSpec::uniform(6), &ExpectationMode::exact()).unwrap();
        assert!((r.alpha - 1.0).abs() < 1e-12 && (r.beta - 1.0).abs() < 1e-12);
        assert!((r.gamma - 1.0).abs() < 1e-10);
        assert!(r.invariants().all);
        let pred = rate_predictors(&r);
        assert!(pred.sngd_lls.abs() < 1e-12 && pred.spring_lls.abs() < 1e-6 && pred.ngd.abs() < 1e-12);
    }

    #[test]
    fn orthonormal_rows_give_uniform_pbar() {
        let j = Matrix::identity(4, 4);
        let theta = Vector::from_element(4, 1.0);
        let b = &j * &theta;
        let p: Problem = problems::LlsProblem::new(j, b, theta, None).unwrap().into();
        let r = compute_report(&p, 0.0, SamplerSpec::uniform(1), &ExpectationMode::exact()).unwrap();
        assert!((r.pbar - Matrix::identity(4, 4) / 4.0).norm() < 1e-15);
        assert!((r.alpha - 0.25).abs() < 1e-15);
    }

    #[test]
    fn monte_carlo_alpha_agrees_with_exact() {
        let p = gaussian(8, 3, 2, ProblemType::Lls);
        let exact = compute_report(&p, 0.0, SamplerSpec::uniform(2), &ExpectationMode::exact()).unwrap();
        let mc = compute_report(&p, 0.0, SamplerSpec::uniform(2), &ExpectationMode::monte_carlo(100_000, 5)).unwrap();
        let se = mc.alpha_stderr.unwrap();
        assert!((mc.alpha - exact.alpha).abs() <= 4.0 * se, "{} vs {} (se {se})", mc.alpha, exact.alpha);
    }

    #[test]
    fn ill_conditioned_pbar_rejected() {
        // nearly parallel rows: full rank, but single-row projectors all point along e1
        let j = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1e-8, 1.0, -1e-8]);
        let theta = Vector::from_element(2, 1.0);
        let b = &j * &theta;
        let p: Problem = problems::LlsProblem::new(j, b, theta, None).unwrap().into();
        let err = compute_report(&p, 0.0, SamplerSpec::uniform(1), &ExpectationMode::exact()).unwrap_err();
        assert!(matches!(err, Error::IllConditionedPbar { .. }));
    }

    #[test]
    fn full_batch_m_is_similar_to_htilde() {
        let p = gaussian(6, 3, 4, ProblemType::Llq);
        let q = p.as_llq().unwrap();
        let s = m_spectrum(q, 0.0, SamplerSpec::uniform(6), &ExpectationMode::exact()).unwrap();
        assert!(s.xi > 0.0);
        let r = compute_report(&p, 0.0, SamplerSpec::uniform(6), &ExpectationMode::exact()).unwrap();
        let (hv, _) = linalg::sym_eig(&r.htilde);
        for (e, h) in s.eigenvalues.iter().zip(hv.iter()) {
            assert!((e.0 - h).abs() < 1e-10 && e.1.abs() < 1e-10);
        }
    }

    #[test]
    fn large_lambda_symmetric_limit() {
        let p = gaussian(6, 3, 5, ProblemType::Llq);
        let q = p.as_llq().unwrap();
        let lambda = 1e6 * linalg::spectral_norm(p.jacobian()).powi(2);
        let m = expected_step_matrix(q, lambda, SamplerSpec::uniform(2), &ExpectationMode::exact()).unwrap();
        let lhs = (&m + m.transpose()) * lambda;
        let rhs = p.jhj() * (2.0 * 2.0 / 6.0);
        assert!((lhs - rhs).norm() <= 1e-3 * p.jhj().norm());
        assert!(spectrum_of(&m, lambda).xi > 0.0);
    }

    #[test]
    fn lambda0_search() {
        let p = gaussian(6, 3, 6, ProblemType::Llq);
        let q = p.as_llq().unwrap();
        let grid = [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0];
        let l0 = find_lambda0(q, SamplerSpec::uniform(1), &ExpectationMode::exact(), &grid).unwrap();
        let curve = xi_curve(q, SamplerSpec::uniform(1), &ExpectationMode::exact(), &grid).unwrap();
        if curve[0].1 > 0.0 && curve.iter().all(|c| c.1 > 0.0) {
            assert_eq!(l0, 1e-3);
        }
        if l0.is_finite() {
            assert!(m_spectrum(q, l0, SamplerSpec::uniform(1), &ExpectationMode::exact()).unwrap().xi > 0.0);
        }
    }

    #[test]
    fn min_real_direction_is_eigenvector() {
        let m = Matrix::from_row_slice(3, 3, &[1.0, -2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, -0.5]);
        let (z, v) = min_real_direction(&m);
        assert!((z.re + 0.5).abs() < 1e-12);
        assert!((&m * &v + &v * 0.5).norm() < 1e-8);
    }

    #[test]
    fn zero_step_operator_is_identity() {
        for ty in [ProblemType::Lls, ProblemType::Llq] {
            let p = gaussian(6, 3, 7, ty);
            let r = one_step_operator(&p, 0.0, 0.0, SamplerSpec::uniform(2), &ExpectationMode::exact()).unwrap();
            assert!((r.factor - 1.0).abs() < 1e-10, "{:?}", r.norm);
        }
    }

    #[test]
    fn lls_operator_matches_alpha_bound() {
        let p = gaussian(8, 3, 8, ProblemType::Lls);
        let r = compute_report(&p, 0.0, SamplerSpec::uniform(2), &ExpectationMode::exact()).unwrap();
        let op = one_step_operator(&p, 1.0, 0.0, SamplerSpec::uniform(2), &ExpectationMode::exact()).unwrap();
        // lambda = 0: P(S) is a projector and E[(I-P)^2] = I - P̄ exactly
        assert!((op.factor - (1.0 - r.alpha)).abs() < 1e-12);
    }

    #[test]
    fn one_step_requires_exact() {
        let p = gaussian(8, 3, 8, ProblemType::Lls);
        assert!(one_step_operator(&p, 1.0, 0.0, SamplerSpec::uniform(2), &ExpectationMode::monte_carlo(10, 0)).is_err());
    }
}
