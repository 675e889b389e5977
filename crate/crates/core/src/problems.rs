//! Problem instances and their generators.
//!
//! Two model problems share a linear model `v = J theta`:
//!
//! * [`LlsProblem`]: least squares, loss `0.5 * |J theta - b|^2`.
//! * [`LlqProblem`]: least quadratics, loss `0.5 v^T H v + q^T v + c` with `H` SPD.
//!
//! Constructors validate the rank and consistency invariants, so any value of
//! these types (including ones read back from JSON) is a certified instance.

use nalgebra::Cholesky;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_matrix, serde_vector, Matrix, Vector};
use crate::rng;

/// Relative singular value threshold below which `J` is declared rank deficient.
pub const RANK_TOL: f64 = 1e-12;
/// Relative tolerance on both consistency residuals.
pub const CONS_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    GaussianRows,
    SvdConditioned,
    DiagForSketch,
}

/// Parameters of a random instance. Generation is a pure function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub m: usize,
    pub n: usize,
    /// Polynomial decay of the row covariance spectrum, `sigma_i = i^(-decay) sigma_1`.
    #[serde(default)]
    pub decay_exponent: f64,
    #[serde(default = "one")]
    pub kappa_j: f64,
    /// Condition number of the projected Hessian.
    #[serde(default = "one")]
    pub kappa_h: f64,
    #[serde(default)]
    pub seed: u64,
    /// Geometric ratio between consecutive diagonal entries (diag_for_sketch only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometric_ratio: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind, m: usize, n: usize, seed: u64) -> Self {
        Self {
            kind,
            m,
            n,
            decay_exponent: 0.0,
            kappa_j: 1.0,
            kappa_h: 1.0,
            seed,
            geometric_ratio: None,
        }
    }

    pub fn with_decay(mut self, decay: f64) -> Self {
        self.decay_exponent = decay;
        self
    }

    pub fn with_kappas(mut self, kappa_j: f64, kappa_h: f64) -> Self {
        self.kappa_j = kappa_j;
        self.kappa_h = kappa_h;
        self
    }

    pub fn with_ratio(mut self, ratio: f64) -> Self {
        self.geometric_ratio = Some(ratio);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("n must be at least 1".into()));
        }
        if self.m < self.n {
            return Err(Error::InvalidSpec(format!(
                "m = {} is smaller than n = {}; J cannot have full column rank",
                self.m, self.n
            )));
        }
        if !(self.kappa_j >= 1.0) || !(self.kappa_h >= 1.0) {
            return Err(Error::InvalidSpec(format!(
                "condition numbers must be >= 1 (kappa_j = {}, kappa_h = {})",
                self.kappa_j, self.kappa_h
            )));
        }
        if !(self.decay_exponent >= 0.0) || !self.decay_exponent.is_finite() {
            return Err(Error::InvalidSpec("decay_exponent must be finite and >= 0".into()));
        }
        if let Some(r) = self.geometric_ratio {
            if !(r > 0.0) || !r.is_finite() {
                return Err(Error::InvalidSpec("geometric_ratio must be positive".into()));
            }
        }
        Ok(())
    }

    fn expect_kind(&self, kind: GeneratorKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::InvalidSpec(format!(
                "generator expects kind {:?}, got {:?}",
                kind, self.kind
            )));
        }
        self.validate()
    }
}

/// Function-space Hessian of an LLQ instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Hessian {
    Dense {
        #[serde(with = "serde_matrix")]
        matrix: Matrix,
    },
    /// `H = scale * I + basis * core * basis^T` with orthonormal `basis` columns.
    ///
    /// This is the block form `U A U^T + scale * U_perp U_perp^T` with
    /// `core = A - scale * I`, stored without the `m x m` complement.
    LowRankUpdate {
        scale: f64,
        #[serde(with = "serde_matrix")]
        basis: Matrix,
        #[serde(with = "serde_matrix")]
        core: Matrix,
    },
}

impl Hessian {
    pub fn dim(&self) -> usize {
        match self {
            Hessian::Dense { matrix } => matrix.nrows(),
            Hessian::LowRankUpdate { basis, .. } => basis.nrows(),
        }
    }

    /// Identity of size `m`.
    pub fn identity(m: usize) -> Self {
        Hessian::Dense { matrix: Matrix::identity(m, m) }
    }

    /// `H v`.
    pub fn apply(&self, v: &Vector) -> Vector {
        match self {
            Hessian::Dense { matrix } => matrix * v,
            Hessian::LowRankUpdate { scale, basis, core } => {
                let coeff = core * (basis.transpose() * v);
                v * *scale + basis * coeff
            }
        }
    }

    /// `H X` for a matrix with `m` rows.
    pub fn apply_matrix(&self, x: &Matrix) -> Matrix {
        match self {
            Hessian::Dense { matrix } => matrix * x,
            Hessian::LowRankUpdate { scale, basis, core } => {
                let coeff = core * (basis.transpose() * x);
                x * *scale + basis * coeff
            }
        }
    }

    /// Dense `m x m` copy.
    pub fn to_dense(&self) -> Matrix {
        match self {
            Hessian::Dense { matrix } => matrix.clone(),
            Hessian::LowRankUpdate { scale, basis, core } => {
                let m = basis.nrows();
                let mut h = Matrix::identity(m, m) * *scale + basis * core * basis.transpose();
                linalg::symmetrize(&mut h);
                h
            }
        }
    }

    /// Smallest eigenvalue.
    pub fn min_eigenvalue(&self) -> f64 {
        match self {
            Hessian::Dense { matrix } => linalg::sym_extremes(matrix).0,
            Hessian::LowRankUpdate { scale, basis, core } => {
                let r = basis.ncols();
                let inner = Matrix::identity(r, r) * *scale + core;
                let lo = linalg::sym_extremes(&inner).0;
                if basis.nrows() > r {
                    lo.min(*scale)
                } else {
                    lo
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Hessian::Dense { matrix } => {
                if matrix.nrows() != matrix.ncols() {
                    return Err(Error::Dimension("H must be square".into()));
                }
                let asym = (matrix - matrix.transpose()).norm();
                if asym > 1e-12 * matrix.norm() {
                    return Err(Error::InvalidSpec(format!("H is not symmetric ({asym:e})")));
                }
            }
            Hessian::LowRankUpdate { basis, core, .. } => {
                let r = basis.ncols();
                if core.nrows() != r || core.ncols() != r {
                    return Err(Error::Dimension("core must be r x r for an m x r basis".into()));
                }
                let gram = basis.transpose() * basis;
                let dev = (gram - Matrix::identity(r, r)).norm();
                if dev > 1e-10 {
                    return Err(Error::InvalidSpec(format!(
                        "low-rank basis is not orthonormal ({dev:e})"
                    )));
                }
                let asym = (core - core.transpose()).norm();
                if asym > 1e-12 * core.norm().max(1.0) {
                    return Err(Error::InvalidSpec(format!("core is not symmetric ({asym:e})")));
                }
            }
        }
        let lo = self.min_eigenvalue();
        if !(lo > 0.0) {
            return Err(Error::NotPositiveDefinite { min_eig: lo });
        }
        Ok(())
    }
}

/// Singular values of a tall matrix, ascending-agnostic, via thin QR then SVD of `R`.
fn singular_values(j: &Matrix) -> Vec<f64> {
    if j.nrows() > j.ncols() {
        let r = j.clone().qr().r();
        r.singular_values().iter().cloned().collect()
    } else {
        j.clone().singular_values().iter().cloned().collect()
    }
}

fn check_rank(j: &Matrix) -> Result<()> {
    let sv = singular_values(j);
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || !(min > RANK_TOL * max) || sv.len() < j.ncols() {
        return Err(Error::RankDeficient { sigma_min: min, sigma_max: max });
    }
    Ok(())
}

/// Relative consistency residual `|r| / |reference|` with a zero-safe denominator.
fn relative(residual: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        residual / reference
    } else if residual == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LlsRepr {
    #[serde(with = "serde_matrix")]
    j: Matrix,
    #[serde(with = "serde_vector")]
    b: Vector,
    #[serde(with = "serde_vector")]
    theta_star: Vector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<GeneratorSpec>,
}

/// Consistent linear least-squares instance `J theta* = b`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "LlsRepr", into = "LlsRepr")]
pub struct LlsProblem {
    j: Matrix,
    b: Vector,
    theta_star: Vector,
    generator: Option<GeneratorSpec>,
    gram: Matrix,
    jtb: Vector,
    b_sq: f64,
}

impl TryFrom<LlsRepr> for LlsProblem {
    type Error = Error;
    fn try_from(r: LlsRepr) -> Result<Self> {
        LlsProblem::new(r.j, r.b, r.theta_star, r.generator)
    }
}

impl From<LlsProblem> for LlsRepr {
    fn from(p: LlsProblem) -> Self {
        LlsRepr { j: p.j, b: p.b, theta_star: p.theta_star, generator: p.generator }
    }
}

impl LlsProblem {
    pub fn new(j: Matrix, b: Vector, theta_star: Vector, generator: Option<GeneratorSpec>) -> Result<Self> {
        let (m, n) = j.shape();
        if b.len() != m || theta_star.len() != n {
            return Err(Error::Dimension(format!(
                "J is {m}x{n}, b has {} entries, theta* has {}",
                b.len(),
                theta_star.len()
            )));
        }
        if m < n || n == 0 {
            return Err(Error::Dimension(format!("need m >= n >= 1, got {m}x{n}")));
        }
        check_rank(&j)?;
        let res = relative((&j * &theta_star - &b).norm(), b.norm());
        if !(res <= CONS_TOL) {
            return Err(Error::Inconsistent { what: "J theta* - b", residual: res, tol: CONS_TOL });
        }
        let mut gram = j.transpose() * &j;
        linalg::symmetrize(&mut gram);
        let jtb = j.transpose() * &b;
        let b_sq = b.norm_squared();
        Ok(Self { j, b, theta_star, generator, gram, jtb, b_sq })
    }

    pub fn jacobian(&self) -> &Matrix {
        &self.j
    }
    pub fn b(&self) -> &Vector {
        &self.b
    }
    pub fn theta_star(&self) -> &Vector {
        &self.theta_star
    }
    pub fn generator(&self) -> Option<&GeneratorSpec> {
        self.generator.as_ref()
    }
    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    /// `J_S theta - b_S`.
    pub fn gradient_rows(&self, theta: &Vector, rows: &[usize]) -> Vector {
        Vector::from_iterator(
            rows.len(),
            rows.iter().map(|&i| self.j.row(i).dot(&theta.transpose()) - self.b[i]),
        )
    }

    pub fn loss(&self, theta: &Vector) -> f64 {
        0.5 * theta.dot(&(&self.gram * theta)) - self.jtb.dot(theta) + 0.5 * self.b_sq
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LlqRepr {
    #[serde(with = "serde_matrix")]
    j: Matrix,
    h: Hessian,
    #[serde(with = "serde_vector")]
    q: Vector,
    #[serde(default)]
    c: f64,
    #[serde(with = "serde_vector")]
    theta_star: Vector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<GeneratorSpec>,
}

/// Strongly consistent linear least-quadratics instance.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "LlqRepr", into = "LlqRepr")]
pub struct LlqProblem {
    j: Matrix,
    h: Hessian,
    q: Vector,
    c: f64,
    theta_star: Vector,
    generator: Option<GeneratorSpec>,
    gram: Matrix,
    jhj: Matrix,
    hj: Matrix,
    jtq: Vector,
    /// `basis^T J` for the low-rank Hessian form.
    basis_j: Option<Matrix>,
}

impl TryFrom<LlqRepr> for LlqProblem {
    type Error = Error;
    fn try_from(r: LlqRepr) -> Result<Self> {
        LlqProblem::new(r.j, r.h, r.q, r.c, r.theta_star, r.generator)
    }
}

impl From<LlqProblem> for LlqRepr {
    fn from(p: LlqProblem) -> Self {
        LlqRepr { j: p.j, h: p.h, q: p.q, c: p.c, theta_star: p.theta_star, generator: p.generator }
    }
}

/// Both strong-consistency residuals of an LLQ instance, relative.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConsistencyResiduals {
    /// `|H J theta* + q| / |q|`.
    pub minimizer: f64,
    /// `|(I - J J^+) H J|_F / |H J|_F`.
    pub range: f64,
}

impl LlqProblem {
    pub fn new(
        j: Matrix,
        h: Hessian,
        q: Vector,
        c: f64,
        theta_star: Vector,
        generator: Option<GeneratorSpec>,
    ) -> Result<Self> {
        let (m, n) = j.shape();
        if h.dim() != m || q.len() != m || theta_star.len() != n {
            return Err(Error::Dimension(format!(
                "J is {m}x{n}, H is {0}x{0}, q has {1}, theta* has {2}",
                h.dim(),
                q.len(),
                theta_star.len()
            )));
        }
        if m < n || n == 0 {
            return Err(Error::Dimension(format!("need m >= n >= 1, got {m}x{n}")));
        }
        h.validate()?;
        check_rank(&j)?;
        let hj = h.apply_matrix(&j);
        let mut problem = Self {
            gram: Matrix::zeros(0, 0),
            jhj: Matrix::zeros(0, 0),
            jtq: j.transpose() * &q,
            basis_j: match &h {
                Hessian::LowRankUpdate { basis, .. } => Some(basis.transpose() * &j),
                Hessian::Dense { .. } => None,
            },
            hj,
            j,
            h,
            q,
            c,
            theta_star,
            generator,
        };
        let res = problem.consistency_residuals();
        if !(res.minimizer <= CONS_TOL) {
            return Err(Error::Inconsistent {
                what: "H J theta* + q",
                residual: res.minimizer,
                tol: CONS_TOL,
            });
        }
        if !(res.range <= CONS_TOL) {
            return Err(Error::Inconsistent {
                what: "(I - J J^+) H J",
                residual: res.range,
                tol: CONS_TOL,
            });
        }
        let mut gram = problem.j.transpose() * &problem.j;
        linalg::symmetrize(&mut gram);
        let mut jhj = problem.j.transpose() * &problem.hj;
        linalg::symmetrize(&mut jhj);
        problem.gram = gram;
        problem.jhj = jhj;
        Ok(problem)
    }

    /// Residuals of both strong-consistency conditions, evaluated from scratch.
    pub fn consistency_residuals(&self) -> ConsistencyResiduals {
        let grad_star = &self.hj * &self.theta_star + &self.q;
        let minimizer = relative(grad_star.norm(), self.q.norm());
        let basis = linalg::orthonormal_columns(&self.j);
        let outside = &self.hj - &basis * (basis.transpose() * &self.hj);
        let range = relative(outside.norm(), self.hj.norm());
        ConsistencyResiduals { minimizer, range }
    }

    pub fn jacobian(&self) -> &Matrix {
        &self.j
    }
    pub fn hessian(&self) -> &Hessian {
        &self.h
    }
    pub fn q(&self) -> &Vector {
        &self.q
    }
    pub fn c(&self) -> f64 {
        self.c
    }
    pub fn theta_star(&self) -> &Vector {
        &self.theta_star
    }
    pub fn generator(&self) -> Option<&GeneratorSpec> {
        self.generator.as_ref()
    }
    pub fn gram(&self) -> &Matrix {
        &self.gram
    }
    /// `J^T H J`.
    pub fn jhj(&self) -> &Matrix {
        &self.jhj
    }
    /// `H J`.
    pub fn hj(&self) -> &Matrix {
        &self.hj
    }

    /// Rows `S` of the function-space gradient, computed as `H_S (J theta) + q_S`.
    pub fn gradient_rows(&self, theta: &Vector, rows: &[usize]) -> Vector {
        match (&self.h, &self.basis_j) {
            (Hessian::LowRankUpdate { scale, basis, core }, Some(bj)) => {
                // H_S (J theta) = scale (J theta)_S + basis_S core basis^T J theta
                let coeff = core * (bj * theta);
                Vector::from_iterator(
                    rows.len(),
                    rows.iter().map(|&i| {
                        scale * self.j.row(i).dot(&theta.transpose())
                            + basis.row(i).dot(&coeff.transpose())
                            + self.q[i]
                    }),
                )
            }
            (Hessian::Dense { matrix }, _) => {
                let v = &self.j * theta;
                Vector::from_iterator(
                    rows.len(),
                    rows.iter().map(|&i| matrix.row(i).dot(&v.transpose()) + self.q[i]),
                )
            }
            _ => unreachable!("low-rank Hessian always carries basis^T J"),
        }
    }

    /// Full function-space gradient `H J theta + q`.
    pub fn full_gradient(&self, theta: &Vector) -> Vector {
        self.h.apply(&(&self.j * theta)) + &self.q
    }

    pub fn loss(&self, theta: &Vector) -> f64 {
        0.5 * theta.dot(&(&self.jhj * theta)) + self.jtq.dot(theta) + self.c
    }
}

/// Either model problem.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Problem {
    Lls(LlsProblem),
    Llq(LlqProblem),
}

impl From<LlsProblem> for Problem {
    fn from(p: LlsProblem) -> Self {
        Problem::Lls(p)
    }
}

impl From<LlqProblem> for Problem {
    fn from(p: LlqProblem) -> Self {
        Problem::Llq(p)
    }
}

impl Problem {
    pub fn jacobian(&self) -> &Matrix {
        match self {
            Problem::Lls(p) => p.jacobian(),
            Problem::Llq(p) => p.jacobian(),
        }
    }
    pub fn theta_star(&self) -> &Vector {
        match self {
            Problem::Lls(p) => p.theta_star(),
            Problem::Llq(p) => p.theta_star(),
        }
    }
    pub fn gram(&self) -> &Matrix {
        match self {
            Problem::Lls(p) => p.gram(),
            Problem::Llq(p) => p.gram(),
        }
    }
    pub fn m(&self) -> usize {
        self.jacobian().nrows()
    }
    pub fn n(&self) -> usize {
        self.jacobian().ncols()
    }
    pub fn as_lls(&self) -> Option<&LlsProblem> {
        match self {
            Problem::Lls(p) => Some(p),
            Problem::Llq(_) => None,
        }
    }
    pub fn as_llq(&self) -> Option<&LlqProblem> {
        match self {
            Problem::Llq(p) => Some(p),
            Problem::Lls(_) => None,
        }
    }

    /// Rows `S` of the function-space gradient.
    pub fn gradient_rows(&self, theta: &Vector, rows: &[usize]) -> Vector {
        match self {
            Problem::Lls(p) => p.gradient_rows(theta, rows),
            Problem::Llq(p) => p.gradient_rows(theta, rows),
        }
    }

    /// Full function-space gradient (length `m`).
    pub fn full_gradient(&self, theta: &Vector) -> Vector {
        match self {
            Problem::Lls(p) => p.jacobian() * theta - p.b(),
            Problem::Llq(p) => p.full_gradient(theta),
        }
    }

    /// `J^T H J` (the Gram matrix for least squares).
    pub fn jhj(&self) -> &Matrix {
        match self {
            Problem::Lls(p) => p.gram(),
            Problem::Llq(p) => p.jhj(),
        }
    }

    /// `H J` (`J` for least squares).
    pub fn hj(&self) -> &Matrix {
        match self {
            Problem::Lls(p) => p.jacobian(),
            Problem::Llq(p) => p.hj(),
        }
    }

    pub fn loss(&self, theta: &Vector) -> f64 {
        match self {
            Problem::Lls(p) => p.loss(theta),
            Problem::Llq(p) => p.loss(theta),
        }
    }

    pub fn generator(&self) -> Option<&GeneratorSpec> {
        match self {
            Problem::Lls(p) => p.generator(),
            Problem::Llq(p) => p.generator(),
        }
    }
}

fn gaussian_matrix(rng: &mut rng::Rng, rows: usize, cols: usize) -> Matrix {
    // Row-major draw order so that the stream does not depend on storage layout.
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(rng.sample::<f64, _>(StandardNormal));
    }
    Matrix::from_row_slice(rows, cols, &data)
}

fn gaussian_vector(rng: &mut rng::Rng, len: usize) -> Vector {
    Vector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn random_orthogonal(rng: &mut rng::Rng, n: usize) -> Matrix {
    linalg::orthonormal_columns(&gaussian_matrix(rng, n, n))
}

/// Geometric spectrum from 1 down to `1/kappa` over `n` values.
fn geometric_spectrum(n: usize, kappa: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n).map(|i| kappa.powf(-(i as f64) / (n - 1) as f64)).collect()
}

/// Covariance eigenvalues `i^(-decay)` for `i = 1..n`.
pub fn covariance_spectrum(n: usize, decay: f64) -> Vec<f64> {
    (1..=n).map(|i| (i as f64).powf(-decay)).collect()
}

fn gaussian_rows(spec: &GeneratorSpec, rng: &mut rng::Rng) -> Matrix {
    let scales: Vec<f64> = covariance_spectrum(spec.n, spec.decay_exponent)
        .into_iter()
        .map(f64::sqrt)
        .collect();
    let mut j = gaussian_matrix(rng, spec.m, spec.n);
    for (c, s) in scales.iter().enumerate() {
        j.column_mut(c).scale_mut(*s);
    }
    j
}

/// SPD `n x n` matrix `W diag(a) W^T` with geometric spectrum in `[1/kappa, 1]`.
fn random_spd(rng: &mut rng::Rng, n: usize, kappa: f64) -> Matrix {
    let w = random_orthogonal(rng, n);
    let a = Vector::from_vec(geometric_spectrum(n, kappa));
    let mut m = &w * Matrix::from_diagonal(&a) * w.transpose();
    linalg::symmetrize(&mut m);
    m
}

/// `H = U A U^T + U_perp U_perp^T`, which leaves `range(U)` invariant.
fn block_hessian(basis: Matrix, a: Matrix) -> Hessian {
    let r = a.nrows();
    let core = a - Matrix::identity(r, r);
    Hessian::LowRankUpdate { scale: 1.0, basis, core }
}

/// Least-squares instance with i.i.d. Gaussian rows of covariance `diag(i^(-decay))`.
pub fn gen_gaussian_lls(spec: &GeneratorSpec) -> Result<LlsProblem> {
    spec.expect_kind(GeneratorKind::GaussianRows)?;
    let mut rng = rng::seeded(spec.seed);
    let j = gaussian_rows(spec, &mut rng);
    let theta_star = gaussian_vector(&mut rng, spec.n);
    let b = &j * &theta_star;
    LlsProblem::new(j, b, theta_star, Some(spec.clone()))
}

/// Least-quadratics instance with Gaussian rows and a strongly consistent Hessian
/// whose projection has condition number `kappa_h`.
pub fn gen_gaussian_llq(spec: &GeneratorSpec) -> Result<LlqProblem> {
    spec.expect_kind(GeneratorKind::GaussianRows)?;
    let mut rng = rng::seeded(spec.seed);
    let j = gaussian_rows(spec, &mut rng);
    let theta_star = gaussian_vector(&mut rng, spec.n);
    let a = random_spd(&mut rng, spec.n, spec.kappa_h);
    let h = block_hessian(linalg::orthonormal_columns(&j), a);
    finish_llq(j, h, theta_star, spec)
}

fn conditioned_jacobian(spec: &GeneratorSpec, rng: &mut rng::Rng) -> (Matrix, Matrix) {
    let u = linalg::orthonormal_columns(&gaussian_matrix(rng, spec.m, spec.n));
    let v = random_orthogonal(rng, spec.n);
    let s = Vector::from_vec(geometric_spectrum(spec.n, spec.kappa_j));
    let j = &u * Matrix::from_diagonal(&s) * v.transpose();
    (j, u)
}

/// Least-quadratics instance `J = U S V^T` with `kappa(J) = kappa_j` and
/// `kappa(H~) = kappa_h`; both consistency conditions hold by construction.
pub fn gen_conditioned_llq(spec: &GeneratorSpec) -> Result<LlqProblem> {
    spec.expect_kind(GeneratorKind::SvdConditioned)?;
    let mut rng = rng::seeded(spec.seed);
    let (j, u) = conditioned_jacobian(spec, &mut rng);
    let theta_star = gaussian_vector(&mut rng, spec.n);
    let a = random_spd(&mut rng, spec.n, spec.kappa_h);
    finish_llq(j, block_hessian(u, a), theta_star, spec)
}

/// Least-squares instance with the conditioned Jacobian of [`gen_conditioned_llq`].
pub fn gen_conditioned_lls(spec: &GeneratorSpec) -> Result<LlsProblem> {
    spec.expect_kind(GeneratorKind::SvdConditioned)?;
    let mut rng = rng::seeded(spec.seed);
    let (j, _) = conditioned_jacobian(spec, &mut rng);
    let theta_star = gaussian_vector(&mut rng, spec.n);
    let b = &j * &theta_star;
    LlsProblem::new(j, b, theta_star, Some(spec.clone()))
}

fn finish_llq(j: Matrix, h: Hessian, theta_star: Vector, spec: &GeneratorSpec) -> Result<LlqProblem> {
    let q = -h.apply(&(&j * &theta_star));
    LlqProblem::new(j, h, q, 0.0, theta_star, Some(spec.clone()))
}

/// Diagonal matrix with nonincreasing positive entries for Gaussian-sketch studies.
///
/// With `geometric_ratio = r` the entries are `r^(n-1), ..., r, 1`; otherwise they
/// follow `d_i = i^(-decay)`.
pub fn gen_diag_sketch(spec: &GeneratorSpec) -> Result<Matrix> {
    if spec.kind != GeneratorKind::DiagForSketch {
        return Err(Error::InvalidSpec(format!(
            "generator expects kind DiagForSketch, got {:?}",
            spec.kind
        )));
    }
    spec.validate()?;
    let n = spec.n;
    let d: Vec<f64> = match spec.geometric_ratio {
        Some(r) => (0..n).map(|i| r.powi((n - 1 - i) as i32)).collect(),
        None => covariance_spectrum(n, spec.decay_exponent),
    };
    Ok(Matrix::from_diagonal(&Vector::from_vec(d)))
}

/// Which model to generate from a spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProblemType {
    #[default]
    Lls,
    Llq,
}

/// Generate a problem of the requested type from a spec.
pub fn generate(spec: &GeneratorSpec, ty: ProblemType) -> Result<Problem> {
    match (spec.kind, ty) {
        (GeneratorKind::GaussianRows, ProblemType::Lls) => gen_gaussian_lls(spec).map(Into::into),
        (GeneratorKind::GaussianRows, ProblemType::Llq) => gen_gaussian_llq(spec).map(Into::into),
        (GeneratorKind::SvdConditioned, ProblemType::Lls) => gen_conditioned_lls(spec).map(Into::into),
        (GeneratorKind::SvdConditioned, ProblemType::Llq) => gen_conditioned_llq(spec).map(Into::into),
        (GeneratorKind::DiagForSketch, _) => Err(Error::InvalidSpec(
            "diag_for_sketch produces a diagonal matrix, not a problem".into(),
        )),
    }
}

/// Cholesky-based SPD check used by tests and callers that hold a dense `H`.
pub fn is_spd(a: &Matrix) -> bool {
    Cholesky::new(a.clone()).is_some()
}
