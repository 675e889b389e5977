//! Row sampling, regularized pseudoinverses and expectations over sampled blocks.

use nalgebra::Cholesky;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::rng::{self, Rng};

/// Singular values below `PINV_CUTOFF * sigma_max` are dropped by the fallback pseudoinverse.
pub const PINV_CUTOFF: f64 = 1e-12;
/// Default cap on the number of subsets enumerated exactly.
pub const DEFAULT_ENUMERATION_BUDGET: u64 = 200_000;
/// Terms per reduction chunk; the reduction tree depends only on this and the term count.
const CHUNK: usize = 256;

/// Sorted, duplicate-free row indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SampleSet(Vec<usize>);

impl SampleSet {
    pub fn new(mut indices: Vec<usize>, m: usize) -> Result<Self> {
        indices.sort_unstable();
        let set = SampleSet(indices);
        set.check(m)?;
        Ok(set)
    }

    /// `{0, ..., m-1}`.
    pub fn full(m: usize) -> Self {
        SampleSet((0..m).collect())
    }

    fn check(&self, m: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidSpec("sample set must be nonempty".into()));
        }
        if self.0.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec("sample indices must be distinct".into()));
        }
        if *self.0.last().unwrap() >= m {
            return Err(Error::InvalidSpec(format!("sample index out of range for m = {m}")));
        }
        Ok(())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }
}

impl TryFrom<Vec<usize>> for SampleSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        let set = SampleSet(v);
        set.check(usize::MAX)?;
        Ok(set)
    }
}

impl From<SampleSet> for Vec<usize> {
    fn from(s: SampleSet) -> Self {
        s.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    UniformWithoutReplacement,
    KDpp,
}

/// Distribution of the mini-batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub k: usize,
    /// Regularization inside the k-DPP kernel `det(J_S J_S^T + lambda I)`.
    #[serde(default)]
    pub lambda: f64,
}

impl SamplerSpec {
    pub fn uniform(k: usize) -> Self {
        Self { kind: SamplerKind::UniformWithoutReplacement, k, lambda: 0.0 }
    }

    pub fn k_dpp(k: usize, lambda: f64) -> Self {
        Self { kind: SamplerKind::KDpp, k, lambda }
    }
}

/// How an expectation over `S` is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpectationMode {
    ExactEnumeration {
        #[serde(default = "default_budget")]
        enumeration_budget: u64,
    },
    MonteCarlo {
        mc_samples: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_budget() -> u64 {
    DEFAULT_ENUMERATION_BUDGET
}

impl ExpectationMode {
    pub fn exact() -> Self {
        ExpectationMode::ExactEnumeration { enumeration_budget: DEFAULT_ENUMERATION_BUDGET }
    }

    pub fn monte_carlo(mc_samples: usize, seed: u64) -> Self {
        ExpectationMode::MonteCarlo { mc_samples, seed }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, ExpectationMode::ExactEnumeration { .. })
    }

    /// Same mode with the Monte Carlo seed moved to another stream.
    pub fn reseeded(&self, salt: u64) -> Self {
        match *self {
            ExpectationMode::MonteCarlo { mc_samples, seed } => ExpectationMode::MonteCarlo {
                mc_samples,
                seed: rng::derive_seed(seed, salt),
            },
            exact => exact,
        }
    }
}

/// Binomial coefficient, saturating at `u64::MAX`.
pub fn binomial(m: usize, k: usize) -> u64 {
    if k > m {
        return 0;
    }
    let k = k.min(m - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (m - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// All `k`-subsets of `{0..m}` in colexicographic order.
pub fn combinations_colex(m: usize, k: usize) -> Vec<SampleSet> {
    let mut out = Vec::new();
    if k == 0 || k > m {
        return out;
    }
    let mut c: Vec<usize> = (0..k).collect();
    loop {
        out.push(SampleSet(c.clone()));
        // smallest position that can advance without colliding with its successor
        let mut i = 0;
        while i < k {
            let limit = if i + 1 < k { c[i + 1] } else { m };
            if c[i] + 1 < limit {
                break;
            }
            i += 1;
        }
        if i == k {
            break;
        }
        c[i] += 1;
        for (j, cj) in c.iter_mut().enumerate().take(i) {
            *cj = j;
        }
    }
    out
}

/// Factorization of `J_S J_S^T + lambda I` used to apply `J_S^{+(lambda)}`.
enum BlockFactor {
    Cholesky(Cholesky<f64, nalgebra::Dyn>),
    /// Truncated thin SVD `J_S = U diag(s) V^T` (only kept singular triplets).
    Svd { u: Matrix, s: Vector, v: Matrix },
}

/// Regularized pseudoinverse of one sampled block.
pub struct BlockPinv<'a> {
    block: &'a Matrix,
    lambda: f64,
    factor: BlockFactor,
}

impl<'a> BlockPinv<'a> {
    pub fn new(block: &'a Matrix, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::InvalidSpec(format!("lambda must be >= 0, got {lambda}")));
        }
        let k = block.nrows();
        let mut gram = block * block.transpose();
        for i in 0..k {
            gram[(i, i)] += lambda;
        }
        if let Some(ch) = Cholesky::new(gram) {
            let diag = ch.l_dirty().diagonal();
            let hi = diag.iter().cloned().fold(0.0, f64::max);
            let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            if lambda > 0.0 || lo >= 1e-8 * hi {
                return Ok(Self { block, lambda, factor: BlockFactor::Cholesky(ch) });
            }
        }
        // lambda = 0 with a (numerically) rank-deficient block
        let svd = block.clone().svd(true, true);
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        if !(smax > 0.0) || !smax.is_finite() {
            return Err(Error::SingularBlock);
        }
        let u_full = svd.u.expect("requested U");
        let vt_full = svd.v_t.expect("requested V^T");
        let keep: Vec<usize> = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > PINV_CUTOFF * smax)
            .collect();
        let mut u = Matrix::zeros(u_full.nrows(), keep.len());
        let mut v = Matrix::zeros(vt_full.ncols(), keep.len());
        let mut s = Vector::zeros(keep.len());
        for (dst, &src) in keep.iter().enumerate() {
            u.set_column(dst, &u_full.column(src));
            v.set_column(dst, &vt_full.row(src).transpose());
            s[dst] = svd.singular_values[src];
        }
        Ok(Self { block, lambda, factor: BlockFactor::Svd { u, s, v } })
    }

    /// `J_S^T (J_S J_S^T + lambda I)^{-1} v`.
    pub fn apply(&self, v: &Vector) -> Vector {
        match &self.factor {
            BlockFactor::Cholesky(ch) => self.block.transpose() * ch.solve(v),
            BlockFactor::Svd { u, s, v: right } => {
                let lambda = self.lambda;
                let coeff = u.transpose() * v;
                let scaled = Vector::from_iterator(
                    s.len(),
                    s.iter().zip(coeff.iter()).map(|(&si, &ci)| ci * si / (si * si + lambda)),
                );
                right * scaled
            }
        }
    }

    /// `P(S) = J_S^{+(lambda)} J_S`, symmetrized.
    pub fn projector(&self) -> Matrix {
        let mut p = match &self.factor {
            BlockFactor::Cholesky(ch) => self.block.transpose() * ch.solve(self.block),
            BlockFactor::Svd { s, v, .. } => {
                let lambda = self.lambda;
                let w = Vector::from_iterator(s.len(), s.iter().map(|&si| si * si / (si * si + lambda)));
                v * Matrix::from_diagonal(&w) * v.transpose()
            }
        };
        linalg::symmetrize(&mut p);
        p
    }
}

/// `J_S^T (J_S J_S^T + lambda I)^{-1} v`.
pub fn reg_pinv_apply(block: &Matrix, lambda: f64, v: &Vector) -> Result<Vector> {
    if v.len() != block.nrows() {
        return Err(Error::Dimension(format!(
            "block has {} rows but v has {} entries",
            block.nrows(),
            v.len()
        )));
    }
    Ok(BlockPinv::new(block, lambda)?.apply(v))
}

/// Regularized projector `J_S^{+(lambda)} J_S` onto the row space of the block.
pub fn projector(block: &Matrix, lambda: f64) -> Result<Matrix> {
    Ok(BlockPinv::new(block, lambda)?.projector())
}

/// Rows `S` of `J` as a `k x n` block.
pub fn select_rows(j: &Matrix, set: &SampleSet) -> Matrix {
    j.select_rows(set.indices().iter())
}

/// Inverse-CDF table over all `k`-subsets, weighted by `det(J_S J_S^T + lambda I)`.
#[derive(Clone, Debug)]
struct DppTable {
    subsets: Vec<SampleSet>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl DppTable {
    fn build(j: &Matrix, k: usize, lambda: f64, budget: u64) -> Result<Self> {
        let count = binomial(j.nrows(), k);
        if count > budget {
            return Err(Error::BudgetExceeded { count, budget });
        }
        let subsets = combinations_colex(j.nrows(), k);
        let dets: Vec<f64> = subsets
            .par_iter()
            .map(|s| {
                let block = select_rows(j, s);
                let mut g = &block * block.transpose();
                for i in 0..k {
                    g[(i, i)] += lambda;
                }
                g.determinant().max(0.0)
            })
            .collect();
        let total: f64 = dets.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::InvalidSpec("k-DPP kernel has no positive-determinant subset".into()));
        }
        let probs: Vec<f64> = dets.iter().map(|d| d / total).collect();
        let mut cumulative = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cumulative.push(acc);
        }
        Ok(Self { subsets, probs, cumulative })
    }

    fn draw(&self, rng: &mut Rng) -> SampleSet {
        let total = *self.cumulative.last().unwrap();
        let u: f64 = rng.random::<f64>() * total;
        let idx = self.cumulative.partition_point(|&c| c <= u).min(self.subsets.len() - 1);
        self.subsets[idx].clone()
    }
}

/// A ready-to-draw sampler for a fixed Jacobian.
#[derive(Clone, Debug)]
pub struct Sampler {
    spec: SamplerSpec,
    m: usize,
    dpp: Option<DppTable>,
}

impl Sampler {
    pub fn new(spec: SamplerSpec, j: &Matrix) -> Result<Self> {
        Self::with_budget(spec, j, DEFAULT_ENUMERATION_BUDGET)
    }

    pub fn with_budget(spec: SamplerSpec, j: &Matrix, budget: u64) -> Result<Self> {
        let m = j.nrows();
        if spec.k == 0 || spec.k > m {
            return Err(Error::InvalidSpec(format!("block size k = {} must lie in [1, {m}]", spec.k)));
        }
        if !(spec.lambda >= 0.0) {
            return Err(Error::InvalidSpec("sampler lambda must be >= 0".into()));
        }
        let dpp = match spec.kind {
            SamplerKind::UniformWithoutReplacement => None,
            SamplerKind::KDpp => Some(DppTable::build(j, spec.k, spec.lambda, budget)?),
        };
        Ok(Self { spec, m, dpp })
    }

    pub fn spec(&self) -> &SamplerSpec {
        &self.spec
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn draw(&self, rng: &mut Rng) -> SampleSet {
        match &self.dpp {
            Some(table) => table.draw(rng),
            None => {
                if self.spec.k == self.m {
                    return SampleSet::full(self.m);
                }
                let mut idx = rand::seq::index::sample(rng, self.m, self.spec.k).into_vec();
                idx.sort_unstable();
                SampleSet(idx)
            }
        }
    }

    /// Every subset with its probability, in colex order.
    pub fn support(&self, budget: u64) -> Result<Vec<(SampleSet, f64)>> {
        match &self.dpp {
            Some(t) => {
                let count = t.subsets.len() as u64;
                if count > budget {
                    return Err(Error::BudgetExceeded { count, budget });
                }
                Ok(t.subsets.iter().cloned().zip(t.probs.iter().cloned()).collect())
            }
            None => {
                let count = binomial(self.m, self.spec.k);
                if count > budget {
                    return Err(Error::BudgetExceeded { count, budget });
                }
                let w = 1.0 / count as f64;
                Ok(combinations_colex(self.m, self.spec.k).into_iter().map(|s| (s, w)).collect())
            }
        }
    }

    /// Probability of a given subset.
    pub fn probability(&self, set: &SampleSet) -> f64 {
        if set.k() != self.spec.k {
            return 0.0;
        }
        match &self.dpp {
            Some(t) => t
                .subsets
                .iter()
                .position(|s| s == set)
                .map(|i| t.probs[i])
                .unwrap_or(0.0),
            None => 1.0 / binomial(self.m, self.spec.k) as f64,
        }
    }
}

/// Draw one subset; k-DPP sampling builds the full probability table first.
pub fn sample(spec: SamplerSpec, j: &Matrix, rng: &mut Rng) -> Result<SampleSet> {
    Ok(Sampler::new(spec, j)?.draw(rng))
}

/// Estimated expectation of a matrix-valued function.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Expectation {
    #[serde(with = "linalg::serde_matrix")]
    pub mean: Matrix,
    /// Entrywise standard error (Monte Carlo only).
    #[serde(with = "linalg::serde_opt_matrix")]
    pub stderr: Option<Matrix>,
    pub mode: ExpectationMode,
    /// Number of subsets enumerated or samples drawn.
    pub terms: usize,
}

/// Running mean and sum of squared deviations, merged pairwise (Chan et al.).
#[derive(Clone)]
struct Moments {
    count: f64,
    mean: Matrix,
    m2: Matrix,
}

impl Moments {
    fn single(x: Matrix) -> Self {
        let (r, c) = x.shape();
        Moments { count: 1.0, mean: x, m2: Matrix::zeros(r, c) }
    }

    fn merge(a: Moments, b: Moments) -> Moments {
        let count = a.count + b.count;
        let delta = &b.mean - &a.mean;
        let mean = &a.mean + &delta * (b.count / count);
        let adj = delta.component_mul(&delta) * (a.count * b.count / count);
        let m2 = a.m2 + b.m2 + adj;
        Moments { count, mean, m2 }
    }

    fn merge_all(mut parts: Vec<Moments>) -> Option<Moments> {
        while parts.len() > 1 {
            let mut next = Vec::with_capacity(parts.len().div_ceil(2));
            let mut it = parts.into_iter();
            while let Some(a) = it.next() {
                match it.next() {
                    Some(b) => next.push(Moments::merge(a, b)),
                    None => next.push(a),
                }
            }
            parts = next;
        }
        parts.pop()
    }
}

fn exact_sum<F>(support: &[(SampleSet, f64)], f: &F) -> Result<Matrix>
where
    F: Fn(&SampleSet) -> Result<Matrix> + Sync,
{
    let chunk_sums: Vec<Matrix> = support
        .par_chunks(CHUNK)
        .map(|chunk| -> Result<Matrix> {
            let terms = chunk
                .iter()
                .map(|(s, w)| f(s).map(|m| m * *w))
                .collect::<Result<Vec<_>>>()?;
            Ok(linalg::pairwise_sum(&terms).expect("nonempty chunk"))
        })
        .collect::<Result<Vec<_>>>()?;
    linalg::pairwise_sum(&chunk_sums).ok_or_else(|| Error::InvalidSpec("empty support".into()))
}

fn monte_carlo_moments<F>(samples: usize, seed: u64, f: &F) -> Result<Moments>
where
    F: Fn(&mut Rng) -> Result<Matrix> + Sync,
{
    if samples == 0 {
        return Err(Error::InvalidSpec("mc_samples must be positive".into()));
    }
    let starts: Vec<usize> = (0..samples).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&start| -> Result<Moments> {
            let end = (start + CHUNK).min(samples);
            let mut acc: Option<Moments> = None;
            for i in start..end {
                let mut r = rng::stream_rng(seed, i as u64);
                let x = Moments::single(f(&mut r)?);
                acc = Some(match acc {
                    Some(a) => Moments::merge(a, x),
                    None => x,
                });
            }
            Ok(acc.expect("nonempty chunk"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Moments::merge_all(parts).expect("at least one chunk"))
}

fn finish_mc(m: Moments, mode: ExpectationMode) -> Expectation {
    let n = m.count;
    let stderr = if n > 1.0 {
        m.m2.map(|v| (v / (n - 1.0) / n).max(0.0).sqrt())
    } else {
        m.m2.map(|_| f64::INFINITY)
    };
    Expectation { mean: m.mean, stderr: Some(stderr), mode, terms: n as usize }
}

/// `E_S[f(S)]` under the sampler's distribution.
///
/// Exact mode sums over all subsets in colex order with a fixed reduction tree.
/// Monte Carlo mode draws sample `i` from stream `i` of the mode's seed, so the
/// estimate does not depend on thread scheduling either.
pub fn expect_matrix<F>(f: F, sampler: &Sampler, mode: &ExpectationMode) -> Result<Expectation>
where
    F: Fn(&SampleSet) -> Result<Matrix> + Sync,
{
    match *mode {
        ExpectationMode::ExactEnumeration { enumeration_budget } => {
            let support = sampler.support(enumeration_budget)?;
            let mean = exact_sum(&support, &f)?;
            Ok(Expectation { mean, stderr: None, mode: *mode, terms: support.len() })
        }
        ExpectationMode::MonteCarlo { mc_samples, seed } => {
            let m = monte_carlo_moments(mc_samples, seed, &|r: &mut Rng| f(&sampler.draw(r)))?;
            Ok(finish_mc(m, *mode))
        }
    }
}

/// Monte Carlo mean of an arbitrary random matrix, one stream per draw.
pub fn monte_carlo_matrix<F>(f: F, mc_samples: usize, seed: u64) -> Result<Expectation>
where
    F: Fn(&mut Rng) -> Result<Matrix> + Sync,
{
    let m = monte_carlo_moments(mc_samples, seed, &f)?;
    Ok(finish_mc(m, ExpectationMode::MonteCarlo { mc_samples, seed }))
}

/// `E[(Z D)^+ (Z D)]` for a `k x n` standard Gaussian sketch `Z`.
pub fn gaussian_sketch_projector(d: &Matrix, k: usize, mc_samples: usize, seed: u64) -> Result<Expectation> {
    let n = d.nrows();
    monte_carlo_matrix(
        |r| {
            let z = Matrix::from_fn(k, n, |_, _| r.sample::<f64, _>(StandardNormal));
            projector(&(z * d), 0.0)
        },
        mc_samples,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut g = rng::seeded(seed);
        Matrix::from_fn(r, c, |_, _| g.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn identity_block() {
        let j = Matrix::identity(2, 2);
        let v = Vector::from_vec(vec![3.0, 4.0]);
        let x = reg_pinv_apply(&j, 0.0, &v).unwrap();
        assert!((x - v).norm() < 1e-15);
    }

    #[test]
    fn row_pseudoinverse() {
        let j = Matrix::from_row_slice(1, 2, &[2.0, 0.0]);
        let x = reg_pinv_apply(&j, 0.0, &Vector::from_vec(vec![1.0])).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && x[1].abs() < 1e-15);
    }

    #[test]
    fn woodbury_sides_agree() {
        let j = random_matrix(3, 5, 1);
        let v = Vector::from_iterator(3, random_matrix(3, 1, 2).iter().cloned());
        let lambda = 0.7;
        let left = reg_pinv_apply(&j, lambda, &v).unwrap();
        // (J^T J + lambda I)^{-1} J^T v, solved independently on the n side
        let mut a = j.transpose() * &j;
        for i in 0..5 {
            a[(i, i)] += lambda;
        }
        let right = a.lu().solve(&(j.transpose() * &v)).unwrap();
        assert!((&left - &right).norm() <= 1e-10 * right.norm());
    }

    #[test]
    fn unit_row_projector() {
        let j = Matrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let p = projector(&j, 0.0).unwrap();
        let mut e = Matrix::zeros(3, 3);
        e[(0, 0)] = 1.0;
        assert!((p - e).norm() < 1e-15);
    }

    #[test]
    fn projector_spectrum_matches_svd() {
        let j = random_matrix(2, 4, 9);
        let lambda = 0.3;
        let p = projector(&j, lambda).unwrap();
        let sv = j.clone().singular_values();
        let mut expect: Vec<f64> = sv.iter().map(|s| s * s / (s * s + lambda)).collect();
        expect.extend([0.0, 0.0]);
        expect.sort_by(f64::total_cmp);
        let (vals, _) = linalg::sym_eig(&p);
        for (a, b) in vals.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn large_lambda_series() {
        let j = random_matrix(2, 4, 3);
        let lambda = 1e8;
        let p = projector(&j, lambda).unwrap();
        let jtj = j.transpose() * &j;
        let norm = linalg::spectral_norm(&j);
        let rem = (p * lambda - jtj).norm();
        // first-order remainder J^T (J J^T) J / lambda, Frobenius within sqrt(rank) of spectral
        assert!(rem <= 2.0 * norm.powi(4) / lambda, "{rem}");
    }

    #[test]
    fn full_rank_projector_is_idempotent() {
        let j = random_matrix(3, 6, 4);
        let p = projector(&j, 0.0).unwrap();
        assert!((&p * &p - &p).norm() < 1e-12);
        assert!((p.trace() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn singular_block_signalled() {
        let j = Matrix::zeros(2, 3);
        assert!(matches!(projector(&j, 0.0), Err(Error::SingularBlock)));
        // regularization rescues it
        assert!(projector(&j, 1.0).unwrap().norm() == 0.0);
    }

    #[test]
    fn rank_deficient_block_uses_pseudoinverse() {
        let j = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 0.0]);
        let p = projector(&j, 0.0).unwrap();
        assert!((p[(0, 0)] - 1.0).abs() < 1e-12 && p[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn colex_order_and_count() {
        let c = combinations_colex(4, 2);
        let v: Vec<Vec<usize>> = c.iter().map(|s| s.indices().to_vec()).collect();
        assert_eq!(v, vec![vec![0, 1], vec![0, 2], vec![1, 2], vec![0, 3], vec![1, 3], vec![2, 3]]);
        assert_eq!(combinations_colex(10, 3).len() as u64, binomial(10, 3));
        assert_eq!(binomial(200, 100), u64::MAX);
    }

    #[test]
    fn full_set_when_k_equals_m() {
        let j = random_matrix(5, 2, 0);
        let s = Sampler::new(SamplerSpec::uniform(5), &j).unwrap();
        let mut r = rng::seeded(1);
        assert_eq!(s.draw(&mut r), SampleSet::full(5));
    }

    #[test]
    fn uniform_frequencies() {
        let j = random_matrix(4, 2, 0);
        let s = Sampler::new(SamplerSpec::uniform(2), &j).unwrap();
        let draws = 600_000;
        let mut counts = std::collections::HashMap::new();
        let mut r = rng::seeded(42);
        for _ in 0..draws {
            *counts.entry(s.draw(&mut r)).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let p = 1.0 / 6.0;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        let mut chi2 = 0.0;
        for &c in counts.values() {
            let f = c as f64 / draws as f64;
            assert!((f - p).abs() <= 3.0 * se, "{f}");
            chi2 += (c as f64 - p * draws as f64).powi(2) / (p * draws as f64);
        }
        // 5 dof, 99.9% quantile
        assert!(chi2 < 20.5, "{chi2}");
    }

    #[test]
    fn dpp_table_matches_determinants_with_zero_row() {
        let mut j = random_matrix(5, 3, 8);
        j.row_mut(2).fill(0.0);
        let spec = SamplerSpec::k_dpp(2, 0.0);
        let s = Sampler::new(spec, &j).unwrap();
        let support = s.support(100).unwrap();
        let mut oracle = Vec::new();
        for (set, _) in &support {
            let b = select_rows(&j, set);
            oracle.push((&b * b.transpose()).determinant());
        }
        let total: f64 = oracle.iter().sum();
        for ((set, p), d) in support.iter().zip(oracle.iter()) {
            assert!((p - d / total).abs() < 1e-14);
            if set.indices().contains(&2) {
                assert!(*p < 1e-15);
            }
        }
        let mut r = rng::seeded(3);
        for _ in 0..1000 {
            assert!(!s.draw(&mut r).indices().contains(&2));
        }
    }

    #[test]
    fn dpp_budget_enforced() {
        let j = random_matrix(30, 3, 1);
        let err = Sampler::with_budget(SamplerSpec::k_dpp(5, 0.1), &j, 1000).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { count: 142506, budget: 1000 }));
    }

    #[test]
    fn expectation_of_identity() {
        let j = random_matrix(6, 2, 2);
        let s = Sampler::new(SamplerSpec::uniform(2), &j).unwrap();
        let f = |_: &SampleSet| Ok(Matrix::identity(3, 3));
        let e = expect_matrix(f, &s, &ExpectationMode::exact()).unwrap();
        assert!((e.mean - Matrix::identity(3, 3)).norm() < 1e-14);
        let e = expect_matrix(f, &s, &ExpectationMode::monte_carlo(100, 1)).unwrap();
        assert!((e.mean - Matrix::identity(3, 3)).norm() < 1e-14);
        assert!(e.stderr.unwrap().norm() < 1e-14);
    }

    #[test]
    fn rank_one_projector_average() {
        let j = random_matrix(4, 3, 5);
        let s = Sampler::new(SamplerSpec::uniform(1), &j).unwrap();
        let e = expect_matrix(|set| projector(&select_rows(&j, set), 0.0), &s, &ExpectationMode::exact()).unwrap();
        let mut oracle = Matrix::zeros(3, 3);
        for i in 0..4 {
            let r = j.row(i).transpose();
            oracle += &r * r.transpose() / r.norm_squared();
        }
        oracle /= 4.0;
        assert!((e.mean - oracle).norm() < 1e-14);
    }

    #[test]
    fn monte_carlo_matches_exact() {
        let j = random_matrix(8, 3, 6);
        let s = Sampler::new(SamplerSpec::uniform(2), &j).unwrap();
        let f = |set: &SampleSet| projector(&select_rows(&j, set), 0.0);
        let exact = expect_matrix(f, &s, &ExpectationMode::exact()).unwrap();
        let mc = expect_matrix(f, &s, &ExpectationMode::monte_carlo(100_000, 17)).unwrap();
        let se = mc.stderr.unwrap();
        for i in 0..3 {
            for k in 0..3 {
                let dev = (mc.mean[(i, k)] - exact.mean[(i, k)]).abs();
                assert!(dev <= 4.0 * se[(i, k)], "({i},{k}) {dev} vs {}", se[(i, k)]);
            }
        }
    }

    #[test]
    fn expectations_are_schedule_independent() {
        let j = random_matrix(12, 3, 6);
        let s = Sampler::new(SamplerSpec::uniform(3), &j).unwrap();
        let f = |set: &SampleSet| projector(&select_rows(&j, set), 0.2);
        let a = expect_matrix(f, &s, &ExpectationMode::exact()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| expect_matrix(f, &s, &ExpectationMode::exact()).unwrap());
        assert_eq!(a.mean, b.mean);
        let a = expect_matrix(f, &s, &ExpectationMode::monte_carlo(5000, 2)).unwrap();
        let b = pool.install(|| expect_matrix(f, &s, &ExpectationMode::monte_carlo(5000, 2)).unwrap());
        assert_eq!(a.mean, b.mean);
    }
}
