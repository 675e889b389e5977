//! Dense linear-algebra helpers shared by the rest of the crate.
//!
//! Everything is `f64` and column-major in memory (nalgebra), but matrices are
//! serialized row-major with explicit dimensions so that JSON files read
//! naturally.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative eigenvalue floor used for inverse square roots.
pub const EIG_FLOOR: f64 = 1e-14;

/// JSON layout of a dense matrix.
#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    /// Row-major entries.
    data: Vec<f64>,
}

pub(crate) mod serde_matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        MatrixRepr { rows: m.nrows(), cols: m.ncols(), data }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let r = MatrixRepr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix data has {} entries, expected {}x{}",
                r.data.len(),
                r.rows,
                r.cols
            )));
        }
        Ok(Matrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}

pub(crate) mod serde_vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        let data = Vec::<f64>::deserialize(d)?;
        Ok(Vector::from_vec(data))
    }
}

pub(crate) mod serde_opt_matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Option<Matrix>, s: S) -> Result<S::Ok, S::Error> {
        match m {
            Some(m) => {
                let mut data = Vec::with_capacity(m.len());
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        data.push(m[(i, j)]);
                    }
                }
                Some(MatrixRepr { rows: m.nrows(), cols: m.ncols(), data }).serialize(s)
            }
            None => None::<MatrixRepr>.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Matrix>, D::Error> {
        let r = Option::<MatrixRepr>::deserialize(d)?;
        Ok(r.map(|r| Matrix::from_row_slice(r.rows, r.cols, &r.data)))
    }
}

/// Symmetrizes in place: `A <- (A + A^T) / 2`.
pub fn symmetrize(a: &mut Matrix) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted ascending.
pub fn sym_eig(a: &Matrix) -> (Vector, Matrix) {
    let mut s = a.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_extremes(a: &Matrix) -> (f64, f64) {
    let (vals, _) = sym_eig(a);
    (vals[0], vals[vals.len() - 1])
}

/// Result of applying a scalar power to a symmetric positive semidefinite matrix.
#[derive(Clone, Debug)]
pub struct SymPower {
    pub matrix: Matrix,
    /// Absolute eigenvalue floor that was applied.
    pub floor: f64,
    /// Number of eigenvalues raised to the floor.
    pub floored: usize,
}

/// `A^p` via eigendecomposition, flooring eigenvalues at `rel_floor * lambda_max`.
pub fn sym_power(a: &Matrix, p: f64, rel_floor: f64) -> SymPower {
    let (vals, vecs) = sym_eig(a);
    let lmax = vals[vals.len() - 1].max(0.0);
    let floor = rel_floor * lmax;
    let mut floored = 0;
    let scaled = Vector::from_iterator(
        vals.len(),
        vals.iter().map(|&v| {
            if v < floor {
                floored += 1;
                floor.powf(p)
            } else {
                v.powf(p)
            }
        }),
    );
    let mut m = &vecs * Matrix::from_diagonal(&scaled) * vecs.transpose();
    symmetrize(&mut m);
    SymPower { matrix: m, floor, floored }
}

/// Condition number `lambda_max / lambda_min` of a symmetric positive definite matrix.
pub fn sym_condition(a: &Matrix) -> f64 {
    let (lo, hi) = sym_extremes(a);
    hi / lo
}

/// Sum of matrices by recursive halving; the association order depends only on the
/// slice length.
pub fn pairwise_sum(terms: &[Matrix]) -> Option<Matrix> {
    match terms.len() {
        0 => None,
        1 => Some(terms[0].clone()),
        len => {
            let (a, b) = terms.split_at(len / 2);
            let mut left = pairwise_sum(a)?;
            left += pairwise_sum(b)?;
            Some(left)
        }
    }
}

/// Orthonormal basis for the column space of a full-column-rank matrix (thin QR).
pub fn orthonormal_columns(a: &Matrix) -> Matrix {
    a.clone().qr().q()
}

/// Frobenius norm.
pub fn fro(a: &Matrix) -> f64 {
    a.norm()
}

/// Spectral norm via the singular values.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// Relative difference `|a - b| / max(|b|, tiny)` for matrices.
pub fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    let denom = b.norm().max(f64::MIN_POSITIVE);
    (a - b).norm() / denom
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym_power_inverse_sqrt() {
        let a = Matrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let p = sym_power(&a, -0.5, EIG_FLOOR);
        assert!((p.matrix[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((p.matrix[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.floored, 0);
    }

    #[test]
    fn sym_eig_sorted() {
        let a = Matrix::from_row_slice(3, 3, &[3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        let (v, _) = sym_eig(&a);
        assert_eq!(v.as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn pairwise_matches_naive() {
        let terms: Vec<Matrix> = (0..7).map(|i| Matrix::from_element(2, 2, i as f64)).collect();
        let s = pairwise_sum(&terms).unwrap();
        assert_eq!(s[(0, 0)], 21.0);
        assert!(pairwise_sum(&[]).is_none());
    }

    #[test]
    fn matrix_json_is_row_major() {
        #[derive(Serialize, Deserialize)]
        struct W {
            #[serde(with = "serde_matrix")]
            m: Matrix,
        }
        let w = W { m: Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]) };
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, r#"{"m":{"rows":2,"cols":3,"data":[1.0,2.0,3.0,4.0,5.0,6.0]}}"#);
        let back: W = serde_json::from_str(&s).unwrap();
        assert_eq!(back.m, w.m);
    }
}
