//! Dense and sparse symmetric linear algebra.
//!
//! Dense matrices are `nalgebra` column-major `DMatrix<f64>`. Sparse symmetric
//! matrices keep their lower triangle in compressed-column form. Both feed the
//! same [`SymmetricFactorization`], an `LDLᵀ` decomposition with an optional
//! fill-reducing permutation.

mod csc;
pub mod io;
mod ldlt;
mod ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{RemlError, Result};

pub use csc::{CscMatrix, SparseSymmetric};
pub use ldlt::{factorizations_on_this_thread, ldlt_factor, Factorize, SymmetricFactorization};
pub use ordering::minimum_degree;

pub type DenseMatrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Order up to which dense reference computations are permitted.
pub const DENSE_ORACLE_CAP: usize = 2000;

/// Relative pivot tolerance: `|d_kk| < PIVOT_TOLERANCE * max |a_jj|` is a zero pivot.
pub const PIVOT_TOLERANCE: f64 = 1e-13;

/// Largest absolute entry, zero for an empty matrix.
pub fn max_abs(a: &DenseMatrix) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn max_abs_vec(v: &Vector) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// `(A + Aᵀ) / 2`, used to remove roundoff asymmetry from products like `A B Aᵀ`.
pub fn symmetrize(a: &DenseMatrix) -> DenseMatrix {
    (a + a.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix via `LDLᵀ`.
pub fn spd_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    let f = ldlt_factor(a)?;
    if !f.is_positive_definite() {
        return Err(RemlError::NotPositiveDefinite(format!(
            "matrix of order {} has a non-positive pivot",
            a.nrows()
        )));
    }
    let inv = f.solve(&DenseMatrix::identity(a.nrows(), a.nrows()))?;
    Ok(symmetrize(&inv))
}

/// `log |A|` for a symmetric positive definite matrix.
pub fn spd_logdet(a: &DenseMatrix) -> Result<f64> {
    ldlt_factor(a)?.logdet()
}

/// `RankDeficient` naming the first dependent column of `X`, if any.
pub fn check_full_rank(x: &DenseMatrix) -> Result<()> {
    gram_factor(x).map(|_| ())
}

fn gram_factor(x: &DenseMatrix) -> Result<SymmetricFactorization> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(RemlError::DimensionMismatch("empty design matrix".into()));
    }
    let xtx = x.transpose() * x;
    let f = ldlt_factor(&xtx).map_err(|e| match e {
        RemlError::ZeroPivot { index, .. } => {
            RemlError::RankDeficient(format!("column {index} of X is linearly dependent"))
        }
        other => other,
    })?;
    if !f.is_positive_definite() {
        return Err(RemlError::RankDeficient("XᵀX is not positive definite".into()));
    }
    Ok(f)
}

/// Orthogonal projector `X (XᵀX)⁻¹ Xᵀ` onto the column space of a full-rank `X`.
pub fn projector(x: &DenseMatrix) -> Result<DenseMatrix> {
    let f = gram_factor(x)?;
    let coef = f.solve(&x.transpose())?;
    Ok(symmetrize(&(x * coef)))
}

/// Orthonormal basis `K₂` of the orthogonal complement of `span(X)`.
///
/// Columns are the eigenvectors of `I − P_X` with eigenvalue above one half.
pub fn orthonormal_complement(x: &DenseMatrix) -> Result<DenseMatrix> {
    let (n, p) = x.shape();
    if p >= n {
        return Err(RemlError::DimensionMismatch(format!(
            "complement of a {n}x{p} design requires p < n"
        )));
    }
    let px = projector(x)?;
    let resid = DenseMatrix::identity(n, n) - px;
    let eig = SymmetricEigen::new(resid);
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 0.5).collect();
    if keep.len() != n - p {
        return Err(RemlError::RankDeficient(format!(
            "I - P_X has {} unit eigenvalues, expected {}",
            keep.len(),
            n - p
        )));
    }
    let mut k2 = DenseMatrix::zeros(n, n - p);
    for (c, &i) in keep.iter().enumerate() {
        k2.set_column(c, &eig.eigenvectors.column(i));
    }
    Ok(k2)
}

/// Serializes a dense matrix as a list of rows.
pub fn serialize_rows<S: serde::Serializer>(m: &DenseMatrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for row in m.row_iter() {
        seq.serialize_element(&row.iter().copied().collect::<Vec<f64>>())?;
    }
    seq.end()
}
