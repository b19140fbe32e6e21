use std::collections::BTreeMap;

use super::{DenseMatrix, Vector};
use crate::error::{RemlError, Result};

/// General sparse matrix in compressed-column form.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Builds from per-column `(row, value)` lists. Rows must be increasing.
    pub fn from_columns(nrows: usize, columns: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let ncols = columns.len();
        let mut colptr = Vec::with_capacity(ncols + 1);
        let mut rowidx = Vec::new();
        let mut values = Vec::new();
        colptr.push(0);
        for (j, col) in columns.into_iter().enumerate() {
            let mut last = None;
            for (i, v) in col {
                if i >= nrows || last.is_some_and(|l| i <= l) {
                    return Err(RemlError::DimensionMismatch(format!(
                        "column {j}: row index {i} out of order or range"
                    )));
                }
                last = Some(i);
                rowidx.push(i);
                values.push(v);
            }
            colptr.push(rowidx.len());
        }
        Ok(Self {
            nrows,
            ncols,
            colptr,
            rowidx,
            values,
        })
    }

    /// Keeps every nonzero entry of `a`.
    pub fn from_dense(a: &DenseMatrix) -> Self {
        let columns = (0..a.ncols())
            .map(|j| {
                (0..a.nrows())
                    .filter(|&i| a[(i, j)] != 0.0)
                    .map(|i| (i, a[(i, j)]))
                    .collect()
            })
            .collect();
        Self::from_columns(a.nrows(), columns).expect("dense entries are ordered")
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            colptr: (0..=n).collect(),
            rowidx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Entries of column `j` as `(row, value)` pairs.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.colptr[j]..self.colptr[j + 1];
        self.rowidx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut a = DenseMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for (i, v) in self.column(j) {
                a[(i, j)] += v;
            }
        }
        a
    }

    /// `A v`
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.ncols);
        let mut out = vec![0.0; self.nrows];
        for (j, &vj) in v.iter().enumerate() {
            if vj != 0.0 {
                for (i, a) in self.column(j) {
                    out[i] += a * vj;
                }
            }
        }
        out
    }

    /// `Aᵀ v`
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.nrows);
        (0..self.ncols)
            .map(|j| self.column(j).map(|(i, a)| a * v[i]).sum())
            .collect()
    }

    /// `A B` for dense `B`.
    pub fn mul_dense(&self, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.nrows, b.ncols());
        for c in 0..b.ncols() {
            let col = self.mul_vec(b.column(c).as_slice());
            out.set_column(c, &Vector::from_vec(col));
        }
        out
    }

    /// `Aᵀ B` for dense `B`.
    pub fn tr_mul_dense(&self, b: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.ncols, b.ncols());
        for c in 0..b.ncols() {
            let col = self.tr_mul_vec(b.column(c).as_slice());
            out.set_column(c, &Vector::from_vec(col));
        }
        out
    }

    /// Sum of diagonal entries.
    pub fn trace(&self) -> f64 {
        (0..self.ncols.min(self.nrows))
            .flat_map(|j| self.column(j).filter(move |&(i, _)| i == j))
            .map(|(_, v)| v)
            .sum()
    }

    /// `tr(A B)` for dense `B`, touching only the stored entries of `A`.
    pub fn trace_product(&self, b: &DenseMatrix) -> f64 {
        debug_assert_eq!(b.nrows(), self.ncols);
        debug_assert_eq!(b.ncols(), self.nrows);
        let mut t = 0.0;
        for j in 0..self.ncols {
            for (i, a) in self.column(j) {
                t += a * b[(j, i)];
            }
        }
        t
    }
}

/// Symmetric sparse matrix storing the lower triangle (diagonal included) in
/// compressed-column form. Every column holds its diagonal entry and row
/// indices within a column are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric {
    order: usize,
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymmetric {
    /// Builds from `(row, col, value)` triplets. Upper-triangle triplets are
    /// mirrored into the lower triangle and duplicates are summed. Missing
    /// diagonal entries are stored as explicit zeros.
    pub fn from_triplets<I>(order: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, f64)>,
    {
        if order == 0 {
            return Err(RemlError::DimensionMismatch("order must be at least 1".into()));
        }
        let mut cols: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); order];
        for (j, col) in cols.iter_mut().enumerate() {
            col.insert(j, 0.0);
        }
        for (i, j, v) in triplets {
            if i >= order || j >= order {
                return Err(RemlError::DimensionMismatch(format!(
                    "entry ({i}, {j}) outside order {order}"
                )));
            }
            if !v.is_finite() {
                return Err(RemlError::Parse(format!("non-finite entry at ({i}, {j})")));
            }
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            *cols[c].entry(r).or_insert(0.0) += v;
        }
        let mut colptr = Vec::with_capacity(order + 1);
        let mut rowidx = Vec::new();
        let mut values = Vec::new();
        colptr.push(0);
        for col in cols {
            for (r, v) in col {
                rowidx.push(r);
                values.push(v);
            }
            colptr.push(rowidx.len());
        }
        Ok(Self {
            order,
            colptr,
            rowidx,
            values,
        })
    }

    /// Lower-triangle nonzeros of a dense symmetric matrix.
    pub fn from_dense(a: &DenseMatrix) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(RemlError::DimensionMismatch(format!(
                "{}x{} matrix is not square",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        let trip = (0..n).flat_map(|j| {
            (j..n)
                .filter(move |&i| i == j || a[(i, j)] != 0.0)
                .map(move |i| (i, j, a[(i, j)]))
        });
        Self::from_triplets(n, trip)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Stored (lower-triangle) entry count.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn colptr(&self) -> &[usize] {
        &self.colptr
    }

    pub fn rowidx(&self) -> &[usize] {
        &self.rowidx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Lower-triangle entries of column `j`, diagonal first.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.colptr[j]..self.colptr[j + 1];
        self.rowidx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.order)
            .map(|j| self.values[self.colptr[j]])
            .collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut a = DenseMatrix::zeros(self.order, self.order);
        for j in 0..self.order {
            for (i, v) in self.column(j) {
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `A v` using both triangles.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.order];
        for j in 0..self.order {
            for (i, a) in self.column(j) {
                out[i] += a * v[j];
                if i != j {
                    out[j] += a * v[i];
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_mirror_and_sum() {
        let s = SparseSymmetric::from_triplets(3, [(0, 1, 2.0), (1, 0, 1.0), (2, 2, 5.0)]).unwrap();
        let d = s.to_dense();
        assert_eq!(d[(1, 0)], 3.0);
        assert_eq!(d[(0, 1)], 3.0);
        assert_eq!(d[(0, 0)], 0.0);
        assert_eq!(s.diagonal(), vec![0.0, 0.0, 5.0]);
        assert_eq!(s.nnz(), 4);
    }

    #[test]
    fn symmetric_matvec_matches_dense() {
        let a = DenseMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 2.0, 0.0, 2.0, 5.0]);
        let s = SparseSymmetric::from_dense(&a).unwrap();
        let v = [1.0, -2.0, 0.5];
        let expected = &a * Vector::from_column_slice(&v);
        assert_eq!(s.mul_vec(&v), expected.as_slice());
    }

    #[test]
    fn csc_products() {
        let a = DenseMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 3.0, 0.0]);
        let c = CscMatrix::from_dense(&a);
        assert_eq!(c.nnz(), 3);
        assert_eq!(c.mul_vec(&[1.0, 1.0]), vec![1.0, 2.0, 3.0]);
        assert_eq!(c.tr_mul_vec(&[1.0, 1.0, 1.0]), vec![4.0, 2.0]);
        let sq = DenseMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let csq = CscMatrix::from_dense(&sq);
        let b = DenseMatrix::from_row_slice(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(csq.trace_product(&b), (&sq * &b).trace());
        assert_eq!(csq.trace(), 5.0);
    }
}
