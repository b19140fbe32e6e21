use std::cell::Cell;

use rayon::prelude::*;

use super::{minimum_degree, DenseMatrix, SparseSymmetric, Vector, PIVOT_TOLERANCE};
use crate::error::{RemlError, Result};

thread_local! {
    static FACTOR_COUNT: Cell<usize> = const { Cell::new(0) };
}

/// Number of `LDLᵀ` factorizations performed so far on the calling thread.
pub fn factorizations_on_this_thread() -> usize {
    FACTOR_COUNT.with(Cell::get)
}

fn bump_factor_count() {
    FACTOR_COUNT.with(|c| c.set(c.get() + 1));
}

/// `PᵀAP = LDLᵀ` with `L` unit lower triangular.
///
/// `L` is kept strictly below the diagonal in compressed-column form for both
/// the dense and the sparse path; `perm[k]` is the original row/column placed
/// at position `k`. The factorization is immutable and `Sync`, so concurrent
/// solves against one instance are fine.
#[derive(Debug, Clone)]
pub struct SymmetricFactorization {
    order: usize,
    l_colptr: Vec<usize>,
    l_rowidx: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
    perm: Vec<usize>,
    positive_definite: bool,
}

/// Anything that can be factorized as a symmetric matrix.
pub trait Factorize {
    fn ldlt(&self) -> Result<SymmetricFactorization>;
}

/// Factorizes a symmetric matrix. Dense input is factorized in natural
/// order; sparse input is reordered by minimum degree first.
pub fn ldlt_factor<A: Factorize + ?Sized>(a: &A) -> Result<SymmetricFactorization> {
    a.ldlt()
}

fn pivot_tolerance(diag: impl Iterator<Item = f64>) -> f64 {
    PIVOT_TOLERANCE * diag.fold(0.0_f64, |m, v| m.max(v.abs()))
}

fn check_pivot(index: usize, value: f64, tolerance: f64) -> Result<()> {
    if !value.is_finite() || value == 0.0 || value.abs() < tolerance {
        return Err(RemlError::ZeroPivot {
            index,
            value,
            tolerance,
        });
    }
    Ok(())
}

impl Factorize for DenseMatrix {
    fn ldlt(&self) -> Result<SymmetricFactorization> {
        let n = self.nrows();
        if n == 0 || n != self.ncols() {
            return Err(RemlError::DimensionMismatch(format!(
                "cannot factorize a {}x{} matrix",
                self.nrows(),
                self.ncols()
            )));
        }
        bump_factor_count();
        let tol = pivot_tolerance(self.diagonal().iter().copied());
        // Column-oriented: l[(i, j)] for i > j, reading only the lower triangle.
        let mut l = DenseMatrix::zeros(n, n);
        let mut d = vec![0.0; n];
        for j in 0..n {
            let mut dj = self[(j, j)];
            for k in 0..j {
                dj -= l[(j, k)] * l[(j, k)] * d[k];
            }
            check_pivot(j, dj, tol)?;
            d[j] = dj;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)] * d[k];
                }
                l[(i, j)] = s / dj;
            }
        }
        let mut l_colptr = Vec::with_capacity(n + 1);
        let mut l_rowidx = Vec::new();
        let mut l_values = Vec::new();
        l_colptr.push(0);
        for j in 0..n {
            for i in j + 1..n {
                if l[(i, j)] != 0.0 {
                    l_rowidx.push(i);
                    l_values.push(l[(i, j)]);
                }
            }
            l_colptr.push(l_rowidx.len());
        }
        Ok(SymmetricFactorization::new(
            l_colptr,
            l_rowidx,
            l_values,
            d,
            (0..n).collect(),
        ))
    }
}

impl Factorize for SparseSymmetric {
    fn ldlt(&self) -> Result<SymmetricFactorization> {
        let perm = minimum_degree(self);
        sparse_ldlt(self, perm)
    }
}

/// Up-looking sparse `LDLᵀ` of `PᵀAP` for a given permutation.
pub(crate) fn sparse_ldlt(a: &SparseSymmetric, perm: Vec<usize>) -> Result<SymmetricFactorization> {
    let n = a.order();
    bump_factor_count();
    let mut pinv = vec![0; n];
    for (k, &p) in perm.iter().enumerate() {
        pinv[p] = k;
    }

    // Upper triangle of the permuted matrix, by column.
    let mut upper: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for j in 0..n {
        for (i, v) in a.column(j) {
            let (pi, pj) = (pinv[i], pinv[j]);
            let (r, c) = if pi <= pj { (pi, pj) } else { (pj, pi) };
            upper[c].push((r, v));
        }
    }
    for col in &mut upper {
        col.sort_unstable_by_key(|&(r, _)| r);
    }
    let tol = pivot_tolerance(a.diagonal().into_iter());

    // Symbolic: elimination tree and column counts of L.
    const NONE: usize = usize::MAX;
    let mut parent = vec![NONE; n];
    let mut flag = vec![NONE; n];
    let mut lnz = vec![0usize; n];
    for k in 0..n {
        flag[k] = k;
        for &(i0, _) in &upper[k] {
            let mut i = i0;
            if i >= k {
                continue;
            }
            while flag[i] != k {
                if parent[i] == NONE {
                    parent[i] = k;
                }
                lnz[i] += 1;
                flag[i] = k;
                i = parent[i];
            }
        }
    }
    let mut l_colptr = vec![0usize; n + 1];
    for k in 0..n {
        l_colptr[k + 1] = l_colptr[k] + lnz[k];
    }

    // Numeric: row k of L from a sparse triangular solve along the etree.
    let total = l_colptr[n];
    let mut l_rowidx = vec![0usize; total];
    let mut l_values = vec![0.0; total];
    let mut d = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut pattern = vec![0usize; n];
    lnz.iter_mut().for_each(|c| *c = 0);
    flag.iter_mut().for_each(|f| *f = NONE);
    for k in 0..n {
        y[k] = 0.0;
        let mut top = n;
        flag[k] = k;
        for &(i0, v) in &upper[k] {
            let mut i = i0;
            y[i] += v;
            let mut len = 0;
            while flag[i] != k {
                pattern[len] = i;
                len += 1;
                flag[i] = k;
                i = parent[i];
            }
            while len > 0 {
                top -= 1;
                len -= 1;
                pattern[top] = pattern[len];
            }
        }
        let mut dk = y[k];
        y[k] = 0.0;
        for &i in &pattern[top..n] {
            let yi = y[i];
            y[i] = 0.0;
            let start = l_colptr[i];
            let end = start + lnz[i];
            for p in start..end {
                y[l_rowidx[p]] -= l_values[p] * yi;
            }
            let lki = yi / d[i];
            dk -= lki * yi;
            l_rowidx[end] = k;
            l_values[end] = lki;
            lnz[i] += 1;
        }
        check_pivot(k, dk, tol)?;
        d[k] = dk;
    }
    Ok(SymmetricFactorization::new(
        l_colptr, l_rowidx, l_values, d, perm,
    ))
}

impl SymmetricFactorization {
    fn new(
        l_colptr: Vec<usize>,
        l_rowidx: Vec<usize>,
        l_values: Vec<f64>,
        d: Vec<f64>,
        perm: Vec<usize>,
    ) -> Self {
        let positive_definite = d.iter().all(|&x| x > 0.0);
        Self {
            order: d.len(),
            l_colptr,
            l_rowidx,
            l_values,
            d,
            perm,
            positive_definite,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    pub fn is_positive_definite(&self) -> bool {
        self.positive_definite
    }

    /// Stored strictly-lower entries of `L`.
    pub fn l_nnz(&self) -> usize {
        self.l_values.len()
    }

    /// Dense unit lower-triangular `L`.
    pub fn l_dense(&self) -> DenseMatrix {
        let n = self.order;
        let mut l = DenseMatrix::identity(n, n);
        for j in 0..n {
            for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                l[(self.l_rowidx[p], j)] = self.l_values[p];
            }
        }
        l
    }

    /// `max |PᵀAP − LDLᵀ|` for the matrix that produced this factorization.
    pub fn reconstruction_error(&self, a: &DenseMatrix) -> f64 {
        let n = self.order;
        let l = self.l_dense();
        let ldlt = &l * DenseMatrix::from_diagonal(&Vector::from_column_slice(&self.d)) * l.transpose();
        let mut err = 0.0_f64;
        for j in 0..n {
            for i in 0..n {
                let pa = a[(self.perm[i], self.perm[j])];
                err = err.max((pa - ldlt[(i, j)]).abs());
            }
        }
        err
    }

    /// Solves `A x = b` in place for one right-hand side.
    fn solve_in_place(&self, b: &[f64], x: &mut [f64]) {
        let n = self.order;
        for k in 0..n {
            x[k] = b[self.perm[k]];
        }
        for j in 0..n {
            let xj = x[j];
            if xj != 0.0 {
                for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                    x[self.l_rowidx[p]] -= self.l_values[p] * xj;
                }
            }
        }
        for (xk, dk) in x.iter_mut().zip(&self.d) {
            *xk /= dk;
        }
        for j in (0..n).rev() {
            let mut s = x[j];
            for p in self.l_colptr[j]..self.l_colptr[j + 1] {
                s -= self.l_values[p] * x[self.l_rowidx[p]];
            }
            x[j] = s;
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.order {
            return Err(RemlError::DimensionMismatch(format!(
                "right-hand side has {} rows, factorization order {}",
                b.len(),
                self.order
            )));
        }
        let mut work = vec![0.0; self.order];
        self.solve_in_place(b, &mut work);
        let mut out = vec![0.0; self.order];
        for k in 0..self.order {
            out[self.perm[k]] = work[k];
        }
        Ok(out)
    }

    /// Solves `A X = B` column by column; columns are independent and run in parallel.
    pub fn solve(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        if b.nrows() != self.order {
            return Err(RemlError::DimensionMismatch(format!(
                "right-hand side has {} rows, factorization order {}",
                b.nrows(),
                self.order
            )));
        }
        let cols: Vec<Vec<f64>> = (0..b.ncols())
            .into_par_iter()
            .map(|c| self.solve_vec(b.column(c).as_slice()).expect("rows checked"))
            .collect();
        let mut out = DenseMatrix::zeros(self.order, b.ncols());
        for (c, col) in cols.into_iter().enumerate() {
            out.set_column(c, &Vector::from_vec(col));
        }
        Ok(out)
    }

    /// `log |A| = Σ log d_ii`.
    pub fn logdet(&self) -> Result<f64> {
        if let Some(k) = self.d.iter().position(|&x| x <= 0.0) {
            return Err(RemlError::NotPositiveDefinite(format!(
                "pivot {k} is {:e}",
                self.d[k]
            )));
        }
        Ok(self.d.iter().map(|x| x.ln()).sum())
    }

    pub fn inverse(&self) -> DenseMatrix {
        let inv = self
            .solve(&DenseMatrix::identity(self.order, self.order))
            .expect("identity has matching rows");
        (&inv + inv.transpose()) * 0.5
    }
}
