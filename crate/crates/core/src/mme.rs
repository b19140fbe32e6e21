//! Henderson's mixed model equations
//!
//! ```text
//! [XᵀR⁻¹X   XᵀR⁻¹Z      ] [τ̂]   [XᵀR⁻¹y]
//! [ZᵀR⁻¹X   ZᵀR⁻¹Z + G⁻¹] [ũ] = [ZᵀR⁻¹y]
//! ```
//!
//! assembled on the scale-free level (`R`, `G` without `σ²`), so the Schur
//! complement of the random block is `XᵀH⁻¹X`. One sparse `LDLᵀ` of `C` per
//! system serves the solution, `log|C|`, `C⁻¹` blocks and every
//! multi-right-hand-side solve.

use std::cell::Cell;
use std::sync::OnceLock;

use crate::error::{RemlError, Result};
use crate::linalg::{
    ldlt_factor, symmetrize, CscMatrix, DenseMatrix, SparseSymmetric, SymmetricFactorization,
    Vector,
};
use crate::model::{ModelSpec, ThetaVector};

thread_local! {
    static C_FACTOR_COUNT: Cell<usize> = const { Cell::new(0) };
}

/// Factorizations of a coefficient matrix `C` performed so far on the calling thread.
pub fn c_factorizations_on_this_thread() -> usize {
    C_FACTOR_COUNT.with(Cell::get)
}

#[derive(Debug)]
pub struct MmeSystem {
    c: SparseSymmetric,
    rhs: Vector,
    w: CscMatrix,
    r_inv: CscMatrix,
    g_inv: Option<CscMatrix>,
    y: Vector,
    p: usize,
    logdet_r: f64,
    logdet_g: f64,
    factor: OnceLock<Result<SymmetricFactorization>>,
}

#[derive(Debug, Clone)]
pub struct MmeSolution {
    pub tau_hat: Vector,
    pub u_tilde: Vector,
    /// `e = y − Xτ̂ − Zũ`
    pub e: Vector,
    /// `R⁻¹e`, which equals `P_H y` with `P_H = σ² P`.
    pub py: Vector,
    pub logdet_c: f64,
}

#[derive(Debug, Clone)]
pub struct CInverseBlocks {
    pub xx: DenseMatrix,
    pub xz: DenseMatrix,
    pub zx: DenseMatrix,
    pub zz: DenseMatrix,
}

impl CInverseBlocks {
    pub fn assemble(&self) -> DenseMatrix {
        let p = self.xx.nrows();
        let b = self.zz.nrows();
        let mut out = DenseMatrix::zeros(p + b, p + b);
        out.view_mut((0, 0), (p, p)).copy_from(&self.xx);
        out.view_mut((0, p), (p, b)).copy_from(&self.xz);
        out.view_mut((p, 0), (b, p)).copy_from(&self.zx);
        out.view_mut((p, p), (b, b)).copy_from(&self.zz);
        out
    }
}

/// `W = [X, Z]` with the dense `X` columns followed by the sparse `Z` columns.
fn design_w(spec: &ModelSpec) -> CscMatrix {
    let x = spec.x();
    let z = spec.z().csc();
    let mut columns: Vec<Vec<(usize, f64)>> = (0..x.ncols())
        .map(|j| {
            (0..x.nrows())
                .filter(|&i| x[(i, j)] != 0.0)
                .map(|i| (i, x[(i, j)]))
                .collect()
        })
        .collect();
    columns.extend((0..z.ncols()).map(|j| z.column(j).collect()));
    CscMatrix::from_columns(x.nrows(), columns).expect("columns are ordered")
}

/// Builds `C` and `WᵀR⁻¹y` at `θ`.
pub fn assemble(spec: &ModelSpec, theta: &ThetaVector) -> Result<MmeSystem> {
    spec.check_admissible(theta)?;
    let p = spec.p();
    let b = spec.b();
    let r_inv = spec.r_inverse(theta)?;
    let logdet_r = spec.logdet_r(theta)?;
    let (g_inv, logdet_g) = if b > 0 {
        (Some(spec.g_inverse(theta)?), spec.logdet_g(theta)?)
    } else {
        (None, 0.0)
    };
    let w = design_w(spec);
    let order = p + b;

    let mut triplets = Vec::new();
    for j in 0..order {
        let wj: Vec<f64> = {
            let mut dense = vec![0.0; spec.n()];
            for (i, v) in w.column(j) {
                dense[i] = v;
            }
            dense
        };
        let t = r_inv.mul_vec(&wj);
        for i in j..order {
            let cij: f64 = w.column(i).map(|(r, v)| v * t[r]).sum();
            if cij != 0.0 || i == j {
                triplets.push((i, j, cij));
            }
        }
    }
    if let Some(gi) = &g_inv {
        for j in 0..b {
            for (i, v) in gi.column(j) {
                if i >= j {
                    triplets.push((p + i, p + j, v));
                }
            }
        }
    }
    let c = SparseSymmetric::from_triplets(order, triplets)?;
    let r_inv_y = r_inv.mul_vec(spec.y().as_slice());
    let rhs = Vector::from_vec(w.tr_mul_vec(&r_inv_y));
    Ok(MmeSystem {
        c,
        rhs,
        w,
        r_inv,
        g_inv,
        y: spec.y().clone(),
        p,
        logdet_r,
        logdet_g,
        factor: OnceLock::new(),
    })
}

impl MmeSystem {
    pub fn c(&self) -> &SparseSymmetric {
        &self.c
    }

    pub fn rhs(&self) -> &Vector {
        &self.rhs
    }

    pub fn w(&self) -> &CscMatrix {
        &self.w
    }

    pub fn r_inv(&self) -> &CscMatrix {
        &self.r_inv
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn b(&self) -> usize {
        self.c.order() - self.p
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn logdet_r(&self) -> f64 {
        self.logdet_r
    }

    pub fn logdet_g(&self) -> f64 {
        self.logdet_g
    }

    /// `WᵀR⁻¹W`, i.e. `C` without `G⁻¹`.
    pub fn wt_rinv_w(&self) -> DenseMatrix {
        let mut m = self.c.to_dense();
        if let Some(gi) = &self.g_inv {
            for j in 0..gi.ncols() {
                for (i, v) in gi.column(j) {
                    m[(self.p + i, self.p + j)] -= v;
                }
            }
        }
        m
    }

    /// The cached factorization of `C`, computed on first use.
    pub fn factorization(&self) -> Result<&SymmetricFactorization> {
        self.factor
            .get_or_init(|| {
                C_FACTOR_COUNT.with(|c| c.set(c.get() + 1));
                ldlt_factor(&self.c)
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn logdet_c(&self) -> Result<f64> {
        self.factorization()?.logdet()
    }

    /// `C⁻¹ B` for a block of right-hand sides.
    pub fn solve_c(&self, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        self.factorization()?.solve(rhs)
    }

    pub fn solve(&self) -> Result<MmeSolution> {
        let f = self.factorization()?;
        let beta = Vector::from_vec(f.solve_vec(self.rhs.as_slice())?);
        let fitted = self.w.mul_vec(beta.as_slice());
        let e = &self.y - Vector::from_vec(fitted);
        let py = Vector::from_vec(self.r_inv.mul_vec(e.as_slice()));
        Ok(MmeSolution {
            tau_hat: beta.rows(0, self.p).into_owned(),
            u_tilde: beta.rows(self.p, self.b()).into_owned(),
            e,
            py,
            logdet_c: f.logdet()?,
        })
    }

    pub fn c_inverse_blocks(&self) -> Result<CInverseBlocks> {
        let order = self.c.order();
        let inv = symmetrize(&self.solve_c(&DenseMatrix::identity(order, order))?);
        let (p, b) = (self.p, self.b());
        Ok(CInverseBlocks {
            xx: inv.view((0, 0), (p, p)).into_owned(),
            xz: inv.view((0, p), (p, b)).into_owned(),
            zx: inv.view((p, 0), (b, p)).into_owned(),
            zz: inv.view((p, p), (b, b)).into_owned(),
        })
    }

    /// `σ² C⁻¹`, the joint covariance of `(τ̂ − τ, ũ − u)`.
    pub fn prediction_variance(&self, sigma2: f64) -> Result<DenseMatrix> {
        Ok(self.c_inverse_blocks()?.assemble() * sigma2)
    }

    /// `P_H V = R⁻¹(V − W C⁻¹ WᵀR⁻¹V)` for a block of vectors, one solve.
    pub fn projected_apply(&self, v: &DenseMatrix) -> Result<DenseMatrix> {
        if v.nrows() != self.n() {
            return Err(RemlError::DimensionMismatch(format!(
                "vectors have {} rows, expected {}",
                v.nrows(),
                self.n()
            )));
        }
        let rv = self.r_inv.mul_dense(v);
        let beta = self.solve_c(&self.w.tr_mul_dense(&rv))?;
        let resid = v - self.w.mul_dense(&beta);
        Ok(self.r_inv.mul_dense(&resid))
    }

    /// `P_H v`.
    pub fn projected_matvec(&self, v: &Vector) -> Result<Vector> {
        let out = self.projected_apply(&DenseMatrix::from_column_slice(v.len(), 1, v.as_slice()))?;
        Ok(out.column(0).into_owned())
    }
}

/// Assembles and solves in one call.
pub fn solve_mme(spec: &ModelSpec, theta: &ThetaVector) -> Result<MmeSolution> {
    assemble(spec, theta)?.solve()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, max_abs_vec, projector};
    use crate::model::{Parameterization, RandomDesign, VarianceStructure};

    fn fixed_only(y: Vector, x: DenseMatrix) -> ModelSpec {
        let n = y.len();
        ModelSpec::new(
            y,
            x,
            RandomDesign::none(n),
            VarianceStructure::Identity { dim: 0 },
            VarianceStructure::Identity { dim: n },
            Parameterization::Ratio,
        )
        .unwrap()
    }

    fn line_x(n: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 })
    }

    #[test]
    fn no_random_effects_gives_xtx() {
        let x = line_x(5);
        let m = fixed_only(Vector::from_fn(5, |i, _| (i * i) as f64), x.clone());
        let sys = assemble(&m, &ThetaVector::new(1.0, &[], &[])).unwrap();
        assert_eq!(sys.c().order(), 2);
        assert!(max_abs(&(sys.c().to_dense() - x.transpose() * &x)) < 1e-14);
    }

    #[test]
    fn intercept_with_identity_z() {
        let n = 4;
        let gamma = 0.5;
        let m = ModelSpec::new(
            Vector::zeros(n),
            DenseMatrix::from_element(n, 1, 1.0),
            RandomDesign::from_dense(&DenseMatrix::identity(n, n), vec![n]).unwrap(),
            VarianceStructure::IidBlocks { sizes: vec![n] },
            VarianceStructure::Identity { dim: n },
            Parameterization::Ratio,
        )
        .unwrap();
        let sys = assemble(&m, &ThetaVector::new(1.0, &[gamma], &[])).unwrap();
        let c = sys.c().to_dense();
        let mut expected = DenseMatrix::zeros(n + 1, n + 1);
        expected[(0, 0)] = n as f64;
        for i in 1..=n {
            expected[(0, i)] = 1.0;
            expected[(i, 0)] = 1.0;
            expected[(i, i)] = 1.0 + 1.0 / gamma;
        }
        assert_eq!(c, expected);
        assert_eq!(c, c.transpose());
    }

    #[test]
    fn fixed_only_solution_is_ols() {
        let n = 7;
        let x = line_x(n);
        let y = Vector::from_fn(n, |i, _| ((i as f64) * 1.3).sin() + 2.0);
        let m = fixed_only(y.clone(), x.clone());
        let sol = solve_mme(&m, &ThetaVector::new(1.0, &[], &[])).unwrap();
        let ols = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
        assert!(max_abs_vec(&(&sol.tau_hat - ols)) < 1e-12);
        let resid = (DenseMatrix::identity(n, n) - projector(&x).unwrap()) * &y;
        assert!(max_abs_vec(&(&sol.e - resid)) < 1e-12);
        assert_eq!(sol.u_tilde.len(), 0);
    }

    #[test]
    fn perfect_fit_has_zero_residual() {
        let n = 6;
        let x = line_x(n);
        let y = &x * Vector::from_column_slice(&[1.5, -0.25]);
        let sol = solve_mme(&fixed_only(y, x), &ThetaVector::new(1.0, &[], &[])).unwrap();
        assert!(max_abs_vec(&sol.e) < 1e-13);
        assert!(max_abs_vec(&sol.py) < 1e-13);
    }

    #[test]
    fn factorization_is_cached() {
        let n = 6;
        let m = fixed_only(Vector::from_fn(n, |i, _| i as f64), line_x(n));
        let sys = assemble(&m, &ThetaVector::new(1.0, &[], &[])).unwrap();
        let before = c_factorizations_on_this_thread();
        sys.solve().unwrap();
        sys.c_inverse_blocks().unwrap();
        sys.projected_matvec(&Vector::from_element(n, 1.0)).unwrap();
        assert_eq!(c_factorizations_on_this_thread(), before + 1);
    }

    #[test]
    fn projected_matvec_annihilates_x() {
        let n = 8;
        let x = line_x(n);
        let m = fixed_only(Vector::from_fn(n, |i, _| (i as f64).sqrt()), x.clone());
        let sys = assemble(&m, &ThetaVector::new(2.0, &[], &[])).unwrap();
        let v = &x * Vector::from_column_slice(&[0.3, 2.0]);
        assert!(max_abs_vec(&sys.projected_matvec(&v).unwrap()) < 1e-12);
        let py = sys.projected_matvec(m.y()).unwrap();
        assert!(max_abs_vec(&(py - sys.solve().unwrap().py)) < 1e-13);
        assert!(matches!(
            sys.projected_matvec(&Vector::zeros(3)),
            Err(RemlError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn prediction_variance_scales_linearly() {
        let n = 5;
        let m = fixed_only(Vector::from_fn(n, |i, _| i as f64), DenseMatrix::from_element(n, 1, 1.0));
        let sys = assemble(&m, &ThetaVector::new(1.0, &[], &[])).unwrap();
        let v1 = sys.prediction_variance(1.0).unwrap();
        assert!((v1[(0, 0)] - 1.0 / n as f64).abs() < 1e-15);
        assert!(max_abs(&(sys.prediction_variance(4.0).unwrap() - v1 * 4.0)) < 1e-15);
    }
}
