//! Score vector and information matrices of the restricted log-likelihood.
//!
//! With `P` the V-scale projector and `V̇ᵢ`, `V̈ᵢⱼ` the derivatives of `V`:
//!
//! ```text
//! s(θᵢ)      = −½{tr(PV̇ᵢ) − yᵀPV̇ᵢPy}
//! I_O(θᵢ,θⱼ) = ½{tr(PV̈ᵢⱼ) − tr(PV̇ᵢPV̇ⱼ) + 2yᵀPV̇ᵢPV̇ⱼPy − yᵀPV̈ᵢⱼPy}
//! I(θᵢ,θⱼ)   = ½tr(PV̇ᵢPV̇ⱼ)
//! I_A(θᵢ,θⱼ) = ½yᵀPV̇ᵢPV̇ⱼPy
//! I_Z(θᵢ,θⱼ) = ¼{tr(PV̈ᵢⱼ) − yᵀPV̈ᵢⱼPy}
//! ```
//!
//! so that `(I_O + I)/2 = I_A + I_Z`. The dense functions form `P` and are
//! limited to `n ≤ DENSE_ORACLE_CAP`; [`average_information_fast`] and
//! [`score_fast`] work from the mixed model equations.

use rayon::prelude::*;
use serde::Serialize;

use crate::contrast::projector_from_inverse;
use crate::error::{RemlError, Result};
use crate::likelihood::{loglik_from_system, LikelihoodValue};
use crate::linalg::{serialize_rows, symmetrize, DenseMatrix, Vector, DENSE_ORACLE_CAP};
use crate::mme::{assemble, MmeSystem};
use crate::model::{ModelSpec, ResidualPart, StructuredMatrix, ThetaVector};

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeBundle {
    pub score: Vec<f64>,
    #[serde(serialize_with = "serialize_rows")]
    pub observed: DenseMatrix,
    #[serde(serialize_with = "serialize_rows")]
    pub fisher: DenseMatrix,
    #[serde(serialize_with = "serialize_rows")]
    pub average: DenseMatrix,
    #[serde(serialize_with = "serialize_rows")]
    pub splitting: DenseMatrix,
}

/// Dense intermediates shared by every formula.
struct DenseWork {
    p: DenseMatrix,
    py: Vector,
    /// `P V̇ᵢ`
    pv: Vec<DenseMatrix>,
    /// `V̇ᵢ P y`
    u: Vec<Vector>,
    /// `P V̇ᵢ P y`
    pu: Vec<Vector>,
}

impl DenseWork {
    fn new(spec: &ModelSpec, theta: &ThetaVector) -> Result<Self> {
        if spec.n() > DENSE_ORACLE_CAP {
            return Err(RemlError::OracleCapExceeded {
                n: spec.n(),
                cap: DENSE_ORACLE_CAP,
            });
        }
        spec.check_admissible(theta)?;
        let v = spec.variance_value(theta)?;
        let p = projector_from_inverse(&v, spec.x())?;
        let py = &p * spec.y();
        let vdot = (0..spec.n_params())
            .map(|i| spec.variance_first_derivative(theta, i))
            .collect::<Result<Vec<_>>>()?;
        let pv: Vec<DenseMatrix> = vdot.par_iter().map(|d| &p * d).collect();
        let u: Vec<Vector> = vdot.iter().map(|d| d * &py).collect();
        let pu = u.iter().map(|ui| &p * ui).collect();
        Ok(Self { p, py, pv, u, pu })
    }

    fn dim(&self) -> usize {
        self.pv.len()
    }

    fn score(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| -0.5 * (self.pv[i].trace() - self.py.dot(&self.u[i])))
            .collect()
    }

    /// `tr(PV̇ᵢPV̇ⱼ)`
    fn trace_pair(&self, i: usize, j: usize) -> f64 {
        self.pv[i].component_mul(&self.pv[j].transpose()).sum()
    }

    fn symmetric(&self, f: impl Fn(usize, usize) -> f64) -> DenseMatrix {
        let k = self.dim();
        let mut m = DenseMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..=i {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    fn fisher(&self) -> DenseMatrix {
        self.symmetric(|i, j| 0.5 * self.trace_pair(i, j))
    }

    fn average(&self) -> DenseMatrix {
        symmetrize(&self.symmetric(|i, j| 0.5 * self.u[i].dot(&self.pu[j])))
    }

    /// `(tr(PV̈ᵢⱼ), yᵀPV̈ᵢⱼPy)` for every pair.
    fn second_terms(&self, spec: &ModelSpec, theta: &ThetaVector) -> Result<Vec<Vec<(f64, f64)>>> {
        let k = self.dim();
        let mut out = vec![vec![(0.0, 0.0); k]; k];
        for i in 0..k {
            for j in 0..=i {
                let s = spec.second_structured(theta, i, j)?;
                if s.is_zero() {
                    continue;
                }
                let d = s.to_dense(spec.z());
                let t = (self.p.component_mul(&d).sum(), self.py.dot(&(&d * &self.py)));
                out[i][j] = t;
                out[j][i] = t;
            }
        }
        Ok(out)
    }

    fn observed(&self, second: &[Vec<(f64, f64)>]) -> DenseMatrix {
        self.symmetric(|i, j| {
            let (tr2, q2) = second[i][j];
            0.5 * (tr2 - self.trace_pair(i, j) + 2.0 * self.u[i].dot(&self.pu[j]) - q2)
        })
    }

    fn splitting(&self, second: &[Vec<(f64, f64)>]) -> DenseMatrix {
        self.symmetric(|i, j| {
            let (tr2, q2) = second[i][j];
            0.25 * (tr2 - q2)
        })
    }
}

pub fn score(spec: &ModelSpec, theta: &ThetaVector) -> Result<Vec<f64>> {
    Ok(DenseWork::new(spec, theta)?.score())
}

pub fn observed_information(spec: &ModelSpec, theta: &ThetaVector) -> Result<DenseMatrix> {
    let w = DenseWork::new(spec, theta)?;
    let second = w.second_terms(spec, theta)?;
    Ok(w.observed(&second))
}

pub fn fisher_information(spec: &ModelSpec, theta: &ThetaVector) -> Result<DenseMatrix> {
    Ok(DenseWork::new(spec, theta)?.fisher())
}

/// `ξ = Py`, `ηᵢ = V̇ᵢξ`, `ζⱼ = Pηⱼ`, entry `ηᵢᵀζⱼ/2`.
pub fn average_information_dense(spec: &ModelSpec, theta: &ThetaVector) -> Result<DenseMatrix> {
    Ok(DenseWork::new(spec, theta)?.average())
}

pub fn splitting_residual(spec: &ModelSpec, theta: &ThetaVector) -> Result<DenseMatrix> {
    let w = DenseWork::new(spec, theta)?;
    let second = w.second_terms(spec, theta)?;
    Ok(w.splitting(&second))
}

pub fn derivative_bundle(spec: &ModelSpec, theta: &ThetaVector) -> Result<DerivativeBundle> {
    let w = DenseWork::new(spec, theta)?;
    let second = w.second_terms(spec, theta)?;
    Ok(DerivativeBundle {
        score: w.score(),
        observed: w.observed(&second),
        fisher: w.fisher(),
        average: w.average(),
        splitting: w.splitting(&second),
    })
}

/// Which information matrix drives an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InformationKind {
    Observed,
    Fisher,
    Average,
}

/// Score with one information matrix; `Average` uses the factorized path.
pub fn score_and_information(
    spec: &ModelSpec,
    theta: &ThetaVector,
    kind: InformationKind,
) -> Result<(Vec<f64>, DenseMatrix)> {
    match kind {
        InformationKind::Observed => {
            let w = DenseWork::new(spec, theta)?;
            let second = w.second_terms(spec, theta)?;
            Ok((w.score(), w.observed(&second)))
        }
        InformationKind::Fisher => {
            let w = DenseWork::new(spec, theta)?;
            Ok((w.score(), w.fisher()))
        }
        InformationKind::Average => {
            let q = fast_quantities(spec, theta)?;
            Ok((q.score, q.average))
        }
    }
}

/// Likelihood, score and `I_A` from one factorization of `C`.
#[derive(Debug, Clone, Serialize)]
pub struct FastQuantities {
    pub loglik: LikelihoodValue,
    pub score: Vec<f64>,
    #[serde(serialize_with = "serialize_rows")]
    pub average: DenseMatrix,
}

/// `Y = {V̇ᵢξ}` with `ξ = R⁻¹e/σ²`, the V-scale `Py`.
fn working_vectors(spec: &ModelSpec, theta: &ThetaVector, xi: &Vector) -> Result<Vec<Vector>> {
    (0..spec.n_params())
        .map(|i| Ok(spec.first_structured(theta, i)?.apply(spec.z(), xi)))
        .collect()
}

/// `I_A = YᵀΞ/(2σ²)` with `Ξ = R⁻¹(Y − WB)`, `CB = WᵀR⁻¹Y`.
fn average_from_system(sys: &MmeSystem, y_cols: &[Vector], sigma2: f64) -> Result<DenseMatrix> {
    let y = DenseMatrix::from_columns(y_cols);
    let xi = sys.projected_apply(&y)?;
    Ok(symmetrize(&(y.transpose() * xi / (2.0 * sigma2))))
}

pub fn average_information_fast(spec: &ModelSpec, theta: &ThetaVector) -> Result<DenseMatrix> {
    spec.check_admissible(theta)?;
    let sys = assemble(spec, theta)?;
    let xi = sys.solve()?.py / theta.sigma2;
    let y_cols = working_vectors(spec, theta, &xi)?;
    average_from_system(&sys, &y_cols, theta.sigma2)
}

/// Trace pieces needed for `tr(P_H A) = tr(R⁻¹A) − tr(C⁻¹ WᵀR⁻¹AR⁻¹W)`.
struct TraceContext {
    p: usize,
    c_inv: DenseMatrix,
    /// `WᵀR⁻¹W`
    m: DenseMatrix,
    /// `R⁻¹W`
    rw: DenseMatrix,
    tr_r_inv: f64,
}

impl TraceContext {
    fn new(sys: &MmeSystem) -> Result<Self> {
        let order = sys.c().order();
        let c_inv = symmetrize(&sys.solve_c(&DenseMatrix::identity(order, order))?);
        let w = sys.w().to_dense();
        Ok(Self {
            p: sys.p(),
            c_inv,
            m: sys.wt_rinv_w(),
            rw: sys.r_inv().mul_dense(&w),
            tr_r_inv: sys.r_inv().trace(),
        })
    }

    fn trace_ph(&self, sys: &MmeSystem, a: &StructuredMatrix) -> f64 {
        let order = self.m.nrows();
        let mut direct = 0.0;
        let mut k = DenseMatrix::zeros(order, order);
        match &a.residual {
            ResidualPart::Zero => {}
            ResidualPart::ScaledIdentity(c) => {
                direct += c * self.tr_r_inv;
                k += self.rw.transpose() * &self.rw * *c;
            }
            ResidualPart::Dense(d) => {
                direct += sys.r_inv().trace_product(d);
                k += self.rw.transpose() * d * &self.rw;
            }
        }
        if let Some(g) = &a.random {
            let b = order - self.p;
            let mz = self.m.columns(self.p, b);
            let mzz = self.m.view((self.p, self.p), (b, b));
            direct += g.component_mul(&mzz.transpose()).sum();
            k += mz * g * mz.transpose();
        }
        direct - self.c_inv.component_mul(&k).sum()
    }
}

fn score_from_system(
    spec: &ModelSpec,
    theta: &ThetaVector,
    sys: &MmeSystem,
    xi: &Vector,
    y_cols: &[Vector],
) -> Result<Vec<f64>> {
    let ctx = TraceContext::new(sys)?;
    (0..spec.n_params())
        .map(|i| {
            let d = spec.first_structured(theta, i)?;
            let tr = ctx.trace_ph(sys, &d) / theta.sigma2;
            Ok(-0.5 * (tr - xi.dot(&y_cols[i])))
        })
        .collect()
}

pub fn score_fast(spec: &ModelSpec, theta: &ThetaVector) -> Result<Vec<f64>> {
    spec.check_admissible(theta)?;
    let sys = assemble(spec, theta)?;
    let xi = sys.solve()?.py / theta.sigma2;
    let y_cols = working_vectors(spec, theta, &xi)?;
    score_from_system(spec, theta, &sys, &xi, &y_cols)
}

pub fn fast_quantities(spec: &ModelSpec, theta: &ThetaVector) -> Result<FastQuantities> {
    spec.check_admissible(theta)?;
    let sys = assemble(spec, theta)?;
    let loglik = loglik_from_system(spec, theta, &sys)?;
    let xi = sys.solve()?.py / theta.sigma2;
    let y_cols = working_vectors(spec, theta, &xi)?;
    Ok(FastQuantities {
        loglik,
        score: score_from_system(spec, theta, &sys, &xi, &y_cols)?,
        average: average_from_system(&sys, &y_cols, theta.sigma2)?,
    })
}
