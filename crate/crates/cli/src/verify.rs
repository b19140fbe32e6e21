//! Identity suite evaluated on one loaded instance.
//!
//! Each residual is an absolute maximum divided by `1 + max|reference|`.

use nalgebra::Cholesky;
use reml_core::contrast::{
    build_contrast, build_contrast_with, residual_projector_via_l2, weighted_projector,
    xvx_inverse_via_contrast,
};
use reml_core::infomat::{average_information_fast, derivative_bundle};
use reml_core::likelihood::{loglik_via_c, loglik_via_contrast, loglik_via_v, loglik_with_contrast};
use reml_core::linalg::{projector, DENSE_ORACLE_CAP};
use reml_core::mme::assemble;
use reml_core::{DenseMatrix, ModelSpec, RemlError, ThetaVector};
use serde::Serialize;

use crate::report::SCHEMA_VERSION;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub residual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub schema_version: &'static str,
    pub kind: &'static str,
    pub n: usize,
    pub p: usize,
    pub b: usize,
    pub names: Vec<String>,
    pub theta: Vec<f64>,
    /// `V̈ ≡ 0`, in which case the splitting term must vanish.
    pub linear: bool,
    /// `max |I_Z|` at `θ`.
    pub splitting_max_abs: f64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn rel(diff: f64, reference: f64) -> f64 {
    diff / (1.0 + reference.abs())
}

fn mat_rel(a: &DenseMatrix, reference: &DenseMatrix) -> f64 {
    rel((a - reference).amax(), reference.amax())
}

fn chol(a: &DenseMatrix) -> Result<Cholesky<f64, nalgebra::Dyn>, RemlError> {
    Cholesky::new(a.clone()).ok_or_else(|| RemlError::NotPositiveDefinite("dense oracle factorization".into()))
}

fn logdet(a: &DenseMatrix) -> Result<f64, RemlError> {
    Ok(2.0 * chol(a)?.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

fn inverse(a: &DenseMatrix) -> Result<DenseMatrix, RemlError> {
    Ok(chol(a)?.inverse())
}

/// Central differences, one-sided where the backward point leaves the admissible region.
fn difference<T>(
    spec: &ModelSpec,
    x0: &[f64],
    j: usize,
    f: impl Fn(&ThetaVector) -> Result<T, RemlError>,
    combine: impl Fn(T, T, f64) -> T,
) -> Result<T, RemlError> {
    let h = 1e-5 * (1.0 + x0[j].abs());
    let at = |d: f64| {
        let mut x = x0.to_vec();
        x[j] += d;
        spec.theta_from_slice(&x)
            .and_then(|t| spec.check_admissible(&t).map(|_| t))
    };
    let (lo, lo_step) = match at(-h) {
        Ok(t) => (t, h),
        Err(_) => (at(0.0)?, 0.0),
    };
    let (hi, hi_step) = match at(h) {
        Ok(t) => (t, h),
        Err(_) => (at(0.0)?, 0.0),
    };
    Ok(combine(f(&hi)?, f(&lo)?, hi_step + lo_step))
}

pub fn verify(spec: &ModelSpec, theta: &ThetaVector) -> Result<VerifyReport, RemlError> {
    if spec.n() > DENSE_ORACLE_CAP {
        return Err(RemlError::OracleCapExceeded {
            n: spec.n(),
            cap: DENSE_ORACLE_CAP,
        });
    }
    spec.check_admissible(theta)?;
    let mut checks = Vec::new();
    let mut push = |name: &str, residual: f64, tolerance: f64| {
        checks.push(Check {
            name: name.to_string(),
            residual,
            tolerance,
            pass: residual <= tolerance,
        })
    };
    let (n, p) = (spec.n(), spec.p());
    let x = spec.x();

    let lb = loglik_via_v(spec, theta)?.value;
    let la = loglik_via_contrast(spec, theta)?.value;
    let lc = loglik_via_c(spec, theta)?.value;
    push("loglik_routes", rel((la - lb).abs().max((lc - lb).abs()), lb), 1e-8);

    let blocks = spec.standard_blocks(theta)?;
    let h_inv = inverse(&blocks.h)?;
    let xhx = x.transpose() * &h_inv * x;
    let xhx_inv = inverse(&xhx)?;
    let hx = &h_inv * x;
    let ph = &h_inv - &hx * &xhx_inv * hx.transpose();
    let sys = assemble(spec, theta)?;
    let sol = sys.solve()?;
    let py = &ph * spec.y();
    push("py_equals_rinv_e", rel((&py - &sol.py).amax(), py.amax()), 1e-8);

    let w = sys.w().to_dense();
    let c = sys.c().to_dense();
    let c_inv = inverse(&c)?;
    let rw = &blocks.r_inv * &w;
    let p2 = &blocks.r_inv - &rw * &c_inv * rw.transpose();
    push("projector_via_c", mat_rel(&p2, &ph), 1e-8);

    let v = spec.variance_value(theta)?;
    let log_h = logdet(&blocks.h)?;
    let log_xhx = logdet(&xhx)?;
    let lhs = logdet(&v)? + logdet(&(x.transpose() * inverse(&v)? * x))?;
    let rhs = (n - p) as f64 * theta.sigma2.ln() + log_h + log_xhx;
    push("logdet_v_scale", rel((lhs - rhs).abs(), rhs), 1e-8);

    let lhs = sys.logdet_c()? + spec.logdet_r(theta)? + spec.logdet_g(theta)?;
    push("logdet_c", rel((lhs - log_h - log_xhx).abs(), log_h + log_xhx), 1e-8);

    let lr3 = if spec.b() > 0 {
        let zd = spec.z().to_dense();
        let inner = &blocks.g_inv + zd.transpose() * &blocks.r_inv * &zd;
        let lhs = logdet(&blocks.r)? + logdet(&inner)?;
        let rhs = log_h + logdet(&blocks.g_inv)?;
        rel((lhs - rhs).abs(), rhs)
    } else {
        0.0
    };
    push("logdet_h_factorization", lr3, 1e-8);
    push("woodbury", mat_rel(&blocks.h_inv, &h_inv), 1e-8);

    let cb = sys.c_inverse_blocks()?;
    let assembled = cb.assemble();
    let order = assembled.nrows();
    push(
        "c_inverse_blocks",
        mat_rel(&cb.xx, &xhx_inv).max((&assembled * &c - DenseMatrix::identity(order, order)).amax()),
        1e-8,
    );

    let q = n - p;
    let b = DenseMatrix::from_fn(q, q, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Equal => 2.0,
        std::cmp::Ordering::Greater => 0.5 / (1.0 + (i - j) as f64),
        std::cmp::Ordering::Less => 0.0,
    });
    let c0 = build_contrast(x)?;
    let c1 = build_contrast_with(x, &b)?;
    let resid = DenseMatrix::identity(n, n) - projector(x)?;
    let p_v = &ph / theta.sigma2;
    let xvx_inv = &xhx_inv * theta.sigma2;
    let (mut thm2, mut lem2, mut lem3) = (0.0_f64, 0.0_f64, 0.0_f64);
    for ct in [&c0, &c1] {
        thm2 = thm2
            .max((ct.l1.transpose() * x - DenseMatrix::identity(p, p)).amax())
            .max((ct.l2.transpose() * x).amax());
        lem2 = lem2.max((residual_projector_via_l2(&ct.l2)? - &resid).amax());
        lem3 = lem3
            .max(mat_rel(&weighted_projector(&v, x, &ct.l2)?.p, &p_v))
            .max(mat_rel(&xvx_inverse_via_contrast(&v, ct)?, &xvx_inv));
    }
    push("contrast_l1_l2", thm2, 1e-10);
    push("contrast_residual_projector", lem2, 1e-10);
    push("contrast_weighted_projector", lem3, 1e-10);
    let l0 = loglik_with_contrast(spec, theta, &c0)?.value;
    let l1 = loglik_with_contrast(spec, theta, &c1)?.value;
    push("contrast_invariance", rel((l0 - l1).abs(), l0), 1e-8);

    let bundle = derivative_bundle(spec, theta)?;
    let x0 = theta.to_vec();
    let k = x0.len();
    let mut fd_score = vec![0.0; k];
    let mut fd_info = DenseMatrix::zeros(k, k);
    for j in 0..k {
        fd_score[j] = difference(spec, &x0, j, |t| Ok(loglik_via_c(spec, t)?.value), |a, b, h| (a - b) / h)?;
        let col = difference(
            spec,
            &x0,
            j,
            |t| reml_core::infomat::score(spec, t),
            |a, b, h| a.iter().zip(&b).map(|(u, v)| (u - v) / h).collect(),
        )?;
        for i in 0..k {
            fd_info[(i, j)] = -col[i];
        }
    }
    let scale = fd_score.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let diff = bundle
        .score
        .iter()
        .zip(&fd_score)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    push("score_finite_difference", diff / scale.max(f64::MIN_POSITIVE), 1e-5);
    push(
        "observed_information_finite_difference",
        (&bundle.observed - &fd_info).amax() / fd_info.amax().max(f64::MIN_POSITIVE),
        1e-4,
    );

    let mid = (&bundle.observed + &bundle.fisher) * 0.5;
    push(
        "information_splitting",
        mat_rel(&(mid - &bundle.average), &bundle.splitting),
        1e-9,
    );
    let fast = average_information_fast(spec, theta)?;
    push("average_information_fast", mat_rel(&fast, &bundle.average), 1e-8);
    let linear = spec.is_linear();
    let splitting_max_abs = bundle.splitting.amax();
    if linear {
        push("splitting_vanishes", rel(splitting_max_abs, bundle.observed.amax()), 1e-9);
    }

    let passed = checks.iter().all(|c| c.pass);
    Ok(VerifyReport {
        schema_version: SCHEMA_VERSION,
        kind: "verify",
        n,
        p,
        b: spec.b(),
        names: spec.param_names().to_vec(),
        theta: x0,
        linear,
        splitting_max_abs,
        checks,
        passed,
    })
}
