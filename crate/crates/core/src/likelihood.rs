//! The restricted log-likelihood `ℓ_R(θ)` through three routes:
//!
//! * **contrast**: density of the error contrasts `L₂ᵀy ~ N(0, L₂ᵀVL₂)`;
//! * **dense V**: `−½{(n−ν)log 2π + log|V| + log|XᵀV⁻¹X| + yᵀPy}`;
//! * **factorized C**: `−½{(n−ν)log(2πσ²) + log|R| + log|G| + log|C| + yᵀPy}`,
//!   the production route.
//!
//! The contrast density depends on the scaling of `L₂` through
//! `log|L₂ᵀL₂|`; the contrast route adds the volume term
//! `log|XᵀX| − log|L₂ᵀL₂|` so its value is the same for every valid `L₂`
//! and agrees with the other two routes absolutely.

use std::f64::consts::PI;

use serde::Serialize;

use crate::contrast::{build_contrast, ErrorContrast};
use crate::error::{RemlError, Result};
use crate::linalg::{ldlt_factor, spd_logdet, symmetrize, DenseMatrix, Vector, DENSE_ORACLE_CAP};
use crate::mme::{assemble, MmeSystem};
use crate::model::{ModelSpec, ThetaVector};
use crate::simulate::normal_stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Contrast,
    DenseV,
    FactorizedC,
}

/// Additive pieces of `−2ℓ_R`; only those used by the route are set.
#[derive(Debug, Clone, Default, Serialize)]
pub struct LikelihoodComponents {
    pub constant: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logdet_l2vl2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contrast_volume: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logdet_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logdet_xvx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logdet_r: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logdet_g: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logdet_c: Option<f64>,
    /// `yᵀPy`
    pub quadratic: f64,
}

impl LikelihoodComponents {
    fn total(&self) -> f64 {
        self.constant
            + [
                self.logdet_l2vl2,
                self.contrast_volume,
                self.logdet_v,
                self.logdet_xvx,
                self.logdet_r,
                self.logdet_g,
                self.logdet_c,
            ]
            .iter()
            .flatten()
            .sum::<f64>()
            + self.quadratic
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LikelihoodValue {
    pub value: f64,
    pub route: Route,
    pub components: LikelihoodComponents,
}

impl LikelihoodValue {
    fn from_components(route: Route, components: LikelihoodComponents) -> Result<Self> {
        let value = -0.5 * components.total();
        if !value.is_finite() {
            return Err(RemlError::NotPositiveDefinite(format!(
                "{route:?} route produced a non-finite log-likelihood"
            )));
        }
        Ok(Self {
            value,
            route,
            components,
        })
    }

    /// The contrast density without the volume term: `−½{(n−ν)log 2π + log|L₂ᵀVL₂| + y₂ᵀ(L₂ᵀVL₂)⁻¹y₂}`.
    pub fn raw_contrast_density(&self) -> Option<f64> {
        self.components
            .contrast_volume
            .map(|vol| self.value + 0.5 * vol)
    }
}

fn check_dense_cap(spec: &ModelSpec) -> Result<()> {
    if spec.n() > DENSE_ORACLE_CAP {
        return Err(RemlError::OracleCapExceeded {
            n: spec.n(),
            cap: DENSE_ORACLE_CAP,
        });
    }
    Ok(())
}

fn residual_dof(spec: &ModelSpec) -> f64 {
    (spec.n() - spec.p()) as f64
}

/// Contrast route with `L` from [`build_contrast`].
pub fn loglik_via_contrast(spec: &ModelSpec, theta: &ThetaVector) -> Result<LikelihoodValue> {
    check_dense_cap(spec)?;
    let contrast = build_contrast(spec.x())?;
    loglik_with_contrast(spec, theta, &contrast)
}

/// Contrast route for a caller-supplied error contrast.
pub fn loglik_with_contrast(
    spec: &ModelSpec,
    theta: &ThetaVector,
    contrast: &ErrorContrast,
) -> Result<LikelihoodValue> {
    check_dense_cap(spec)?;
    let v = spec.variance_value(theta)?;
    let l2 = &contrast.l2;
    let inner = symmetrize(&(l2.transpose() * &v * l2));
    let f = ldlt_factor(&inner)?;
    let y2 = l2.transpose() * spec.y();
    let quadratic = y2.dot(&Vector::from_vec(f.solve_vec(y2.as_slice())?));
    let x = spec.x();
    let volume = spd_logdet(&(x.transpose() * x))? - spd_logdet(&(l2.transpose() * l2))?;
    LikelihoodValue::from_components(
        Route::Contrast,
        LikelihoodComponents {
            constant: residual_dof(spec) * (2.0 * PI).ln(),
            logdet_l2vl2: Some(f.logdet()?),
            contrast_volume: Some(volume),
            quadratic,
            ..Default::default()
        },
    )
}

/// Dense route through `V`, `XᵀV⁻¹X` and `P`.
pub fn loglik_via_v(spec: &ModelSpec, theta: &ThetaVector) -> Result<LikelihoodValue> {
    check_dense_cap(spec)?;
    let v = spec.variance_value(theta)?;
    let fv = ldlt_factor(&v)?;
    let logdet_v = fv.logdet()?;
    let x = spec.x();
    let vx = fv.solve(x)?;
    let vy = Vector::from_vec(fv.solve_vec(spec.y().as_slice())?);
    let xvx = symmetrize(&(x.transpose() * &vx));
    let fx = ldlt_factor(&xvx)?;
    let xvy = x.transpose() * &vy;
    let coef = Vector::from_vec(fx.solve_vec(xvy.as_slice())?);
    let py = &vy - &vx * coef;
    LikelihoodValue::from_components(
        Route::DenseV,
        LikelihoodComponents {
            constant: residual_dof(spec) * (2.0 * PI).ln(),
            logdet_v: Some(logdet_v),
            logdet_xvx: Some(fx.logdet()?),
            quadratic: spec.y().dot(&py),
            ..Default::default()
        },
    )
}

/// Production route through the mixed model equations.
pub fn loglik_via_c(spec: &ModelSpec, theta: &ThetaVector) -> Result<LikelihoodValue> {
    let sys = assemble(spec, theta)?;
    loglik_from_system(spec, theta, &sys)
}

/// Factorized route reusing an assembled system.
pub fn loglik_from_system(
    spec: &ModelSpec,
    theta: &ThetaVector,
    sys: &MmeSystem,
) -> Result<LikelihoodValue> {
    let sol = sys.solve()?;
    let s2 = theta.sigma2;
    LikelihoodValue::from_components(
        Route::FactorizedC,
        LikelihoodComponents {
            constant: residual_dof(spec) * (2.0 * PI * s2).ln(),
            logdet_r: Some(sys.logdet_r()),
            logdet_g: Some(sys.logdet_g()),
            logdet_c: Some(sol.logdet_c),
            quadratic: spec.y().dot(&sol.py) / s2,
            ..Default::default()
        },
    )
}

/// Every route that applies at this problem size.
pub fn loglik_all_routes(spec: &ModelSpec, theta: &ThetaVector) -> Result<Vec<LikelihoodValue>> {
    let mut out = Vec::with_capacity(3);
    if spec.n() <= DENSE_ORACLE_CAP {
        out.push(loglik_via_contrast(spec, theta)?);
        out.push(loglik_via_v(spec, theta)?);
    }
    out.push(loglik_via_c(spec, theta)?);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BiasProbe {
    pub ml_mean: f64,
    pub reml_mean: f64,
}

/// Monte-Carlo means of the ML (`RSS/n`) and REML (`RSS/(n−ν)`) estimates of
/// `σ²` in a fixed-effects model with `ν = p` columns (intercept plus
/// uniform covariates) and `y ~ N(0, σ² I)`.
pub fn reml_vs_ml_bias_probe(
    n: usize,
    p: usize,
    sigma2_true: f64,
    replicates: usize,
    seed: u64,
) -> Result<BiasProbe> {
    if replicates < 1000 {
        return Err(RemlError::InvalidModel(format!(
            "bias probe needs at least 1000 replicates, got {replicates}"
        )));
    }
    if p == 0 || p >= n || sigma2_true <= 0.0 {
        return Err(RemlError::InvalidModel(format!(
            "bias probe needs 1 <= p < n and σ² > 0 (n = {n}, p = {p}, σ² = {sigma2_true})"
        )));
    }
    let mut design = normal_stream(seed, u64::MAX);
    let x = DenseMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { design.next_uniform() });
    let k2 = crate::linalg::orthonormal_complement(&x)?;
    let sd = sigma2_true.sqrt();
    let mut rss_sum = 0.0;
    for r in 0..replicates {
        let mut z = normal_stream(seed, r as u64);
        let y = Vector::from_fn(n, |_, _| sd * z.next_normal());
        let e2 = k2.transpose() * y;
        rss_sum += e2.norm_squared();
    }
    let rss_mean = rss_sum / replicates as f64;
    Ok(BiasProbe {
        ml_mean: rss_mean / n as f64,
        reml_mean: rss_mean / (n - p) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Parameterization, RandomDesign, VarianceStructure};

    fn pair_model(y1: f64, y2: f64) -> ModelSpec {
        ModelSpec::new(
            Vector::from_column_slice(&[y1, y2]),
            DenseMatrix::from_element(2, 1, 1.0),
            RandomDesign::none(2),
            VarianceStructure::Identity { dim: 0 },
            VarianceStructure::Identity { dim: 2 },
            Parameterization::Ratio,
        )
        .unwrap()
    }

    fn pair_closed_form(y1: f64, y2: f64, s2: f64) -> f64 {
        -0.5 * ((2.0 * PI).ln() + (2.0 * s2).ln() + (y1 - y2).powi(2) / (2.0 * s2))
    }

    #[test]
    fn two_observation_closed_form() {
        let (y1, y2) = (1.3, -0.4);
        let m = pair_model(y1, y2);
        for s2 in [0.5, 1.0, 3.0] {
            let th = ThetaVector::new(s2, &[], &[]);
            let expected = pair_closed_form(y1, y2, s2);
            for l in [
                loglik_via_contrast(&m, &th).unwrap(),
                loglik_via_v(&m, &th).unwrap(),
                loglik_via_c(&m, &th).unwrap(),
            ] {
                assert!((l.value - expected).abs() < 1e-13, "{:?}", l.route);
            }
        }
    }

    #[test]
    fn doubling_sigma2_shifts_by_closed_form() {
        let (y1, y2) = (2.0, 0.5);
        let m = pair_model(y1, y2);
        let s2 = 0.8;
        let a = loglik_via_v(&m, &ThetaVector::new(s2, &[], &[])).unwrap().value;
        let b = loglik_via_v(&m, &ThetaVector::new(2.0 * s2, &[], &[])).unwrap().value;
        let d = (y1 - y2).powi(2);
        let expected = -0.5 * (2f64.ln() - d / (4.0 * s2));
        assert!((b - a - expected).abs() < 1e-13);
    }

    #[test]
    fn orthonormal_contrast_raw_density_is_shifted_by_volume() {
        let m = pair_model(1.0, 0.0);
        let th = ThetaVector::new(1.0, &[], &[]);
        let l = loglik_via_contrast(&m, &th).unwrap();
        // K₂ = (1, −1)/√2: |L₂ᵀL₂| = 1 and |XᵀX| = 2.
        assert!((l.components.contrast_volume.unwrap() - 2f64.ln()).abs() < 1e-14);
        let raw = -0.5 * ((2.0 * PI).ln() + 0.0 + 0.5);
        assert!((l.raw_contrast_density().unwrap() - raw).abs() < 1e-14);
    }

    #[test]
    fn perfect_fit_has_zero_quadratic() {
        let m = pair_model(3.0, 3.0);
        let th = ThetaVector::new(1.0, &[], &[]);
        assert!(loglik_via_contrast(&m, &th).unwrap().components.quadratic.abs() < 1e-14);
        assert!(loglik_via_c(&m, &th).unwrap().components.quadratic.abs() < 1e-14);
    }

    #[test]
    fn fixed_effects_reduction() {
        let n = 9;
        let x = DenseMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).powf(1.5) });
        let y = Vector::from_fn(n, |i, _| (i as f64 * 0.9).cos() * 2.0);
        let m = ModelSpec::new(
            y.clone(),
            x.clone(),
            RandomDesign::none(n),
            VarianceStructure::Identity { dim: 0 },
            VarianceStructure::Identity { dim: n },
            Parameterization::Ratio,
        )
        .unwrap();
        let s2 = 1.7;
        let resid = (DenseMatrix::identity(n, n) - crate::linalg::projector(&x).unwrap()) * &y;
        let expected = -0.5
            * ((n - 2) as f64 * (2.0 * PI * s2).ln()
                + spd_logdet(&(x.transpose() * &x)).unwrap()
                + resid.norm_squared() / s2);
        let got = loglik_via_c(&m, &ThetaVector::new(s2, &[], &[])).unwrap().value;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn bias_probe_needs_replicates() {
        assert!(reml_vs_ml_bias_probe(20, 5, 1.0, 10, 1).is_err());
    }
}
