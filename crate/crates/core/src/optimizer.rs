//! Newton-Raphson, Fisher scoring and average-information REML iterations.
//!
//! Each iteration solves `I(θ_k) δ_k = s(θ_k)` on the free parameters, halves
//! the step until `ℓ_R` does not decrease, and clamps the result into the
//! admissible region. A parameter held at a bound while its score points
//! outward for `boundary_patience` consecutive iterations is fixed there.
//! Convergence requires `‖s‖_∞ ≤ gtol·(1 + |ℓ|)` on the free parameters and
//! `|Δℓ| ≤ ltol`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{RemlError, Result};
use crate::infomat::{score_and_information, InformationKind};
use crate::likelihood::{loglik_via_c, LikelihoodValue};
use crate::linalg::{ldlt_factor, serialize_rows, DenseMatrix, Vector};
use crate::model::{ModelSpec, ParamRole, Parameterization, ThetaVector, VarianceStructure};

/// Accepted steps may lower `ℓ_R` by at most this much.
pub const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Newton,
    Fisher,
    #[default]
    Ai,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Newton => "newton",
            Self::Fisher => "fisher",
            Self::Ai => "ai",
        }
    }

    pub fn information_kind(self) -> InformationKind {
        match self {
            Self::Newton => InformationKind::Observed,
            Self::Fisher => InformationKind::Fisher,
            Self::Ai => InformationKind::Average,
        }
    }
}

impl FromStr for Algorithm {
    type Err = RemlError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "newton" => Ok(Self::Newton),
            "fisher" => Ok(Self::Fisher),
            "ai" => Ok(Self::Ai),
            other => Err(RemlError::Parse(format!(
                "unknown algorithm {other:?} (expected newton, fisher or ai)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub algorithm: Algorithm,
    pub max_iter: usize,
    pub gtol: f64,
    pub ltol: f64,
    pub max_halvings: usize,
    pub boundary_eps: f64,
    pub boundary_patience: usize,
    /// Starting `θ` as `(σ², γ…, φ…)`; the default start when absent.
    pub initial: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Ai,
            max_iter: 100,
            gtol: 1e-6,
            ltol: 1e-8,
            max_halvings: 20,
            boundary_eps: 1e-8,
            boundary_patience: 3,
            initial: None,
        }
    }
}

impl FitOptions {
    pub fn with_algorithm(mut self, algorithm: Algorithm) -> Self {
        self.algorithm = algorithm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gtol", self.gtol),
            ("ltol", self.ltol),
            ("boundary_eps", self.boundary_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RemlError::InvalidModel(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iter == 0 || self.boundary_patience == 0 {
            return Err(RemlError::InvalidModel(
                "max_iter and boundary_patience must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub loglik: f64,
    /// `‖s‖_∞` over free parameters.
    pub score_norm: f64,
    /// Step fraction accepted on the way to this iterate.
    pub step_scale: f64,
    pub halvings: usize,
    pub levenberg_shift: f64,
    pub fixed: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    BoundaryStall,
    StepFailure,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub algorithm: Algorithm,
    pub parameterization: Parameterization,
    pub names: Vec<String>,
    pub theta: ThetaVector,
    pub estimates: Vec<f64>,
    /// `sqrt` of the diagonal of the inverse average information over free parameters.
    pub standard_errors: Vec<Option<f64>>,
    pub loglik: LikelihoodValue,
    pub score: Vec<f64>,
    pub information_kind: InformationKind,
    #[serde(serialize_with = "serialize_rows")]
    pub information: DenseMatrix,
    pub iterations: usize,
    pub converged: bool,
    pub reason: StopReason,
    pub fixed: Vec<String>,
    pub trace: Vec<IterationRecord>,
}

impl FitReport {
    /// `‖s‖_∞` over parameters not fixed at a bound.
    pub fn max_free_score(&self) -> f64 {
        self.score
            .iter()
            .zip(&self.names)
            .filter(|(_, n)| !self.fixed.contains(n))
            .fold(0.0, |m, (s, _)| m.max(s.abs()))
    }

    /// The report if converged, otherwise the matching error.
    pub fn into_result(self) -> Result<Self> {
        match self.reason {
            StopReason::Converged => Ok(self),
            StopReason::BoundaryStall => Err(RemlError::BoundaryStall { fixed: self.fixed }),
            StopReason::MaxIterations | StopReason::StepFailure => Err(RemlError::MaxIterations {
                iterations: self.iterations,
                max_score: self.max_free_score(),
            }),
        }
    }
}

/// `σ² = eᵀe/(n−ν)` from OLS, `γᵢ = 1/r` (times `σ²` for components), `φ = 0`.
pub fn default_start(spec: &ModelSpec) -> Result<ThetaVector> {
    let x = spec.x();
    let y = spec.y();
    let f = ldlt_factor(&(x.transpose() * x))?;
    let beta = Vector::from_vec(f.solve_vec((x.transpose() * y).as_slice())?);
    let e = y - x * beta;
    let sigma2 = (e.norm_squared() / (spec.n() - spec.p()) as f64).max(f64::MIN_POSITIVE);
    let r = spec.g_structure().n_params().max(1) as f64;
    let mut values = vec![sigma2];
    for i in 1..spec.n_params() {
        values.push(match spec.role(i)? {
            ParamRole::Scale => unreachable!(),
            ParamRole::Random(k) => match spec.g_structure() {
                VarianceStructure::Explicit(e) => e.initial[k],
                _ if spec.parameterization() == Parameterization::Components => sigma2 / r,
                _ => 1.0 / r,
            },
            ParamRole::Residual(k) => match spec.r_structure() {
                VarianceStructure::Explicit(e) => e.initial[k],
                _ => 0.0,
            },
        });
    }
    spec.theta_from_slice(&values)
}

pub fn fit(spec: &ModelSpec, options: &FitOptions) -> Result<FitReport> {
    fit_with_observer(spec, options, &mut |_| {})
}

pub fn fit_newton(spec: &ModelSpec, options: &FitOptions) -> Result<FitReport> {
    fit(spec, &options.clone().with_algorithm(Algorithm::Newton))
}

pub fn fit_fisher(spec: &ModelSpec, options: &FitOptions) -> Result<FitReport> {
    fit(spec, &options.clone().with_algorithm(Algorithm::Fisher))
}

pub fn fit_ai(spec: &ModelSpec, options: &FitOptions) -> Result<FitReport> {
    fit(spec, &options.clone().with_algorithm(Algorithm::Ai))
}

struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    fn new(spec: &ModelSpec, eps: f64) -> Result<Self> {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for i in 0..spec.n_params() {
            let (lo, hi) = spec.bounds(i)?;
            lower.push(if lo == 0.0 { eps } else { lo });
            upper.push(hi);
        }
        Ok(Self { lower, upper })
    }

    fn clamp(&self, values: &mut [f64]) {
        for (i, v) in values.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }

    /// At a bound with the score pointing out of the region.
    fn pushing_out(&self, i: usize, value: f64, score: f64) -> bool {
        (value <= self.lower[i] && score <= 0.0) || (value >= self.upper[i] && score >= 0.0)
    }
}

/// Solves `I δ = s`, shifting `I` by `λI` when `levenberg` is set and `I` is not PD.
fn solve_step(
    info: &DenseMatrix,
    score: &Vector,
    levenberg: bool,
    iteration: usize,
) -> Result<(Vector, f64)> {
    let try_solve = |m: &DenseMatrix| -> Option<Vector> {
        let f = ldlt_factor(m).ok()?;
        if !f.is_positive_definite() {
            return None;
        }
        let d = f.solve_vec(score.as_slice()).ok()?;
        d.iter().all(|v| v.is_finite()).then(|| Vector::from_vec(d))
    };
    if let Some(d) = try_solve(info) {
        return Ok((d, 0.0));
    }
    if levenberg {
        let k = info.nrows();
        let mut lambda = 1e-6 * info.amax().max(1.0);
        for _ in 0..200 {
            let shifted = info + DenseMatrix::identity(k, k) * lambda;
            if let Some(d) = try_solve(&shifted) {
                return Ok((d, lambda));
            }
            lambda *= 2.0;
        }
    }
    Err(RemlError::SingularInformation { iteration })
}

fn submatrix(m: &DenseMatrix, idx: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

fn standard_errors(info: &DenseMatrix, free: &[usize], k: usize) -> Vec<Option<f64>> {
    let mut out = vec![None; k];
    let sub = submatrix(info, free);
    if let Ok(f) = ldlt_factor(&sub) {
        if f.is_positive_definite() {
            let inv = f.inverse();
            for (a, &i) in free.iter().enumerate() {
                out[i] = Some(inv[(a, a)].sqrt());
            }
        }
    }
    out
}

/// Runs the configured algorithm, calling `observer` once per iterate.
pub fn fit_with_observer(
    spec: &ModelSpec,
    options: &FitOptions,
    observer: &mut dyn FnMut(&IterationRecord),
) -> Result<FitReport> {
    options.validate()?;
    let kind = options.algorithm.information_kind();
    let k = spec.n_params();
    let bounds = Bounds::new(spec, options.boundary_eps)?;

    let mut values = match &options.initial {
        Some(v) => {
            let t = spec.theta_from_slice(v)?;
            spec.check_admissible(&t)?;
            t.to_vec()
        }
        None => default_start(spec)?.to_vec(),
    };
    bounds.clamp(&mut values);
    let mut theta = spec.theta_from_slice(&values)?;
    let mut ll = loglik_via_c(spec, &theta)?;
    let (mut score, mut info) = score_and_information(spec, &theta, kind)?;

    let mut fixed = vec![false; k];
    let mut stall = vec![0usize; k];
    let mut prev_ll: Option<f64> = None;
    let mut trace = Vec::new();
    let (mut step_scale, mut halvings, mut shift) = (0.0, 0, 0.0);
    let reason = loop {
        let iteration = trace.len();
        for i in 0..k {
            if fixed[i] {
                continue;
            }
            if bounds.pushing_out(i, theta.get(i), score[i]) {
                stall[i] += 1;
                fixed[i] = stall[i] >= options.boundary_patience;
            } else {
                stall[i] = 0;
            }
        }
        let free: Vec<usize> = (0..k).filter(|&i| !fixed[i]).collect();
        let score_norm = free.iter().fold(0.0_f64, |m, &i| m.max(score[i].abs()));
        let record = IterationRecord {
            iteration,
            theta: theta.to_vec(),
            loglik: ll.value,
            score_norm,
            step_scale,
            halvings,
            levenberg_shift: shift,
            fixed: (0..k).filter(|&i| fixed[i]).collect(),
        };
        observer(&record);
        trace.push(record);

        let grad_ok = score_norm <= options.gtol * (1.0 + ll.value.abs());
        let ll_ok = prev_ll.is_none_or(|p| (ll.value - p).abs() <= options.ltol);
        if grad_ok && ll_ok {
            break StopReason::Converged;
        }
        if free.is_empty() {
            break StopReason::BoundaryStall;
        }
        if trace.len() >= options.max_iter {
            break StopReason::MaxIterations;
        }

        // parameters held at a bound by an outward score sit out this step
        let moving: Vec<usize> = free
            .iter()
            .copied()
            .filter(|&i| !bounds.pushing_out(i, theta.get(i), score[i]))
            .collect();
        if moving.is_empty() {
            prev_ll = Some(ll.value);
            (step_scale, halvings, shift) = (0.0, 0, 0.0);
            continue;
        }
        let sub_score = Vector::from_iterator(moving.len(), moving.iter().map(|&i| score[i]));
        let (delta, lambda) = solve_step(
            &submatrix(&info, &moving),
            &sub_score,
            kind == InformationKind::Observed,
            iteration,
        )?;
        let mut t = 1.0;
        let mut h = 0;
        let accepted = loop {
            let mut cand = theta.to_vec();
            for (a, &i) in moving.iter().enumerate() {
                cand[i] += t * delta[a];
            }
            bounds.clamp(&mut cand);
            let cand = spec.theta_from_slice(&cand)?;
            if let Ok(v) = loglik_via_c(spec, &cand) {
                if v.value >= ll.value - MONOTONE_SLACK {
                    break Some((cand, v));
                }
            }
            if h == options.max_halvings {
                break None;
            }
            t *= 0.5;
            h += 1;
        };
        let Some((cand, cand_ll)) = accepted else {
            break if grad_ok {
                StopReason::Converged
            } else {
                StopReason::StepFailure
            };
        };
        prev_ll = Some(ll.value);
        theta = cand;
        ll = cand_ll;
        (score, info) = score_and_information(spec, &theta, kind)?;
        (step_scale, halvings, shift) = (t, h, lambda);
    };

    let fixed_idx: Vec<usize> = (0..k).filter(|&i| fixed[i]).collect();
    let reason = match reason {
        StopReason::MaxIterations | StopReason::StepFailure if !fixed_idx.is_empty() => {
            StopReason::BoundaryStall
        }
        r => r,
    };
    let free: Vec<usize> = (0..k).filter(|&i| !fixed[i]).collect();
    let names = spec.param_names().to_vec();
    let average = if kind == InformationKind::Average {
        info.clone()
    } else {
        score_and_information(spec, &theta, InformationKind::Average)?.1
    };
    Ok(FitReport {
        algorithm: options.algorithm,
        parameterization: spec.parameterization(),
        standard_errors: standard_errors(&average, &free, k),
        fixed: fixed_idx.iter().map(|&i| names[i].clone()).collect(),
        names,
        estimates: theta.to_vec(),
        theta,
        loglik: ll,
        score,
        information_kind: kind,
        information: info,
        iterations: trace.len(),
        converged: reason == StopReason::Converged,
        reason,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::projector;
    use crate::model::RandomDesign;
    use crate::simulate::balanced_oneway_fixture;

    fn fixed_only() -> ModelSpec {
        let n = 15;
        let x = DenseMatrix::from_fn(n, 3, |i, j| (i as f64 * 0.4).powi(j as i32));
        let y = Vector::from_fn(n, |i, _| (i as f64 * 2.1).sin() * 1.5 + 0.2 * i as f64);
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

    fn reml_sigma2(m: &ModelSpec) -> f64 {
        let e = (DenseMatrix::identity(m.n(), m.n()) - projector(m.x()).unwrap()) * m.y();
        e.norm_squared() / (m.n() - m.p()) as f64
    }

    #[test]
    fn fixed_only_reaches_closed_form() {
        let m = fixed_only();
        let target = reml_sigma2(&m);
        for alg in [Algorithm::Newton, Algorithm::Fisher, Algorithm::Ai] {
            let opts = FitOptions {
                initial: Some(vec![target * 5.0]),
                ..FitOptions::default().with_algorithm(alg)
            };
            let r = fit(&m, &opts).unwrap();
            assert!(r.converged, "{alg:?}");
            assert!(r.iterations <= 10, "{alg:?}: {}", r.iterations);
            assert!((r.theta.sigma2 - target).abs() < 1e-8, "{alg:?}");
        }
    }

    #[test]
    fn start_at_optimum_stops_immediately() {
        let m = fixed_only();
        let opts = FitOptions {
            initial: Some(vec![reml_sigma2(&m)]),
            ..FitOptions::default()
        };
        let r = fit_newton(&m, &opts).unwrap();
        assert!(r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn trace_is_monotone() {
        let f = balanced_oneway_fixture(6, 4, 0.8, 1.0, 11).unwrap();
        let r = fit_fisher(&f.spec, &FitOptions::default()).unwrap();
        for w in r.trace.windows(2) {
            assert!(w[1].loglik >= w[0].loglik - MONOTONE_SLACK);
        }
    }

    #[test]
    fn invalid_options_rejected() {
        let m = fixed_only();
        let opts = FitOptions {
            gtol: 0.0,
            ..FitOptions::default()
        };
        assert!(fit(&m, &opts).is_err());
        let opts = FitOptions {
            initial: Some(vec![-1.0]),
            ..FitOptions::default()
        };
        assert!(matches!(fit(&m, &opts), Err(RemlError::InadmissibleParameter { .. })));
        assert!("bfgs".parse::<Algorithm>().is_err());
        assert_eq!("AI".parse::<Algorithm>().unwrap(), Algorithm::Ai);
    }
}
