mod common;

use common::*;
use nalgebra::SymmetricEigen;
use rand::Rng;
use reml_core::optimizer::{fit, fit_with_observer, Algorithm, FitOptions, StopReason};
use reml_core::simulate::{balanced_oneway_fixture, oneway_spec, SimulationPlan};
use reml_core::{Parameterization, RemlError, Vector};

const ALGORITHMS: [Algorithm; 3] = [Algorithm::Newton, Algorithm::Fisher, Algorithm::Ai];

fn ar1_with_block(seed: u64) -> reml_core::ModelSpec {
    let mut r = rng(seed);
    let inst = instance(Family::Ar1WithFactor, 80, 2, &mut r);
    let mut theta = inst.theta.clone();
    theta.kappa[0] = 0.8;
    theta.kappa[1] = 0.5;
    let tau = Vector::from_fn(2, |_, _| r.random_range(-1.0..1.0));
    let plan = SimulationPlan::new(inst.spec.clone(), theta, tau, 1, seed).unwrap();
    let y = reml_core::simulate::draw_response(&plan, 0).unwrap();
    inst.spec.with_response(y).unwrap()
}

#[test]
fn ai_converges_on_ar1_with_random_block() {
    let spec = ar1_with_block(21);
    let opts = FitOptions::default();
    let r = fit(&spec, &opts).unwrap();
    assert!(r.converged, "{:?}", r.reason);
    assert!(r.iterations <= 30);
    assert!(r.max_free_score() <= opts.gtol * (1.0 + r.loglik.value.abs()));
}

#[test]
fn algorithms_agree_at_the_optimum() {
    for seed in [22, 23, 24] {
        let spec = ar1_with_block(seed);
        let fits: Vec<_> = ALGORITHMS
            .iter()
            .map(|&a| fit(&spec, &FitOptions::default().with_algorithm(a)).unwrap())
            .collect();
        for f in &fits {
            assert!(f.converged, "{:?} {:?}", f.algorithm, f.reason);
        }
        for a in &fits {
            for b in &fits {
                assert!(rel_err(&a.estimates, &b.estimates) <= 1e-5);
                assert!((a.loglik.value - b.loglik.value).abs() <= 1e-8 * (1.0 + b.loglik.value.abs()));
            }
        }
    }
}

#[test]
fn poor_start_still_converges() {
    let f = balanced_oneway_fixture(10, 5, 0.6, 1.2, 25).unwrap();
    let start: Vec<f64> = f.targets.theta(Parameterization::Ratio).to_vec().iter().map(|v| v * 100.0).collect();
    for alg in [Algorithm::Fisher, Algorithm::Ai] {
        let opts = FitOptions {
            initial: Some(start.clone()),
            ..FitOptions::default().with_algorithm(alg)
        };
        let r = fit(&f.spec, &opts).unwrap();
        assert!(r.converged, "{alg:?}");
        let target = f.targets.theta(Parameterization::Ratio).to_vec();
        assert!(rel_err(&r.estimates, &target) <= 1e-5, "{alg:?}");
    }
}

#[test]
fn trace_is_monotone_and_matches_observer() {
    let spec = ar1_with_block(26);
    for alg in ALGORITHMS {
        let mut seen = Vec::new();
        let r = fit_with_observer(&spec, &FitOptions::default().with_algorithm(alg), &mut |rec| {
            seen.push(rec.clone())
        })
        .unwrap();
        assert_eq!(seen, r.trace);
        assert_eq!(r.iterations, r.trace.len());
        for w in r.trace.windows(2) {
            assert!(w[1].loglik >= w[0].loglik - 1e-12);
            assert_eq!(w[1].iteration, w[0].iteration + 1);
        }
    }
}

#[test]
fn information_is_positive_definite_at_the_optimum() {
    let spec = ar1_with_block(27);
    for alg in ALGORITHMS {
        let r = fit(&spec, &FitOptions::default().with_algorithm(alg)).unwrap();
        let ev = SymmetricEigen::new(r.information.clone()).eigenvalues;
        assert!(ev.min() > 0.0, "{alg:?}");
        assert!(r.standard_errors.iter().all(|s| s.is_some_and(|v| v > 0.0)));
    }
}

fn low_between_variance(m: usize, offset: f64) -> Vec<f64> {
    (0..m)
        .flat_map(|g| {
            let shift = offset * (g as f64 - 2.5);
            [1.0, 2.5, 3.0, 4.5].map(|v| if g % 2 == 0 { v } else { 5.5 - v } + shift)
        })
        .collect()
}

#[test]
fn negative_excess_fixes_the_variance_ratio() {
    let (m, k) = (6, 4);
    let y = low_between_variance(m, 0.1);
    let targets = reml_core::simulate::anova_targets(&y, m, k).unwrap();
    assert!(targets.msa < targets.mse);
    let spec = oneway_spec(Vector::from_vec(y.clone()), m, k, Parameterization::Ratio).unwrap();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let s2 = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
    for alg in ALGORITHMS {
        let opts = FitOptions::default().with_algorithm(alg);
        let r = fit(&spec, &opts).unwrap();
        assert_eq!(r.estimates[1], opts.boundary_eps, "{alg:?}");
        assert!(matches!(r.reason, StopReason::Converged | StopReason::BoundaryStall), "{alg:?} {:?}", r.reason);
        assert!((r.estimates[0] - s2).abs() <= 1e-5 * s2, "{alg:?}");
    }
}

#[test]
fn identical_group_means_leave_average_information_singular() {
    // Py has no between-group component, so the γ row of I_A vanishes
    let (m, k) = (6, 4);
    let spec = oneway_spec(Vector::from_vec(low_between_variance(m, 0.0)), m, k, Parameterization::Ratio).unwrap();
    let err = fit(&spec, &FitOptions::default()).unwrap_err();
    assert!(matches!(err, RemlError::SingularInformation { iteration: 0 }));
    let r = fit(&spec, &FitOptions::default().with_algorithm(Algorithm::Fisher)).unwrap();
    assert_eq!(r.estimates[1], 1e-8);
}

#[test]
fn iteration_cap_is_reported() {
    let spec = ar1_with_block(28);
    let opts = FitOptions {
        max_iter: 2,
        ..FitOptions::default().with_algorithm(Algorithm::Fisher)
    };
    let r = fit(&spec, &opts).unwrap();
    assert!(!r.converged);
    assert_eq!(r.reason, StopReason::MaxIterations);
    assert_eq!(r.iterations, 2);
    assert!(r.into_result().is_err());
}

#[test]
fn fits_are_deterministic() {
    let spec = ar1_with_block(29);
    let a = fit(&spec, &FitOptions::default()).unwrap();
    let b = fit(&spec, &FitOptions::default()).unwrap();
    assert_eq!(a.estimates, b.estimates);
    assert_eq!(a.trace, b.trace);
}
