#![allow(dead_code)]

use nalgebra::Cholesky;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reml_core::linalg::{DenseMatrix, Vector};
use reml_core::model::{ExplicitStructure, ModelSpec, Parameterization, RandomDesign, ThetaVector, VarianceStructure};

/// Structure families used by the randomized instance sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    FixedOnly,
    OneFactor,
    TwoFactorComponents,
    Kernel,
    Ar1Only,
    Ar1WithFactor,
}

pub const LINEAR_FAMILIES: [Family; 4] = [
    Family::FixedOnly,
    Family::OneFactor,
    Family::TwoFactorComponents,
    Family::Kernel,
];

pub const ALL_FAMILIES: [Family; 6] = [
    Family::FixedOnly,
    Family::OneFactor,
    Family::TwoFactorComponents,
    Family::Kernel,
    Family::Ar1Only,
    Family::Ar1WithFactor,
];

pub struct Instance {
    pub spec: ModelSpec,
    pub theta: ThetaVector,
    pub family: Family,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn design(n: usize, p: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) })
}

fn levels(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // every level appears at least once
    let mut l: Vec<usize> = (0..n).map(|i| if i < m { i } else { rng.random_range(0..m) }).collect();
    for i in (1..n).rev() {
        l.swap(i, rng.random_range(0..=i));
    }
    l
}

fn kernel(m: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let a = DenseMatrix::from_fn(m, m + 2, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose()) / (m as f64) + DenseMatrix::identity(m, m) * 0.2
}

/// A random model of the given family with `n` observations and `p` fixed columns.
pub fn instance(family: Family, n: usize, p: usize, rng: &mut ChaCha8Rng) -> Instance {
    let x = design(n, p, rng);
    let y = Vector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
    let m1 = rng.random_range(2..=(n / 3).max(2));
    let sigma2 = rng.random_range(0.5..2.0);
    let gamma = |rng: &mut ChaCha8Rng| rng.random_range(0.2..2.0);
    let phi = rng.random_range(-0.7..0.7);
    let (z, g, r, param, theta) = match family {
        Family::FixedOnly => (
            RandomDesign::none(n),
            VarianceStructure::Identity { dim: 0 },
            VarianceStructure::Identity { dim: n },
            Parameterization::Ratio,
            ThetaVector::new(sigma2, &[], &[]),
        ),
        Family::OneFactor => (
            RandomDesign::from_indicators(n, &[(levels(n, m1, rng), m1)]).unwrap(),
            VarianceStructure::IidBlocks { sizes: vec![m1] },
            VarianceStructure::Identity { dim: n },
            Parameterization::Ratio,
            ThetaVector::new(sigma2, &[gamma(rng)], &[]),
        ),
        Family::TwoFactorComponents => {
            let m2 = rng.random_range(2..=(n / 4).max(2));
            (
                RandomDesign::from_indicators(
                    n,
                    &[(levels(n, m1, rng), m1), (levels(n, m2, rng), m2)],
                )
                .unwrap(),
                VarianceStructure::IidBlocks { sizes: vec![m1, m2] },
                VarianceStructure::Identity { dim: n },
                Parameterization::Components,
                ThetaVector::new(sigma2, &[gamma(rng), gamma(rng)], &[]),
            )
        }
        Family::Kernel => {
            let zd = DenseMatrix::from_fn(n, m1, |_, _| rng.random_range(-1.0..1.0));
            (
                RandomDesign::from_dense(&zd, vec![m1]).unwrap(),
                VarianceStructure::Explicit(ExplicitStructure::scaled(kernel(m1, rng))),
                VarianceStructure::Identity { dim: n },
                Parameterization::Components,
                ThetaVector::new(sigma2, &[gamma(rng)], &[]),
            )
        }
        Family::Ar1Only => (
            RandomDesign::none(n),
            VarianceStructure::Identity { dim: 0 },
            VarianceStructure::ar1(n),
            Parameterization::Ratio,
            ThetaVector::new(sigma2, &[], &[phi]),
        ),
        Family::Ar1WithFactor => (
            RandomDesign::from_indicators(n, &[(levels(n, m1, rng), m1)]).unwrap(),
            VarianceStructure::IidBlocks { sizes: vec![m1] },
            VarianceStructure::ar1(n),
            Parameterization::Ratio,
            ThetaVector::new(sigma2, &[gamma(rng)], &[phi]),
        ),
    };
    Instance {
        spec: ModelSpec::new(y, x, z, g, r, param).unwrap(),
        theta,
        family,
    }
}

/// `count` instances cycling through `families`, `n ∈ [n_lo, n_hi]`, `p ∈ [1, 5]`.
pub fn instance_set(
    count: usize,
    families: &[Family],
    n_lo: usize,
    n_hi: usize,
    seed: u64,
) -> Vec<Instance> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            let n = r.random_range(n_lo..=n_hi);
            let p = r.random_range(1..=5usize.min(n / 3));
            instance(families[i % families.len()], n, p, &mut r)
        })
        .collect()
}

/// Log-determinant through nalgebra's Cholesky, independent of the crate's factorization.
pub fn chol_logdet(a: &DenseMatrix) -> f64 {
    let c = Cholesky::new(a.clone()).expect("SPD");
    2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn chol_inverse(a: &DenseMatrix) -> DenseMatrix {
    Cholesky::new(a.clone()).expect("SPD").inverse()
}

/// `V⁻¹ − V⁻¹X(XᵀV⁻¹X)⁻¹XᵀV⁻¹` through Cholesky.
pub fn chol_projector(v: &DenseMatrix, x: &DenseMatrix) -> DenseMatrix {
    let vi = chol_inverse(v);
    let vx = &vi * x;
    let inner = chol_inverse(&(x.transpose() * &vx));
    let p = &vi - &vx * inner * vx.transpose();
    (&p + p.transpose()) * 0.5
}

pub fn max_abs(a: &DenseMatrix) -> f64 {
    a.amax()
}

/// Central differences of `f` at `x` with `h_i = 1e-5 (1 + |x_i|)`.
pub fn fd_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let h = 1e-5 * (1.0 + x[i].abs());
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian, column `j` = `∂g/∂x_j`.
pub fn fd_jacobian(x: &[f64], g: impl Fn(&[f64]) -> Vec<f64>) -> DenseMatrix {
    let k = x.len();
    let mut jac = DenseMatrix::zeros(k, k);
    for j in 0..k {
        let h = 1e-5 * (1.0 + x[j].abs());
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[j] += h;
        b[j] -= h;
        let (ga, gb) = (g(&a), g(&b));
        for i in 0..k {
            jac[(i, j)] = (ga[i] - gb[i]) / (2.0 * h);
        }
    }
    jac
}

/// `‖a − b‖_∞ / ‖b‖_∞`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = b.iter().fold(0.0_f64, |m, y| m.max(y.abs()));
    diff / scale.max(f64::MIN_POSITIVE)
}
