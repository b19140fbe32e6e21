//! Synthetic responses `y ~ N(Xτ, V(θ))` and the balanced one-way fixture.
//!
//! Replicate `r` of a plan with seed `s` draws from ChaCha8 seeded with `s`
//! on stream `r`, so replicates are independent and may run in any order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{RemlError, Result};
use crate::linalg::{ldlt_factor, DenseMatrix, Vector};
use crate::model::{ModelSpec, Parameterization, RandomDesign, ThetaVector, VarianceStructure};

/// Deterministic normal/uniform source for one `(seed, stream)` pair.
#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha8Rng,
}

impl NormalStream {
    pub fn next_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn next_uniform(&mut self) -> f64 {
        self.rng.random()
    }
}

pub fn normal_stream(seed: u64, stream: u64) -> NormalStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    NormalStream { rng }
}

#[derive(Debug, Clone)]
pub struct SimulationPlan {
    pub spec: ModelSpec,
    pub theta: ThetaVector,
    pub tau: Vector,
    pub replicates: usize,
    pub seed: u64,
}

impl SimulationPlan {
    pub fn new(
        spec: ModelSpec,
        theta: ThetaVector,
        tau: Vector,
        replicates: usize,
        seed: u64,
    ) -> Result<Self> {
        if replicates == 0 {
            return Err(RemlError::InvalidModel("replicate count must be at least 1".into()));
        }
        if tau.len() != spec.p() {
            return Err(RemlError::DimensionMismatch(format!(
                "τ has length {}, X has {} columns",
                tau.len(),
                spec.p()
            )));
        }
        spec.check_admissible(&theta)?;
        Ok(Self {
            spec,
            theta,
            tau,
            replicates,
            seed,
        })
    }

    pub fn sampler(&self) -> Result<ResponseSampler> {
        ResponseSampler::new(self)
    }

    /// Applies `f` to every replicate in parallel, returning results in replicate order.
    pub fn par_map<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, Vector) -> Result<T> + Sync,
    {
        let sampler = self.sampler()?;
        (0..self.replicates)
            .into_par_iter()
            .map(|r| f(r, sampler.draw(r)))
            .collect()
    }
}

/// `Xτ` and a square root `A` with `AAᵀ = V`, built from `V = QᵀLDLᵀQ`.
#[derive(Debug, Clone)]
pub struct ResponseSampler {
    mean: Vector,
    root: DenseMatrix,
    seed: u64,
}

impl ResponseSampler {
    fn new(plan: &SimulationPlan) -> Result<Self> {
        let v = plan.spec.variance_value(&plan.theta)?;
        let f = ldlt_factor(&v)?;
        if !f.is_positive_definite() {
            return Err(RemlError::NotPositiveDefinite("V(θ) for simulation".into()));
        }
        let n = v.nrows();
        let l = f.l_dense();
        let mut root = DenseMatrix::zeros(n, n);
        for (i, &orig) in f.perm().iter().enumerate() {
            for j in 0..=i {
                root[(orig, j)] = l[(i, j)] * f.d()[j].sqrt();
            }
        }
        Ok(Self {
            mean: plan.spec.x() * &plan.tau,
            root,
            seed: plan.seed,
        })
    }

    pub fn root(&self) -> &DenseMatrix {
        &self.root
    }

    pub fn draw(&self, replicate: usize) -> Vector {
        let mut s = normal_stream(self.seed, replicate as u64);
        let z = Vector::from_fn(self.mean.len(), |_, _| s.next_normal());
        &self.mean + &self.root * z
    }
}

pub fn draw_response(plan: &SimulationPlan, replicate: usize) -> Result<Vector> {
    Ok(plan.sampler()?.draw(replicate))
}

/// Entrywise mean and standard error of the mean.
pub fn matrix_mean_and_se(samples: &[DenseMatrix]) -> Option<(DenseMatrix, DenseMatrix)> {
    let first = samples.first()?;
    let count = samples.len() as f64;
    let mut mean = DenseMatrix::zeros(first.nrows(), first.ncols());
    for s in samples {
        mean += s;
    }
    mean /= count;
    let mut var = DenseMatrix::zeros(first.nrows(), first.ncols());
    for s in samples {
        let d = s - &mean;
        var += d.component_mul(&d);
    }
    var /= (count - 1.0).max(1.0);
    let se = var.map(|v| (v / count).sqrt());
    Some((mean, se))
}

/// ANOVA table of a balanced one-way layout and the REML estimates it implies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnovaTargets {
    pub msa: f64,
    pub mse: f64,
    pub sigma_e2: f64,
    pub sigma_u2: f64,
    pub groups: usize,
    pub per_group: usize,
}

impl AnovaTargets {
    /// `(MSA − MSE)/k`, negative when the between-group excess is below zero.
    pub fn excess(&self) -> f64 {
        (self.msa - self.mse) / self.per_group as f64
    }

    pub fn is_interior(&self, boundary_eps: f64) -> bool {
        self.excess() > 10.0 * boundary_eps
    }

    pub fn theta(&self, param: Parameterization) -> ThetaVector {
        let random = match param {
            Parameterization::Ratio => self.sigma_u2 / self.sigma_e2,
            Parameterization::Components => self.sigma_u2,
        };
        ThetaVector::new(self.sigma_e2, &[random], &[])
    }
}

/// Sums of squares for `y` laid out group by group (`k` consecutive rows per group).
pub fn anova_targets(y: &[f64], m: usize, k: usize) -> Result<AnovaTargets> {
    check_oneway_sizes(m, k)?;
    if y.len() != m * k {
        return Err(RemlError::DimensionMismatch(format!(
            "expected {} observations, got {}",
            m * k,
            y.len()
        )));
    }
    let grand = y.iter().sum::<f64>() / y.len() as f64;
    let mut ssa = 0.0;
    let mut sse = 0.0;
    for g in y.chunks(k) {
        let mean = g.iter().sum::<f64>() / k as f64;
        ssa += k as f64 * (mean - grand).powi(2);
        sse += g.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    }
    let msa = ssa / (m - 1) as f64;
    let mse = sse / (m * (k - 1)) as f64;
    Ok(AnovaTargets {
        msa,
        mse,
        sigma_e2: mse,
        sigma_u2: ((msa - mse) / k as f64).max(0.0),
        groups: m,
        per_group: k,
    })
}

fn check_oneway_sizes(m: usize, k: usize) -> Result<()> {
    if m < 2 || k < 2 {
        return Err(RemlError::InvalidModel(format!(
            "balanced one-way layout needs m >= 2 and k >= 2 (m = {m}, k = {k})"
        )));
    }
    Ok(())
}

/// One-way model `y = μ + Zu + e` with an intercept and group indicators.
pub fn oneway_spec(y: Vector, m: usize, k: usize, param: Parameterization) -> Result<ModelSpec> {
    check_oneway_sizes(m, k)?;
    let n = m * k;
    let levels = (0..n).map(|i| i / k).collect::<Vec<_>>();
    ModelSpec::new(
        y,
        DenseMatrix::from_element(n, 1, 1.0),
        RandomDesign::from_indicators(n, &[(levels, m)])?,
        VarianceStructure::IidBlocks { sizes: vec![m] },
        VarianceStructure::Identity { dim: n },
        param,
    )
}

#[derive(Debug, Clone)]
pub struct OnewayFixture {
    pub spec: ModelSpec,
    pub truth: ThetaVector,
    pub targets: AnovaTargets,
}

pub const ONEWAY_MEAN: f64 = 10.0;

/// Simulated balanced one-way data under the default parameterization.
pub fn balanced_oneway_fixture(
    m: usize,
    k: usize,
    sigma_u2: f64,
    sigma_e2: f64,
    seed: u64,
) -> Result<OnewayFixture> {
    balanced_oneway_fixture_with(m, k, sigma_u2, sigma_e2, seed, Parameterization::default())
}

pub fn balanced_oneway_fixture_with(
    m: usize,
    k: usize,
    sigma_u2: f64,
    sigma_e2: f64,
    seed: u64,
    param: Parameterization,
) -> Result<OnewayFixture> {
    check_oneway_sizes(m, k)?;
    if !(sigma_e2 > 0.0) || !(sigma_u2 >= 0.0) {
        return Err(RemlError::InvalidModel(format!(
            "variances must satisfy σ_e² > 0, σ_u² >= 0 (got {sigma_e2}, {sigma_u2})"
        )));
    }
    let template = oneway_spec(Vector::zeros(m * k), m, k, param)?;
    let truth = AnovaTargets {
        msa: 0.0,
        mse: 0.0,
        sigma_e2,
        sigma_u2,
        groups: m,
        per_group: k,
    }
    .theta(param);
    let plan = SimulationPlan::new(
        template.clone(),
        truth.clone(),
        Vector::from_element(1, ONEWAY_MEAN),
        1,
        seed,
    )?;
    let y = draw_response(&plan, 0)?;
    let targets = anova_targets(y.as_slice(), m, k)?;
    Ok(OnewayFixture {
        spec: template.with_response(y)?,
        truth,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<f64> = (0..5).map({
            let mut s = normal_stream(7, 3);
            move |_| s.next_normal()
        }).collect();
        let mut s = normal_stream(7, 3);
        let b: Vec<f64> = (0..5).map(|_| s.next_normal()).collect();
        assert_eq!(a, b);
        let mut t = normal_stream(7, 4);
        assert_ne!(a[0], t.next_normal());
    }

    #[test]
    fn zero_excess_gives_boundary_estimate() {
        // Identical group means give MSA = 0 < MSE.
        let y: Vec<f64> = (0..5).flat_map(|_| [1.0, 2.0, 3.0, 4.0]).collect();
        let t = anova_targets(&y, 5, 4).unwrap();
        assert_eq!(t.sigma_u2, 0.0);
        assert!(!t.is_interior(1e-8));

        // MSE = 20/15 from the ±1 spread; MSA = 4·10·s²/4, so s² = MSE/10.
        let within = [-1.0, -1.0, 1.0, 1.0];
        let offsets = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let scale = (20.0 / 15.0 / 10.0_f64).sqrt();
        let y: Vec<f64> = offsets
            .iter()
            .flat_map(|c| within.iter().map(move |w| c * scale + w))
            .collect();
        let t = anova_targets(&y, 5, 4).unwrap();
        assert!((t.msa - t.mse).abs() < 1e-12);
        assert!(t.sigma_u2.abs() < 1e-12);
    }

    #[test]
    fn single_observation_groups_rejected() {
        assert!(balanced_oneway_fixture(5, 1, 1.0, 1.0, 0).is_err());
        assert!(anova_targets(&[1.0, 2.0], 2, 1).is_err());
    }

    #[test]
    fn root_reproduces_variance() {
        let f = balanced_oneway_fixture(3, 2, 0.7, 1.3, 1).unwrap();
        let plan = SimulationPlan::new(
            f.spec.clone(),
            f.truth.clone(),
            Vector::from_element(1, 0.0),
            1,
            0,
        )
        .unwrap();
        let s = plan.sampler().unwrap();
        let v = f.spec.variance_value(&f.truth).unwrap();
        assert!((s.root() * s.root().transpose() - v).amax() < 1e-12);
    }

    #[test]
    fn zero_replicates_rejected() {
        let f = balanced_oneway_fixture(3, 2, 0.7, 1.3, 1).unwrap();
        assert!(SimulationPlan::new(f.spec, f.truth, Vector::zeros(1), 0, 0).is_err());
    }
}
