//! Restricted maximum likelihood (REML) for linear mixed models
//! `y = Xτ + Zu + e`, `var(y) = σ²(R(φ) + Z G(γ) Zᵀ)`.
//!
//! The crate evaluates the restricted log-likelihood through three algebraically
//! equivalent routes, its score and observed/Fisher/average information
//! matrices, and fits the variance parameters with Newton-Raphson, Fisher
//! scoring or average-information iterations. Dense reference computations sit
//! beside the factorized production paths so every identity can be checked.

pub mod contrast;
pub mod error;
pub mod infomat;
pub mod likelihood;
pub mod linalg;
pub mod mme;
pub mod model;
pub mod optimizer;
pub mod simulate;

pub use error::{RemlError, Result};
pub use linalg::{DenseMatrix, Vector};
pub use model::{ModelSpec, Parameterization, RandomDesign, ThetaVector, VarianceStructure};

