//! Serialized command outputs.

use std::io::Write;
use std::path::Path;

use reml_core::infomat::DerivativeBundle;
use reml_core::likelihood::LikelihoodValue;
use reml_core::linalg::serialize_rows;
use reml_core::optimizer::FitReport;
use reml_core::DenseMatrix;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::ingest::{Ingested, RandomFactor};

pub const SCHEMA_VERSION: &str = "reml-report/1";

#[derive(Debug, Clone, Serialize)]
pub struct ModelSummary {
    pub n: usize,
    pub p: usize,
    pub b: usize,
    pub response: String,
    pub fixed_columns: Vec<String>,
    pub random_factors: Vec<RandomFactor>,
    pub residual: &'static str,
    pub parameterization: reml_core::Parameterization,
    pub names: Vec<String>,
}

impl ModelSummary {
    pub fn of(m: &Ingested) -> Self {
        Self {
            n: m.spec.n(),
            p: m.spec.p(),
            b: m.spec.b(),
            response: m.config.response.clone(),
            fixed_columns: m.fixed_columns.clone(),
            random_factors: m.random_factors.clone(),
            residual: m.spec.r_structure().kind(),
            parameterization: m.spec.parameterization(),
            names: m.spec.param_names().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FixedEffect {
    pub name: String,
    pub estimate: f64,
    pub standard_error: f64,
}

/// Wall-clock figures; excluded when comparing reports for determinism.
#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitOutput {
    pub schema_version: &'static str,
    pub kind: &'static str,
    pub model: ModelSummary,
    pub fit: FitReport,
    pub fixed_effects: Vec<FixedEffect>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Serialize)]
pub struct LoglikOutput {
    pub schema_version: &'static str,
    pub kind: &'static str,
    pub model: ModelSummary,
    pub theta: Vec<f64>,
    pub routes: Vec<LikelihoodValue>,
    /// `max |ℓ_route − ℓ_c|` over the evaluated routes.
    pub max_route_difference: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InfoOutput {
    pub schema_version: &'static str,
    pub kind: &'static str,
    pub model: ModelSummary,
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub score: Vec<f64>,
    #[serde(serialize_with = "serialize_rows")]
    pub average: DenseMatrix,
    /// Dense observed, Fisher and splitting matrices; absent above the dense cap.
    pub dense: Option<DerivativeBundle>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateOutput {
    pub schema_version: &'static str,
    pub kind: &'static str,
    pub model: ModelSummary,
    pub theta: Vec<f64>,
    pub tau: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub files: Vec<String>,
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

/// Writes `text` to `path` through a sibling temporary file, or to stdout without a path.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::io("<stdout>", e))
        }
        Some(p) => write_atomic(p, text.as_bytes()),
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.partial", name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
