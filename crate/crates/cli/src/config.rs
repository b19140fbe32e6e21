//! TOML model configuration.
//!
//! ```toml
//! response = "y"
//! fixed = ["dose", "site"]
//! categorical = ["dose"]
//! random = ["litter"]
//! parameterization = "ratio"
//!
//! [residual]
//! kind = "ar1"
//!
//! [options]
//! max_iter = 50
//! ```

use std::path::{Path, PathBuf};

use reml_core::optimizer::FitOptions;
use reml_core::Parameterization;
use serde::Deserialize;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub response: String,
    #[serde(default)]
    pub fixed: Vec<String>,
    /// Fixed columns to dummy-code even when their values are numeric.
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default = "default_intercept")]
    pub intercept: bool,
    /// Grouping factors, one independent random block each.
    #[serde(default)]
    pub random: Vec<String>,
    #[serde(default)]
    pub parameterization: Parameterization,
    #[serde(default)]
    pub residual: ResidualConfig,
    #[serde(default)]
    pub options: FitOptions,
}

fn default_intercept() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ResidualConfig {
    #[default]
    Identity,
    Ar1 {
        #[serde(default)]
        bound: Option<f64>,
    },
    /// A fixed `n × n` matrix in Matrix Market format, relative to the config file.
    Explicit { matrix: PathBuf },
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config: Self = toml::from_str(&text).map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let ResidualConfig::Explicit { matrix } = &mut config.residual {
            if matrix.is_relative() {
                *matrix = path.parent().unwrap_or(Path::new("")).join(&*matrix);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen: Vec<&str> = vec![&self.response];
        for name in self.fixed.iter().chain(&self.random) {
            if seen.contains(&name.as_str()) {
                return Err(CliError::Config(format!("column `{name}` is used more than once")));
            }
            seen.push(name);
        }
        if let Some(c) = self.categorical.iter().find(|c| !self.fixed.contains(c)) {
            return Err(CliError::Config(format!(
                "categorical column `{c}` is not listed under fixed"
            )));
        }
        if !self.intercept && self.fixed.is_empty() {
            return Err(CliError::Config("the model has no fixed effects".into()));
        }
        if let ResidualConfig::Ar1 { bound: Some(b) } = self.residual {
            if !(b > 0.0 && b < 1.0) {
                return Err(CliError::Config(format!("ar1 bound must lie in (0, 1), got {b}")));
            }
        }
        self.options.validate()?;
        Ok(())
    }
}
