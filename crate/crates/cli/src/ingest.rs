//! Builds a [`ModelSpec`] from a data table and a model configuration.

use std::path::Path;

use reml_core::linalg::check_full_rank;
use reml_core::linalg::io::read_matrix_market;
use reml_core::model::ExplicitStructure;
use reml_core::{DenseMatrix, ModelSpec, RandomDesign, RemlError, VarianceStructure, Vector};
use serde::Serialize;

use crate::config::{ModelConfig, ResidualConfig};
use crate::data::{Column, DataTable};
use crate::error::{CliError, Result};

pub const INTERCEPT: &str = "(intercept)";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomFactor {
    pub name: String,
    pub levels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub spec: ModelSpec,
    pub table: DataTable,
    pub config: ModelConfig,
    /// One name per column of `X`.
    pub fixed_columns: Vec<String>,
    pub random_factors: Vec<RandomFactor>,
}

pub fn ingest(data: &Path, model: &Path) -> Result<Ingested> {
    let config = ModelConfig::load(model)?;
    let table = DataTable::read_csv(data)?;
    build(table, config)
}

/// `X` from the intercept and declared columns, factors dummy-coded with the first level dropped.
fn fixed_design(table: &DataTable, config: &ModelConfig) -> Result<(DenseMatrix, Vec<String>)> {
    let n = table.n_rows();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    if config.intercept {
        cols.push(vec![1.0; n]);
        names.push(INTERCEPT.to_string());
    }
    for name in &config.fixed {
        let column = if config.categorical.contains(name) {
            table.factor(name)?
        } else {
            table.column(name)?.clone()
        };
        let added = match column {
            Column::Real(v) => {
                cols.push(v);
                names.push(name.clone());
                vec![name.clone()]
            }
            Column::Categorical { levels, codes } => {
                let mut added = Vec::new();
                for (k, level) in levels.iter().enumerate().skip(1) {
                    cols.push(codes.iter().map(|&c| if c == k { 1.0 } else { 0.0 }).collect());
                    let label = format!("{name}[{level}]");
                    names.push(label.clone());
                    added.push(label);
                }
                added
            }
        };
        let x = DenseMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
        if added.is_empty() || check_full_rank(&x).is_err() {
            return Err(RemlError::RankDeficient(format!(
                "fixed column `{name}` (X columns {added:?}) is linearly dependent on the columns before it"
            ))
            .into());
        }
    }
    if cols.is_empty() {
        return Err(CliError::Config("the model has no fixed effects".into()));
    }
    if cols.len() >= n {
        return Err(RemlError::RankDeficient(format!(
            "X has {} columns but only {n} rows",
            cols.len()
        ))
        .into());
    }
    Ok((DenseMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]), names))
}

fn residual_structure(config: &ModelConfig, n: usize) -> Result<VarianceStructure> {
    Ok(match &config.residual {
        ResidualConfig::Identity => VarianceStructure::Identity { dim: n },
        ResidualConfig::Ar1 { bound: None } => VarianceStructure::ar1(n),
        ResidualConfig::Ar1 { bound: Some(b) } => VarianceStructure::Ar1 { dim: n, bound: *b },
        ResidualConfig::Explicit { matrix } => {
            let text = std::fs::read_to_string(matrix).map_err(|e| CliError::io(matrix, e))?;
            let m = read_matrix_market(&text).map_err(|e| CliError::Parse {
                path: matrix.clone(),
                message: e.to_string(),
            })?;
            if m.order() != n {
                return Err(RemlError::DimensionMismatch(format!(
                    "residual matrix has order {}, data has {n} rows",
                    m.order()
                ))
                .into());
            }
            VarianceStructure::Explicit(ExplicitStructure::fixed(m.to_dense()))
        }
    })
}

pub fn build(table: DataTable, config: ModelConfig) -> Result<Ingested> {
    config.validate()?;
    let n = table.n_rows();
    let y = Vector::from_column_slice(table.real(&config.response)?);
    let (x, fixed_columns) = fixed_design(&table, &config)?;

    let mut factors = Vec::new();
    let mut random_factors = Vec::new();
    for name in &config.random {
        let Column::Categorical { levels, codes } = table.factor(name)? else {
            unreachable!("factor() always returns a categorical column")
        };
        factors.push((codes, levels.len()));
        random_factors.push(RandomFactor {
            name: name.clone(),
            levels,
        });
    }
    let (z, g) = if factors.is_empty() {
        (RandomDesign::none(n), VarianceStructure::Identity { dim: 0 })
    } else {
        let sizes = factors.iter().map(|f| f.1).collect();
        (
            RandomDesign::from_indicators(n, &factors)?,
            VarianceStructure::IidBlocks { sizes },
        )
    };
    let r = residual_structure(&config, n)?;
    let gamma_names: Vec<String> = config.random.iter().map(|f| format!("gamma[{f}]")).collect();
    let spec = ModelSpec::new(y, x, z, g, r, config.parameterization)?.with_random_names(&gamma_names);
    Ok(Ingested {
        spec,
        table,
        config,
        fixed_columns,
        random_factors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(csv: &str, toml_text: &str) -> Result<Ingested> {
        let table = DataTable::from_reader(csv.as_bytes(), Path::new("d.csv")).unwrap();
        build(table, toml::from_str(toml_text).unwrap())
    }

    const DATA: &str = "y,x,trt,g\n1.0,0.5,a,u\n2.0,1.5,b,v\n1.5,2.5,c,u\n3.0,0.1,a,w\n2.2,0.7,b,v\n0.9,1.9,c,w\n";

    #[test]
    fn three_level_factor_adds_two_columns() {
        let m = run(DATA, "response = \"y\"\nfixed = [\"x\", \"trt\"]").unwrap();
        assert_eq!(m.fixed_columns, ["(intercept)", "x", "trt[b]", "trt[c]"]);
        assert_eq!(m.spec.p(), 4);
        assert_eq!(m.spec.x()[(1, 2)], 1.0);
        assert_eq!(m.spec.x()[(0, 2)] + m.spec.x()[(0, 3)], 0.0);
    }

    #[test]
    fn grouping_factor_gives_indicator_block() {
        let m = run(DATA, "response = \"y\"\nrandom = [\"g\"]").unwrap();
        let z = m.spec.z().to_dense();
        assert_eq!(z.shape(), (6, 3));
        for i in 0..6 {
            assert_eq!(z.row(i).sum(), 1.0);
        }
        assert_eq!(m.random_factors[0].levels, ["u", "v", "w"]);
        assert_eq!(m.spec.param_names(), ["sigma2", "gamma[g]"]);
    }

    #[test]
    fn duplicate_column_is_named() {
        let csv = "y,x,x2\n1,1,1\n2,2,2\n3,3,3\n4,5,5\n";
        let err = run(csv, "response = \"y\"\nfixed = [\"x\", \"x2\"]").unwrap_err();
        match err {
            CliError::Core(RemlError::RankDeficient(msg)) => assert!(msg.contains("`x2`")),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn unknown_column() {
        let err = run(DATA, "response = \"y\"\nrandom = [\"block\"]").unwrap_err();
        assert!(matches!(err, CliError::UnknownColumn(c) if c == "block"));
    }

    #[test]
    fn categorical_response_rejected() {
        assert!(run(DATA, "response = \"trt\"").is_err());
    }
}
