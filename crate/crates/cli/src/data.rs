//! Rectangular CSV tables with real and categorical columns.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Real(Vec<f64>),
    /// Levels in order of first appearance; `codes[i]` indexes `levels`.
    Categorical { levels: Vec<String>, codes: Vec<usize> },
}

#[derive(Debug, Clone)]
pub struct DataTable {
    names: Vec<String>,
    cells: Vec<Vec<String>>,
    columns: Vec<Column>,
    rows: usize,
    source: PathBuf,
}

fn factor(cells: &[String]) -> Column {
    let mut levels: Vec<String> = Vec::new();
    let codes = cells
        .iter()
        .map(|c| match levels.iter().position(|l| l == c) {
            Some(k) => k,
            None => {
                levels.push(c.clone());
                levels.len() - 1
            }
        })
        .collect();
    Column::Categorical { levels, codes }
}

fn infer(cells: &[String]) -> Column {
    let parsed: Option<Vec<f64>> = cells
        .iter()
        .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect();
    match parsed {
        Some(v) => Column::Real(v),
        None => factor(cells),
    }
}

impl DataTable {
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        Self::from_reader(file, path)
    }

    pub fn from_reader<R: Read>(reader: R, source: &Path) -> Result<Self> {
        let parse_err = |message: String| CliError::Parse {
            path: source.to_path_buf(),
            message,
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| parse_err(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if names.is_empty() || names.iter().any(String::is_empty) {
            return Err(parse_err("header has an empty column name".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(parse_err(format!("duplicate column name `{n}`")));
            }
        }
        let mut cells = vec![Vec::new(); names.len()];
        let mut rows = 0;
        for record in rdr.records() {
            let record = record.map_err(|e| parse_err(e.to_string()))?;
            rows += 1;
            for (j, field) in record.iter().enumerate() {
                if field.is_empty() {
                    return Err(parse_err(format!(
                        "empty value in column `{}` on data row {rows}",
                        names[j]
                    )));
                }
                cells[j].push(field.to_string());
            }
        }
        if rows == 0 {
            return Err(parse_err("no data rows".into()));
        }
        let columns = cells.iter().map(|c| infer(c)).collect();
        Ok(Self {
            names,
            cells,
            columns,
            rows,
            source: source.to_path_buf(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| CliError::UnknownColumn(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        Ok(&self.columns[self.index(name)?])
    }

    pub fn real(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Real(v) => Ok(v),
            Column::Categorical { .. } => Err(CliError::Config(format!(
                "column `{name}` is not numeric"
            ))),
        }
    }

    /// The column read as a factor, whatever its inferred type.
    pub fn factor(&self, name: &str) -> Result<Column> {
        Ok(factor(&self.cells[self.index(name)?]))
    }

    /// Writes the table with column `name` replaced by `values`.
    pub fn write_with<W: std::io::Write>(&self, out: W, name: &str, values: &[f64]) -> Result<()> {
        let target = self.index(name)?;
        let mut w = csv::Writer::from_writer(out);
        let wrap = |e: csv::Error| CliError::Usage(format!("writing CSV: {e}"));
        w.write_record(&self.names).map_err(wrap)?;
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.names.len())
                .map(|j| {
                    if j == target {
                        format!("{}", values[i])
                    } else {
                        self.cells[j][i].clone()
                    }
                })
                .collect();
            w.write_record(&row).map_err(wrap)?;
        }
        w.flush().map_err(|e| CliError::Usage(format!("writing CSV: {e}")))?;
        Ok(())
    }
}
