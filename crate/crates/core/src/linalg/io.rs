//! Text formats: Matrix Market coordinate files for [`SparseSymmetric`]
//! (lower triangle, `real symmetric`) and headerless CSV for dense matrices.

use std::fmt::Write as _;

use super::{DenseMatrix, SparseSymmetric};
use crate::error::{RemlError, Result};

pub fn write_matrix_market(a: &SparseSymmetric) -> String {
    let mut out = String::from("%%MatrixMarket matrix coordinate real symmetric\n");
    let _ = writeln!(out, "{} {} {}", a.order(), a.order(), a.nnz());
    for j in 0..a.order() {
        for (i, v) in a.column(j) {
            let _ = writeln!(out, "{} {} {:e}", i + 1, j + 1, v);
        }
    }
    out
}

pub fn read_matrix_market(text: &str) -> Result<SparseSymmetric> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| RemlError::Parse("empty Matrix Market file".into()))?;
    let fields: Vec<String> = header.split_whitespace().map(str::to_ascii_lowercase).collect();
    if fields.len() != 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" {
        return Err(RemlError::Parse(format!("bad Matrix Market header: {header}")));
    }
    if fields[2] != "coordinate" || fields[3] != "real" || fields[4] != "symmetric" {
        return Err(RemlError::Parse(format!(
            "unsupported Matrix Market type `{} {} {}` (need coordinate real symmetric)",
            fields[2], fields[3], fields[4]
        )));
    }
    let mut body = lines.filter(|l| !l.trim().is_empty() && !l.starts_with('%'));
    let size = body
        .next()
        .ok_or_else(|| RemlError::Parse("missing size line".into()))?;
    let dims = parse_numbers::<usize>(size)?;
    if dims.len() != 3 || dims[0] != dims[1] {
        return Err(RemlError::Parse(format!("bad size line: {size}")));
    }
    let (order, nnz) = (dims[0], dims[2]);
    let mut triplets = Vec::with_capacity(nnz);
    for line in body {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(RemlError::Parse(format!("bad entry line: {line}")));
        }
        let i: usize = parse_one(parts[0])?;
        let j: usize = parse_one(parts[1])?;
        let v: f64 = parse_one(parts[2])?;
        if i == 0 || j == 0 {
            return Err(RemlError::Parse(format!("indices are 1-based: {line}")));
        }
        triplets.push((i - 1, j - 1, v));
    }
    if triplets.len() != nnz {
        return Err(RemlError::Parse(format!(
            "declared {nnz} entries, found {}",
            triplets.len()
        )));
    }
    SparseSymmetric::from_triplets(order, triplets)
}

/// One row per line, comma separated, no header.
pub fn write_dense_csv(a: &DenseMatrix) -> String {
    let mut out = String::new();
    for i in 0..a.nrows() {
        let row: Vec<String> = (0..a.ncols()).map(|j| format!("{:e}", a[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn read_dense_csv(text: &str) -> Result<DenseMatrix> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|f| parse_one(f.trim())).collect())
        .collect::<Result<_>>()?;
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(RemlError::Parse("empty matrix".into()));
    }
    if let Some(r) = rows.iter().position(|r| r.len() != ncols) {
        return Err(RemlError::Parse(format!(
            "row {} has {} fields, expected {ncols}",
            r + 1,
            rows[r].len()
        )));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(RemlError::Parse("non-finite entry".into()));
    }
    Ok(DenseMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn parse_one<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| RemlError::Parse(format!("cannot parse `{s}`")))
}

fn parse_numbers<T: std::str::FromStr>(line: &str) -> Result<Vec<T>> {
    line.split_whitespace().map(parse_one).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_market_roundtrip() {
        let a = SparseSymmetric::from_triplets(3, [(0, 0, 4.0), (2, 0, -1.5), (1, 1, 2.0), (2, 2, 3.25)])
            .unwrap();
        let text = write_matrix_market(&a);
        assert!(text.starts_with("%%MatrixMarket matrix coordinate real symmetric\n3 3 4\n"));
        assert_eq!(read_matrix_market(&text).unwrap(), a);
    }

    #[test]
    fn matrix_market_rejects_general() {
        let text = "%%MatrixMarket matrix coordinate real general\n1 1 1\n1 1 2.0\n";
        assert!(matches!(read_matrix_market(text), Err(RemlError::Parse(_))));
    }

    #[test]
    fn matrix_market_entry_count_checked() {
        let text = "%%MatrixMarket matrix coordinate real symmetric\n% c\n2 2 2\n1 1 2.0\n";
        assert!(read_matrix_market(text).is_err());
    }

    #[test]
    fn dense_csv_roundtrip() {
        let a = DenseMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3.0, 0.1, 0.0, 1e-17]);
        assert_eq!(read_dense_csv(&write_dense_csv(&a)).unwrap(), a);
        assert!(read_dense_csv("1,2\n3\n").is_err());
    }
}
