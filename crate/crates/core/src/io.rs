//! Dense matrices and vectors as header-free, row-major CSV.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn parse_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|field| {
                field
                    .parse::<f64>()
                    .map_err(|e| Error::InvalidInput(format!("row {}: cannot parse {field:?}: {e}", line + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("row {}: non-finite entry", line + 1)));
        }
        rows.push(row);
    }
    let Some(first) = rows.first() else {
        return Err(Error::InvalidInput("matrix file is empty".into()));
    };
    let cols = first.len();
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.into_iter().flatten()))
}

pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    parse_matrix_csv(File::open(path)?)
}

/// A vector stored either as one column or as one row.
pub fn read_vector_csv(path: &Path) -> Result<DVector<f64>> {
    let m = read_matrix_csv(path)?;
    match (m.nrows(), m.ncols()) {
        (_, 1) => Ok(m.column(0).into_owned()),
        (1, _) => Ok(m.row(0).transpose()),
        (r, c) => Err(Error::InvalidInput(format!(
            "{}: expected a single row or column, found {r} x {c}",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_parse() {
        let m = parse_matrix_csv("1,2,3\n4, 5 ,6\n".as_bytes()).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    }

    #[test]
    fn ragged_and_bad_input_rejected() {
        assert!(parse_matrix_csv("1,2\n3\n".as_bytes()).is_err());
        assert!(parse_matrix_csv("1,x\n".as_bytes()).is_err());
        assert!(parse_matrix_csv("".as_bytes()).is_err());
        assert!(parse_matrix_csv("1,NaN\n".as_bytes()).is_err());
    }
}
