use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Writes a matrix as CSV with a one-line header of column names.
pub fn write_matrix_csv(
    path: impl AsRef<Path>,
    columns: &[String],
    rows: ArrayView2<'_, f64>,
) -> Result<()> {
    let path = path.as_ref();
    if columns.len() != rows.ncols() {
        return Err(Error::Dimension(format!(
            "{} column names for {} columns",
            columns.len(),
            rows.ncols()
        )));
    }
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{}", columns.join(",")).map_err(io)?;
    for row in rows.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a CSV written by [`write_matrix_csv`]: header names plus rows.
pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<(Vec<String>, Array2<f64>)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        message: "empty file, expected a header".into(),
    })?;
    let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut values = Vec::new();
    let mut n = 0;
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("{} fields, header has {}", fields.len(), columns.len()),
            });
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("not a number: {:?}", f.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "non-finite value".into(),
                });
            }
            values.push(v);
        }
        n += 1;
    }
    let data = Array2::from_shape_vec((n, columns.len()), values).expect("row widths checked");
    Ok((columns, data))
}
