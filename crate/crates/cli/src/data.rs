//! CSV panel ingestion.
//!
//! Long format: the first K columns are 0-based integer axis indices, the
//! remaining columns are named variables. The index grid must be dense —
//! every cell `(i₁, …, i_K)` with `i_k < N_k` appears exactly once.

use jkpanel_core::estimators::PanelDataset;
use jkpanel_core::design::PanelShape;
use std::path::Path;

/// Errors from panel loading, all user-input problems (exit code 1).
#[derive(Debug, thiserror::Error)]
pub enum DataError {
    /// File-system failure.
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Structural CSV failure.
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    /// A cell failed to parse as the expected type.
    #[error("parse error in {path} at data row {row}: {detail}")]
    Parse { path: String, row: usize, detail: String },
    /// The index grid has holes or duplicates.
    #[error("shape mismatch in {path}: {detail}")]
    ShapeMismatch { path: String, detail: String },
}

/// Load a long-format CSV into a dense panel dataset.
///
/// `k` is the number of leading index columns (the design's axis count).
pub fn load_panel_csv(path: &Path, k: usize) -> Result<PanelDataset, DataError> {
    let display = path.display().to_string();
    let io_err = |source| DataError::Io { path: display.clone(), source };
    let csv_err = |source| DataError::Csv { path: display.clone(), source };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => {
                if let csv::ErrorKind::Io(io) = e.into_kind() {
                    io_err(io)
                } else {
                    unreachable!("kind checked above")
                }
            }
            _ => csv_err(e),
        })?;

    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.len() < k + 1 {
        return Err(DataError::ShapeMismatch {
            path: display,
            detail: format!(
                "{} columns, but a {k}-axis panel needs {k} index columns plus at least one variable",
                headers.len()
            ),
        });
    }
    let var_names: Vec<String> = headers.iter().skip(k).map(str::to_string).collect();

    // First pass: read all rows, tracking per-axis extents.
    let mut indices: Vec<Vec<usize>> = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut dims = vec![0usize; k];
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != headers.len() {
            return Err(DataError::Parse {
                path: display,
                row: row_no + 1,
                detail: format!("{} fields, expected {}", record.len(), headers.len()),
            });
        }
        let mut idx = Vec::with_capacity(k);
        for ax in 0..k {
            let raw = &record[ax];
            let parsed: usize = raw.parse().map_err(|_| DataError::Parse {
                path: display.clone(),
                row: row_no + 1,
                detail: format!("index column {:?} value {raw:?} is not a 0-based integer", &headers[ax]),
            })?;
            dims[ax] = dims[ax].max(parsed + 1);
            idx.push(parsed);
        }
        let mut vals = Vec::with_capacity(var_names.len());
        for (v, name) in var_names.iter().enumerate() {
            let raw = &record[k + v];
            let parsed: f64 = raw.parse().map_err(|_| DataError::Parse {
                path: display.clone(),
                row: row_no + 1,
                detail: format!("variable {name:?} value {raw:?} is not a real number"),
            })?;
            if !parsed.is_finite() {
                return Err(DataError::Parse {
                    path: display,
                    row: row_no + 1,
                    detail: format!("variable {name:?} value {raw:?} is not finite"),
                });
            }
            vals.push(parsed);
        }
        indices.push(idx);
        values.push(vals);
    }

    let total: usize = dims.iter().product();
    if total == 0 {
        return Err(DataError::ShapeMismatch { path: display, detail: "no data rows".into() });
    }
    if indices.len() != total {
        return Err(DataError::ShapeMismatch {
            path: display,
            detail: format!(
                "{} rows for inferred dims {dims:?} ({} cells): the index grid has holes or duplicates",
                indices.len(),
                total
            ),
        });
    }

    // Second pass: place values row-major, demanding each cell exactly once.
    let mut seen = vec![false; total];
    let mut columns: Vec<Vec<f64>> = vec![vec![0.0; total]; var_names.len()];
    for (idx, vals) in indices.iter().zip(&values) {
        let mut flat = 0usize;
        for ax in 0..k {
            flat = flat * dims[ax] + idx[ax];
        }
        if seen[flat] {
            return Err(DataError::ShapeMismatch {
                path: display,
                detail: format!("cell {idx:?} appears more than once"),
            });
        }
        seen[flat] = true;
        for (col, v) in columns.iter_mut().zip(vals) {
            col[flat] = *v;
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        // Decode the flat index back to coordinates for the message.
        let mut coords = vec![0usize; k];
        let mut rem = missing;
        for ax in (0..k).rev() {
            coords[ax] = rem % dims[ax];
            rem /= dims[ax];
        }
        return Err(DataError::ShapeMismatch {
            path: display,
            detail: format!("cell {coords:?} is missing from the grid"),
        });
    }

    let shape = PanelShape::new(dims).map_err(|e| DataError::ShapeMismatch {
        path: display.clone(),
        detail: e.to_string(),
    })?;
    let mut data = PanelDataset::new(shape);
    for (name, col) in var_names.into_iter().zip(columns) {
        data = data.with_variable(name, col).map_err(|e| DataError::ShapeMismatch {
            path: display.clone(),
            detail: e.to_string(),
        })?;
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_dense_two_axis_panel() {
        let f = write_csv("i,t,y,x\n0,0,1.0,0.5\n0,1,2.0,1.5\n1,0,3.0,2.5\n1,1,4.0,3.5\n");
        let data = load_panel_csv(f.path(), 2).unwrap();
        assert_eq!(data.shape().dims(), &[2, 2]);
        assert_eq!(data.variable("y").unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(data.variable("x").unwrap(), &[0.5, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn row_order_does_not_matter() {
        let f = write_csv("i,t,y\n1,1,4.0\n0,0,1.0\n1,0,3.0\n0,1,2.0\n");
        let data = load_panel_csv(f.path(), 2).unwrap();
        assert_eq!(data.variable("y").unwrap(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_holes_and_duplicates() {
        let hole = write_csv("i,t,y\n0,0,1.0\n0,1,2.0\n1,0,3.0\n");
        let err = load_panel_csv(hole.path(), 2).unwrap_err();
        assert!(matches!(err, DataError::ShapeMismatch { .. }), "{err}");

        let dup = write_csv("i,t,y\n0,0,1.0\n0,0,2.0\n1,0,3.0\n1,1,4.0\n");
        let err = load_panel_csv(dup.path(), 2).unwrap_err();
        assert!(matches!(err, DataError::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn rejects_bad_cells() {
        let bad_idx = write_csv("i,t,y\nzero,0,1.0\n");
        assert!(matches!(
            load_panel_csv(bad_idx.path(), 2),
            Err(DataError::Parse { .. })
        ));
        let bad_val = write_csv("i,t,y\n0,0,one\n0,1,2.0\n");
        assert!(matches!(
            load_panel_csv(bad_val.path(), 2),
            Err(DataError::Parse { .. })
        ));
        let nan = write_csv("i,t,y\n0,0,NaN\n0,1,2.0\n");
        assert!(matches!(load_panel_csv(nan.path(), 2), Err(DataError::Parse { .. })));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_panel_csv(Path::new("/nonexistent/panel.csv"), 2).unwrap_err();
        assert!(matches!(err, DataError::Io { .. }));
    }
}
