//! CSV tables: comma separated, `.` decimal, mandatory header row, UTF-8.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column {column}: `{value}` is not a number")]
    NotNumeric { row: usize, column: String, value: String },
    #[error("row {row} has {got} fields, header has {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
    #[error("table has no header row")]
    MissingHeader,
    #[error("table has no data rows")]
    Empty,
    #[error("no column named `{0}`")]
    UnknownColumn(String),
}

pub type Result<T> = std::result::Result<T, IoError>;

/// A numeric CSV table. Data rows are numbered from 1 in error messages.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub curves: DMatrix<f64>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::UnknownColumn(name.to_string()))?;
        Ok(self.curves.column(j).iter().copied().collect())
    }
}

pub fn parse_table<R: Read>(reader: R) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(IoError::MissingHeader);
    }
    let width = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != width {
            return Err(IoError::Ragged {
                row: r + 1,
                expected: width,
                got: rec.len(),
            });
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| IoError::NotNumeric {
                row: r + 1,
                column: header[c].clone(),
                value: field.to_string(),
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(IoError::Empty);
    }
    Ok(Table {
        header,
        curves: DMatrix::from_row_slice(rows, width, &values),
    })
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = fs::File::open(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_table(std::io::BufReader::new(file))
}

/// Curve matrix with one subject per row (header `t_1,...,t_m` by convention).
pub fn read_curve_csv(path: &Path) -> Result<Table> {
    read_table(path)
}

/// Default header `t_1,...,t_m`.
pub fn grid_header(m: usize) -> Vec<String> {
    (1..=m).map(|j| format!("t_{j}")).collect()
}

/// Renders rows as CSV text. Floats use the shortest representation that
/// parses back to the same value.
pub fn table_to_string(header: &[String], rows: &DMatrix<f64>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows.row_iter() {
        let fields: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Writes `contents` to `path` through a sibling temp file and a rename, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let err = |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(err)?;
    f.write_all(contents).map_err(err)?;
    f.sync_all().map_err(err)?;
    drop(f);
    fs::rename(&tmp, path).map_err(err)
}

pub fn write_table(path: &Path, header: &[String], rows: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, table_to_string(header, rows).as_bytes())
}
