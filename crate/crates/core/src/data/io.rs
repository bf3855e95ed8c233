use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{check_unique, DataError, FeatureMatrix};

#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub label_column: String,
    /// Cell text treated as missing, in addition to the empty string.
    pub missing_token: String,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self { label_column: "label".into(), missing_token: String::new() }
    }
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str, missing_token: &str) -> Result<FeatureMatrix, DataError> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    read_csv(text.as_bytes(), &CsvOptions { label_column: label_column.into(), missing_token: missing_token.into() })
}

/// Parse a cohort CSV: header row, one subject per line, every non-label
/// column numeric.
pub fn read_csv(reader: impl Read, opts: &CsvOptions) -> Result<FeatureMatrix, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(|e| DataError::Csv(e.to_string()))?.iter().map(str::to_string).collect();
    check_unique(&header)?;
    let label_idx = header
        .iter()
        .position(|h| *h == opts.label_column)
        .ok_or_else(|| DataError::MissingLabelColumn(opts.label_column.clone()))?;
    let feature_names: Vec<String> = header.iter().enumerate().filter(|(j, _)| *j != label_idx).map(|(_, h)| h.clone()).collect();

    let mut values = Vec::new();
    let mut missing = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
        // Data rows are numbered from 1, matching the subject numbering in the file.
        let row = r + 1;
        for (j, cell) in record.iter().enumerate() {
            let is_missing = cell.is_empty() || (!opts.missing_token.is_empty() && cell == opts.missing_token);
            if j == label_idx {
                labels.push(match cell {
                    _ if is_missing => None,
                    "0" => Some(0),
                    "1" => Some(1),
                    other => return Err(DataError::InvalidLabel { row, value: other.to_string() }),
                });
                continue;
            }
            if is_missing {
                values.push(f64::NAN);
                missing.push(true);
            } else {
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| DataError::Parse { row, column: header[j].clone(), value: cell.to_string() })?;
                values.push(v);
                missing.push(false);
            }
        }
    }
    Ok(FeatureMatrix { feature_names, values, missing, labels, label_name: opts.label_column.clone() })
}

/// Write in the same layout `read_csv` expects: features first, label last.
/// Values use the shortest representation that round-trips exactly.
pub fn write_csv(fm: &FeatureMatrix, path: impl AsRef<Path>, missing_token: &str) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io { path: path.display().to_string(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let mut line = fm.feature_names.join(",");
    line.push(',');
    line.push_str(&fm.label_name);
    writeln!(w, "{line}").map_err(io_err)?;
    for i in 0..fm.n_subjects() {
        line.clear();
        for j in 0..fm.n_features() {
            if j > 0 {
                line.push(',');
            }
            if fm.is_missing(i, j) {
                line.push_str(missing_token);
            } else {
                line.push_str(&format!("{:?}", fm.get(i, j)));
            }
        }
        line.push(',');
        if let Some(l) = fm.labels[i] {
            line.push_str(&l.to_string());
        }
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
