//! CSV ingestion. The header is `label,f0,f1,…`; each row holds an integer
//! label followed by the numeric features.

use std::path::Path;

use super::{Dataset, SampleId};
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        message: message.into(),
    }
}

/// Reads a labelled CSV file. With `num_classes = None` the class count is
/// one past the largest label seen (at least two).
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(path, 1, e.to_string()))?;

    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if headers.get(0) != Some("label") {
        return Err(parse_err(path, 1, "first column must be named `label`"));
    }
    let input_dim = headers.len() - 1;
    if input_dim == 0 {
        return Err(parse_err(path, 1, "no feature columns"));
    }
    for (j, name) in headers.iter().skip(1).enumerate() {
        if name != format!("f{j}") {
            return Err(parse_err(
                path,
                1,
                format!(
                    "feature column {} must be named `f{j}`, found `{name}`",
                    j + 1
                ),
            ));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| parse_err(path, line, format!("invalid label `{}`", &record[0])))?;
        if let Some(k) = num_classes {
            if label >= k {
                return Err(parse_err(
                    path,
                    line,
                    format!("unknown label {label} (expected 0..{k})"),
                ));
            }
        }
        labels.push(label);
        for cell in record.iter().skip(1) {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("non-numeric cell `{cell}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite cell `{cell}`")));
            }
            features.push(v);
        }
    }
    if labels.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }

    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_owned(), |s| s.to_string_lossy().into_owned());
    let ids = (0..labels.len() as u64).map(SampleId).collect();
    Dataset::new(name, input_dim, k, ids, features, labels)
}

/// Writes `data` in the format read by [`load_csv`]. Sample ids are not
/// stored; rows come back with ids `0..n` in file order.
pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header = vec!["label".to_owned()];
    header.extend((0..data.input_dim()).map(|j| format!("f{j}")));
    writer
        .write_record(&header)
        .map_err(|e| Error::Io(e.into()))?;
    for i in 0..data.len() {
        let mut rec = vec![data.label(i).to_string()];
        rec.extend(data.row(i).iter().map(|v| v.to_string()));
        writer.write_record(&rec).map_err(|e| Error::Io(e.into()))?;
    }
    writer.flush()?;
    Ok(())
}
