//! Report envelopes, output and `export-report`.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Tables tried, in order, when `export-report` is not told which to use.
const TABLE_KEYS: [&str; 7] = [
    "rows",
    "points",
    "per_fraction",
    "history",
    "cells",
    "epochs",
    "strategies",
];

/// Wraps a report body with the schema version and command name. Key order
/// in the output is sorted, so equal inputs give identical bytes.
pub fn envelope(command: &str, body: impl Serialize) -> CliResult<Value> {
    let mut value = serde_json::to_value(body)?;
    let Value::Object(map) = &mut value else {
        return Err(CliError::Runtime("report body must be an object".into()));
    };
    map.insert("schema_version".into(), SCHEMA_VERSION.into());
    map.insert("command".into(), command.into());
    Ok(value)
}

pub fn to_pretty(value: &Value) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| CliError::io(format!("writing {}", p.display()), e))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::io("writing standard output", e))
        }
    }
}

pub fn emit(path: Option<&Path>, value: &Value) -> CliResult<()> {
    write_text(path, &to_pretty(value)?)
}

pub fn read_report(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("{} is not JSON: {e}", path.display())))?;
    validate(&value)?;
    Ok(value)
}

/// A report is an object carrying a supported `schema_version`.
pub fn validate(value: &Value) -> CliResult<()> {
    let version = value
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| CliError::usage("not a report: no schema_version"))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(CliError::usage(format!(
            "unsupported schema_version {version}"
        )));
    }
    Ok(())
}

fn is_table(v: &Value) -> bool {
    matches!(v, Value::Array(items) if !items.is_empty() && items.iter().all(Value::is_object))
}

fn find_table<'a>(value: &'a Value, name: Option<&str>) -> CliResult<(&'a str, &'a Vec<Value>)> {
    let map = value
        .as_object()
        .ok_or_else(|| CliError::usage("report is not an object"))?;
    let pick = |key: &str| -> Option<(&'a str, &'a Vec<Value>)> {
        let (k, v) = map.get_key_value(key)?;
        is_table(v).then(|| (k.as_str(), v.as_array().expect("checked")))
    };
    if let Some(name) = name {
        return pick(name).ok_or_else(|| CliError::usage(format!("report has no table {name:?}")));
    }
    TABLE_KEYS
        .iter()
        .find_map(|k| pick(k))
        .or_else(|| map.keys().find_map(|k| pick(k)))
        .ok_or_else(|| CliError::usage("report has no table to export"))
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_owned(), other.clone());
        }
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        Value::Bool(b) => b.to_string(),
        other => other.to_string(),
    }
}

/// Flattens one table of the report into CSV; nested keys are joined with
/// dots and list-valued cells hold their JSON text.
pub fn to_csv(value: &Value, table: Option<&str>) -> CliResult<String> {
    let (_, rows) = find_table(value, table)?;
    let flat: Vec<Map<String, Value>> = rows
        .iter()
        .map(|r| {
            let mut m = Map::new();
            flatten("", r, &mut m);
            m
        })
        .collect();
    let mut header: Vec<String> = Vec::new();
    for row in &flat {
        for k in row.keys() {
            if !header.contains(k) {
                header.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Runtime(e.to_string());
    w.write_record(&header).map_err(err)?;
    for row in &flat {
        w.write_record(
            header
                .iter()
                .map(|k| row.get(k).map(cell).unwrap_or_default()),
        )
        .map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Runtime(e.to_string()))
}
