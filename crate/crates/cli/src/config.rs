//! Config files and their merge into the argument list.
//!
//! A config file is either a JSON object or `key=value` lines (`#` starts a
//! comment). Keys are long option names without the dashes; underscores are
//! accepted for hyphens. Options present on the command line win.

use std::ffi::OsString;
use std::path::Path;

use serde_json::Value;

use crate::error::{CliError, CliResult};

/// `(option, value)` pairs; `None` for a bare switch.
pub type Settings = Vec<(String, Option<String>)>;

pub fn parse_config(text: &str) -> CliResult<Settings> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        parse_json(trimmed)
    } else {
        parse_key_values(text)
    }
}

fn normalise_key(key: &str) -> CliResult<String> {
    let key = key.trim().trim_start_matches("--").replace('_', "-");
    if key.is_empty() || !key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-') {
        return Err(CliError::usage(format!("invalid config key {key:?}")));
    }
    if key == "config" {
        return Err(CliError::usage(
            "a config file cannot name another config file",
        ));
    }
    Ok(key)
}

fn scalar(key: &str, v: &Value) -> CliResult<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(CliError::usage(format!(
            "config key {key:?} must be a string, number, boolean or flat list"
        ))),
    }
}

fn parse_json(text: &str) -> CliResult<Settings> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| CliError::usage(format!("config file: {e}")))?;
    let Value::Object(map) = value else {
        return Err(CliError::usage("config file must hold a JSON object"));
    };
    let mut out = Vec::new();
    for (k, v) in &map {
        let key = normalise_key(k)?;
        match v {
            Value::Bool(true) => out.push((key, None)),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let parts = items
                    .iter()
                    .map(|x| scalar(&key, x))
                    .collect::<CliResult<Vec<_>>>()?;
                out.push((key, Some(parts.join(","))));
            }
            other => out.push((key.clone(), Some(scalar(&key, other)?))),
        }
    }
    Ok(out)
}

fn parse_key_values(text: &str) -> CliResult<Settings> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::usage(format!(
                "config line {}: expected key=value",
                n + 1
            )));
        };
        let key = normalise_key(k)?;
        match v.trim() {
            "true" => out.push((key, None)),
            "false" => {}
            v => out.push((key, Some(v.to_owned()))),
        }
    }
    Ok(out)
}

fn given_on_command_line(args: &[OsString], key: &str) -> bool {
    let flag = format!("--{key}");
    let prefix = format!("--{key}=");
    args.iter().any(|a| {
        a.to_str()
            .is_some_and(|s| s == flag || s.starts_with(&prefix))
    })
}

/// Returns the value of `--config` if present.
pub fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.to_str() {
            Some("--config") => return it.next().cloned(),
            Some(s) if s.starts_with("--config=") => return Some(s["--config=".len()..].into()),
            _ => {}
        }
    }
    None
}

/// Inserts `settings` right after the subcommand, skipping options the
/// command line already sets.
pub fn merge(args: Vec<OsString>, settings: &Settings, subcommands: &[String]) -> Vec<OsString> {
    let Some(at) = args
        .iter()
        .skip(1)
        .position(|a| {
            a.to_str()
                .is_some_and(|s| subcommands.iter().any(|c| c == s))
        })
        .map(|p| p + 2)
    else {
        return args;
    };
    let mut extra = Vec::new();
    for (key, value) in settings {
        if given_on_command_line(&args, key) {
            continue;
        }
        match value {
            None => extra.push(OsString::from(format!("--{key}"))),
            Some(v) => extra.push(OsString::from(format!("--{key}={v}"))),
        }
    }
    let mut out = args;
    out.splice(at..at, extra);
    out
}

pub fn load(path: &Path) -> CliResult<Settings> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}
