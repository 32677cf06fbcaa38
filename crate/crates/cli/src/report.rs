//! Report and manifest emission. All numeric content lives in
//! `report.json`, whose bytes are a pure function of config and seed; the
//! wall-clock stamp goes to `manifest.json` so determinism checks can
//! compare reports directly.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

#[derive(Debug, Serialize)]
pub struct Diagnostic {
    pub kind: &'static str,
    pub message: String,
}

/// Envelope around a command-specific body; the body's fields are inlined
/// at the top level of the document.
#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    command: &'a str,
    gates_passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    diagnostic: Option<&'a Diagnostic>,
    #[serde(flatten)]
    body: Option<&'a T>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

pub fn write_report<T: Serialize>(
    dir: &Path,
    command: &str,
    gates_passed: bool,
    diagnostic: Option<&Diagnostic>,
    body: Option<&T>,
) -> Result<(), CliError> {
    write_json(
        &dir.join("report.json"),
        &Report {
            command,
            gates_passed,
            diagnostic,
            body,
        },
    )
}

/// Best-effort terminal report for runs that abort before producing a body.
pub fn write_diagnostic(dir: &Path, command: &str, err: &CliError) {
    if fs::create_dir_all(dir).is_err() {
        return;
    }
    let diag = Diagnostic {
        kind: err.kind(),
        message: err.message().to_string(),
    };
    let _ = write_report::<()>(dir, command, false, Some(&diag), None);
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    /// The fully resolved configuration, defaults included.
    config: &'a C,
    /// Value of NODECTL_THREADS if it capped the worker pool.
    threads_cap: Option<usize>,
    timestamp_unix_ms: u128,
}

pub fn write_manifest<C: Serialize>(dir: &Path, command: &str, config: &C) -> Result<(), CliError> {
    let timestamp_unix_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command,
            config,
            threads_cap: crate::threads_cap(),
            timestamp_unix_ms,
        },
    )
}
