pub mod accountant;
pub mod bench;
pub mod project_error;
pub mod report;
pub mod train;

use std::io::Write;

use serde::de::DeserializeOwned;

use crate::error::{CliError, Result};

/// Parses a flag value through the type's serde name (e.g. `random-basis-gep`).
pub fn parse_named<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

pub(crate) fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| CliError::io("<stdout>", e))
}
