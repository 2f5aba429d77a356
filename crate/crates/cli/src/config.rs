//! Optional TOML config file, flag-over-file merging and the run log.
//!
//! Top-level keys hold global options (`seed`, `threads`, `precision`,
//! `run-log`); a table named after a subcommand holds that command's options
//! under their flag names, e.g.
//!
//! ```toml
//! seed = 7
//! threads = 1
//!
//! [train]
//! epochs = 20
//! lambda-l1 = 100.0
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Debug, Default)]
pub struct FileConfig {
    table: Map<String, Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        match serde_json::to_value(table) {
            Ok(Value::Object(table)) => Ok(FileConfig { table }),
            _ => Err(CliError::usage(format!("config {} is not a table", path.display()))),
        }
    }

    fn section(&self, name: &str) -> Result<Map<String, Value>, CliError> {
        match self.table.get(name) {
            None => Ok(Map::new()),
            Some(Value::Object(m)) => Ok(m.clone()),
            Some(_) => Err(CliError::usage(format!("config key '{name}' must be a table"))),
        }
    }

    /// Top-level scalars, i.e. the global options.
    fn globals(&self) -> Map<String, Value> {
        self.table.iter().filter(|(_, v)| !v.is_object()).map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

/// Overlays the flags that were given on top of the file's values.
fn overlay<A: Serialize + DeserializeOwned>(mut base: Map<String, Value>, args: &A, what: &str) -> Result<A, CliError> {
    let flags = serde_json::to_value(args).map_err(|e| CliError::usage(e.to_string()))?;
    if let Value::Object(flags) = flags {
        base.extend(flags.into_iter().filter(|(_, v)| !v.is_null()));
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| CliError::usage(format!("{what}: {e}")))
}

/// Command options with flags taking precedence over `[section]`.
pub fn merge_section<A: Serialize + DeserializeOwned>(file: &FileConfig, section: &str, args: &A) -> Result<A, CliError> {
    overlay(file.section(section)?, args, &format!("[{section}] options"))
}

pub fn merge_globals<A: Serialize + DeserializeOwned>(file: &FileConfig, args: &A) -> Result<A, CliError> {
    let mut globals = file.globals();
    // The config path itself only makes sense on the command line.
    globals.remove("config");
    overlay(globals, args, "global options")
}

/// Appends one JSON line with the fully resolved configuration.
pub fn append_run_log(path: &Path, command: &str, globals: &impl Serialize, resolved: &impl Serialize) -> Result<(), CliError> {
    let unix_time = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let line = serde_json::json!({
        "unix_time": unix_time,
        "command": command,
        "global": globals,
        "config": resolved,
    });
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(format!("cannot open run log {}: {e}", path.display())))?;
    writeln!(f, "{line}").map_err(|e| CliError::io(format!("cannot write run log {}: {e}", path.display())))
}
