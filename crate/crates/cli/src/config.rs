//! Key=value run configuration: optional config file, flag overrides, and
//! the resolved-config record written next to every run's outputs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

pub const VERSION_STRING: &str = concat!("freqd ", env!("CARGO_PKG_VERSION"));

/// Values from a `key=value` file plus the log of resolved settings.
/// Flags win over file values; file values win over defaults. Keys that no
/// command option consumes are rejected.
pub struct RunConfig {
    file_values: BTreeMap<String, String>,
    resolved: Vec<(String, String)>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut file_values = BTreeMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {path:?}: {e}")))?;
            for (idx, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("config line {} is not key=value", idx + 1))
                })?;
                file_values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(RunConfig {
            file_values,
            resolved: Vec::new(),
        })
    }

    /// Flag > file > default. Records the winning value.
    pub fn resolve<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + Display,
        T::Err: Display,
    {
        let from_file = self.file_values.remove(key);
        let value = match (flag, from_file) {
            (Some(v), _) => v,
            (None, Some(raw)) => raw.parse::<T>().map_err(|e| {
                CliError::Usage(format!("config key `{key}`: cannot parse `{raw}`: {e}"))
            })?,
            (None, None) => default,
        };
        self.resolved.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    /// Adds a non-overridable entry to the resolved record.
    pub fn record(&mut self, key: &str, value: impl Display) {
        self.resolved.push((key.to_string(), value.to_string()));
    }

    /// Rejects config keys that no option consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        if self.file_values.is_empty() {
            return Ok(());
        }
        let unknown: Vec<&str> = self.file_values.keys().map(String::as_str).collect();
        Err(CliError::Usage(format!(
            "unknown config keys: {}",
            unknown.join(", ")
        )))
    }

    /// Writes `config.txt` into the output directory.
    pub fn write(&self, dir: &Path, command: &str) -> Result<(), CliError> {
        let mut out = format!("version={VERSION_STRING}\ncommand={command}\n");
        for (key, value) in &self.resolved {
            out.push_str(&format!("{key}={value}\n"));
        }
        fs::create_dir_all(dir).map_err(|e| CliError::Run(e.into()))?;
        fs::write(dir.join("config.txt"), out).map_err(|e| CliError::Run(e.into()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        fs::write(&path, "lr=0.5\n# comment\nbeta=0.2\n").unwrap();
        let mut cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.resolve("lr", Some(0.9), 0.1).unwrap(), 0.9);
        assert_eq!(cfg.resolve("beta", None::<f64>, 0.1).unwrap(), 0.2);
        assert_eq!(cfg.resolve("dim", None::<usize>, 8).unwrap(), 8);
        cfg.finish().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        fs::write(&path, "nonsense=1\n").unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert!(matches!(cfg.finish(), Err(CliError::Usage(_))));
    }

    #[test]
    fn config_txt_is_deterministic() {
        let mut cfg = RunConfig::load(None).unwrap();
        cfg.resolve("seed", Some(7u64), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        cfg.write(dir.path(), "demo").unwrap();
        let first = fs::read(dir.path().join("config.txt")).unwrap();
        cfg.write(dir.path(), "demo").unwrap();
        let second = fs::read(dir.path().join("config.txt")).unwrap();
        assert_eq!(first, second);
        let text = String::from_utf8(first).unwrap();
        assert!(text.contains("version=freqd "));
        assert!(text.contains("seed=7"));
    }
}
