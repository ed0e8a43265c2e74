//! Optional `key = value` settings file. Command-line flags take precedence
//! over file entries; keys nobody consumed are reported as usage errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Default)]
pub struct Settings {
    path: Option<PathBuf>,
    entries: BTreeMap<String, (usize, String)>,
    /// Effective values that came from a flag or the file, for the manifest.
    applied: BTreeMap<String, String>,
}

pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, (usize, String)>, (usize, String)> {
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err((i + 1, format!("expected key = value, found {line:?}")));
        };
        let key = key.trim().replace('-', "_");
        if entries.insert(key.clone(), (i + 1, value.trim().to_string())).is_some() {
            return Err((i + 1, format!("key {key:?} given twice")));
        }
    }
    Ok(entries)
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        let entries = parse_key_values(&text).map_err(|(line, message)| {
            CliError::Input(format!("{}:{line}: {message}", path.display()))
        })?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            entries,
            applied: BTreeMap::new(),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// The flag value if given, otherwise the parsed file entry for `key`.
    pub fn value<T>(&mut self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr + ToString,
    {
        let from_file = self.entries.remove(key);
        let value = match (flag, from_file) {
            (Some(v), _) => Some(v),
            (None, Some((line, raw))) => Some(raw.parse::<T>().map_err(|_| {
                CliError::Input(format!(
                    "{}:{line}: cannot parse {raw:?} for {key}",
                    self.path.as_deref().unwrap_or(Path::new("settings")).display()
                ))
            })?),
            (None, None) => None,
        };
        if let Some(v) = &value {
            self.applied.insert(key.to_string(), v.to_string());
        }
        Ok(value)
    }

    /// Like [`Settings::value`] but errors when neither source provides it.
    pub fn required<T>(&mut self, flag: Option<T>, key: &str) -> Result<T, CliError>
    where
        T: FromStr + ToString,
    {
        self.value(flag, key)?.ok_or_else(|| {
            CliError::Usage(format!("--{} is required", key.replace('_', "-")))
        })
    }

    /// Removes and returns every remaining file entry, for keys that are
    /// interpreted by a component configuration rather than a flag.
    pub fn drain(&mut self) -> Vec<(String, usize, String)> {
        std::mem::take(&mut self.entries)
            .into_iter()
            .map(|(k, (line, v))| (k, line, v))
            .collect()
    }

    pub fn record(&mut self, key: &str, value: impl ToString) {
        self.applied.insert(key.to_string(), value.to_string());
    }

    pub fn applied(&self) -> &BTreeMap<String, String> {
        &self.applied
    }

    /// Fails on file keys that no flag consumed.
    pub fn finish(&self) -> Result<(), CliError> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let unknown: Vec<String> = self
            .entries
            .iter()
            .map(|(k, (line, _))| format!("{k} (line {line})"))
            .collect();
        Err(CliError::Usage(format!(
            "unknown settings in {}: {}",
            self.path.as_deref().unwrap_or(Path::new("settings")).display(),
            unknown.join(", ")
        )))
    }
}
