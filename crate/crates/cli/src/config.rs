//! `key=value` configuration files. Command-line flags take precedence over
//! values read here, which take precedence over built-in defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Every key a configuration file may set.
pub const KEYS: &[&str] = &[
    "seed",
    "deterministic",
    "threads",
    "iterations",
    "batch_size",
    "learning_rate",
    "augment_rotations",
    "validation_interval",
    "validation_fraction",
    "widths",
    "beta",
    "alpha",
    "cpct",
    "min_tissue_pixels",
    "classes",
    "patches_per_class",
    "noise_sd",
];

#[derive(Debug, PartialEq)]
pub enum ConfigError {
    Read { path: String, reason: String },
    MalformedLine { line: usize, content: String },
    UnknownKey { line: usize, key: String },
    InvalidValue { line: usize, key: String, value: String },
    DuplicateKey { line: usize, key: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Read { path, reason } => write!(f, "--config: cannot read {path}: {reason}"),
            Self::MalformedLine { line, content } => {
                write!(f, "--config: line {line}: expected key=value, got {content:?}")
            }
            Self::UnknownKey { line, key } => write!(f, "--config: line {line}: unknown key {key:?}"),
            Self::InvalidValue { line, key, value } => {
                write!(f, "--config: line {line}: invalid value {value:?} for {key}")
            }
            Self::DuplicateKey { line, key } => write!(f, "--config: line {line}: {key} is set twice"),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Values from a configuration file, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    entries: Vec<(String, String, usize)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::MalformedLine {
                line,
                content: content.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::MalformedLine {
                    line,
                    content: content.to_string(),
                });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if entries.iter().any(|(k, _, _)| k == key) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            entries.push((key.to_string(), value.to_string(), line));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// The typed value of `key`, if the file sets it.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        debug_assert!(KEYS.contains(&key), "unregistered key {key}");
        match self.entries.iter().find(|(k, _, _)| k == key) {
            None => Ok(None),
            Some((k, v, line)) => v.parse().map(Some).map_err(|_| ConfigError::InvalidValue {
                line: *line,
                key: k.clone(),
                value: v.clone(),
            }),
        }
    }

    /// Flag value if given, else file value, else `default`.
    pub fn resolve<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, ConfigError> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }
}

/// Comma-separated list of values, e.g. layer widths `4,8,16,32,64,32`.
#[derive(Clone, Debug, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = T::Err;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map(List)
    }
}
