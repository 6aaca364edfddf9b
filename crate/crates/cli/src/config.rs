//! Flat key-value run configuration.
//!
//! One `key = value` per line, `#` comments, keys namespaced like
//! `algo.gamma`. Unknown keys are errors (they are almost always typos);
//! duplicate keys take the last value and produce a warning.

use std::fmt;
use std::path::PathBuf;

use tabula::algorithms::TrainConfig;

#[derive(Debug)]
pub enum ConfigError {
    MalformedLine { line: usize, text: String },
    UnknownKey { line: usize, key: String },
    TypeMismatch { line: usize, key: String, expected: &'static str, value: String },
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::MalformedLine { line, text } => {
                write!(f, "line {line}: expected 'key = value', got '{text}'")
            }
            ConfigError::UnknownKey { line, key } => {
                write!(f, "line {line}: unknown key '{key}'")
            }
            ConfigError::TypeMismatch {
                line,
                key,
                expected,
                value,
            } => write!(
                f,
                "line {line}: key '{key}' expects {expected}, got '{value}'"
            ),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct Warning {
    pub line: usize,
    pub message: String,
}

/// Every recognized key, with its target slot in [`TrainConfig`].
pub const KNOWN_KEYS: &[&str] = &[
    "env.name",
    "env.n_envs",
    "algo.gamma",
    "algo.lr",
    "algo.n_steps",
    "algo.entropy_coef",
    "algo.hidden",
    "algo.recurrent",
    "algo.epsilon_start",
    "algo.epsilon_final",
    "algo.epsilon_decay_steps",
    "algo.target_update",
    "algo.buffer_capacity",
    "algo.batch_size",
    "train.total_steps",
    "train.seed",
    "train.processes",
    "train.log",
];

fn parse_usize(line: usize, key: &str, value: &str) -> Result<usize, ConfigError> {
    value.parse().map_err(|_| ConfigError::TypeMismatch {
        line,
        key: key.to_string(),
        expected: "an integer",
        value: value.to_string(),
    })
}

fn parse_u64(line: usize, key: &str, value: &str) -> Result<u64, ConfigError> {
    value.parse().map_err(|_| ConfigError::TypeMismatch {
        line,
        key: key.to_string(),
        expected: "an integer",
        value: value.to_string(),
    })
}

fn parse_f32(line: usize, key: &str, value: &str) -> Result<f32, ConfigError> {
    value.parse().map_err(|_| ConfigError::TypeMismatch {
        line,
        key: key.to_string(),
        expected: "a float",
        value: value.to_string(),
    })
}

fn parse_f64(line: usize, key: &str, value: &str) -> Result<f64, ConfigError> {
    value.parse().map_err(|_| ConfigError::TypeMismatch {
        line,
        key: key.to_string(),
        expected: "a float",
        value: value.to_string(),
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::TypeMismatch {
            line,
            key: key.to_string(),
            expected: "true or false",
            value: value.to_string(),
        }),
    }
}

/// Applies config text on top of `base`. An empty file leaves all defaults.
pub fn parse_config(
    text: &str,
    mut base: TrainConfig,
) -> Result<(TrainConfig, Vec<Warning>), ConfigError> {
    let mut warnings = Vec::new();
    let mut seen: Vec<(String, usize)> = Vec::new();

    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let stripped = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let trimmed = stripped.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(ConfigError::MalformedLine {
                line,
                text: trimmed.to_string(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
        if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
            warnings.push(Warning {
                line,
                message: format!(
                    "key '{key}' already set on line {first}; the later value wins"
                ),
            });
        } else {
            seen.push((key.to_string(), line));
        }

        match key {
            "env.name" => base.env_name = value.to_string(),
            "env.n_envs" => base.n_envs = parse_usize(line, key, value)?,
            "algo.gamma" => base.gamma = parse_f32(line, key, value)?,
            "algo.lr" => base.lr = parse_f32(line, key, value)?,
            "algo.n_steps" => base.n_steps = parse_usize(line, key, value)?,
            "algo.entropy_coef" => base.entropy_coef = parse_f32(line, key, value)?,
            "algo.hidden" => base.hidden = parse_usize(line, key, value)?,
            "algo.recurrent" => base.recurrent = parse_bool(line, key, value)?,
            "algo.epsilon_start" => base.epsilon_start = parse_f64(line, key, value)?,
            "algo.epsilon_final" => base.epsilon_final = parse_f64(line, key, value)?,
            "algo.epsilon_decay_steps" => {
                base.epsilon_decay_steps = parse_usize(line, key, value)?
            }
            "algo.target_update" => base.target_update = parse_usize(line, key, value)?,
            "algo.buffer_capacity" => base.buffer_capacity = parse_usize(line, key, value)?,
            "algo.batch_size" => base.batch_size = parse_usize(line, key, value)?,
            "train.total_steps" => base.total_steps = parse_usize(line, key, value)?,
            "train.seed" => base.seed = parse_u64(line, key, value)?,
            "train.processes" => base.num_processes = parse_usize(line, key, value)?,
            "train.log" => base.log_path = Some(PathBuf::from(value)),
            _ => unreachable!("key membership checked above"),
        }
    }
    Ok((base, warnings))
}

/// Per-algorithm defaults that hold up at desk scale.
pub fn default_config(algo: &str) -> TrainConfig {
    TrainConfig::recommended(algo)
}
