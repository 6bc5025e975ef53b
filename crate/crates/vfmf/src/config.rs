//! Experiment configuration: a line-oriented `key = value` text format with
//! `#` comments, dotted key groups, typed defaults, and strict unknown-key
//! rejection. The fully resolved config is echoed into every output
//! directory and into checkpoint metadata.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: expected `key = value`, got '{text}'")]
    Malformed { line: usize, text: String },
    #[error("config line {line}: key '{key}' expects {expected}, got '{value}'")]
    BadType { line: usize, key: String, expected: &'static str, value: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(i64),
    Real(f64),
    Bool(bool),
    Str(String),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Real(v) => write!(f, "{v}"),
            Value::Bool(v) => write!(f, "{v}"),
            Value::Str(v) => write!(f, "{v}"),
        }
    }
}

/// Every known key with its default. Grouped by dotted prefixes.
fn defaults() -> Vec<(&'static str, Value)> {
    use Value::*;
    vec![
        ("global_seed", Int(0)),
        ("workers", Int(0)), // 0 = library default; 1 = forced sequential
        // synthetic world
        ("world.num_scenes", Int(64)),
        ("world.frames", Int(16)),
        ("world.frame_size", Int(64)),
        ("world.patch", Int(8)),
        ("world.min_objects", Int(2)),
        ("world.max_objects", Int(6)),
        ("world.branches", Int(64)),
        ("world.train_frac", Real(0.8)),
        ("world.val_frac", Real(0.1)),
        ("world.test_frac", Real(0.1)),
        // frozen feature encoder
        ("encoder.width", Int(64)),
        ("encoder.layers", Int(4)),
        // beta-VAE over features
        ("vae.latent_channels", Int(16)),
        ("vae.hidden", Int(256)),
        ("vae.blocks", Int(4)),
        ("vae.beta", Real(0.01)),
        ("vae.lr", Real(1e-3)),
        ("vae.weight_decay", Real(1e-4)),
        ("vae.epochs", Int(40)),
        ("vae.batch_frames", Int(32)),
        ("vae.warmup_frac", Real(0.1)),
        ("vae.neighborhood3x3", Bool(false)),
        // PCA baseline
        ("pca.rank", Int(16)),
        ("pca.subsample_frac", Real(0.1)),
        ("pca.max_vectors", Int(1_000_000)),
        // rectified-flow forecaster
        ("flow.space", Str("vae".into())),
        ("flow.depth", Int(4)),
        ("flow.width", Int(128)),
        ("flow.heads", Int(4)),
        ("flow.max_context", Int(4)),
        ("flow.time_freqs", Int(256)),
        ("flow.qk_norm", Bool(true)),
        ("flow.steps", Int(3000)),
        ("flow.batch", Int(8)),
        ("flow.lr", Real(3e-4)),
        ("flow.weight_decay", Real(1e-4)),
        ("flow.warmup_frac", Real(0.05)),
        ("flow.nfe", Int(10)),
        ("flow.time_sampling", Str("uniform".into())),
        // deterministic regression baseline
        ("regression.space", Str("direct".into())),
        ("regression.depth", Int(4)),
        ("regression.width", Int(128)),
        ("regression.heads", Int(4)),
        ("regression.max_context", Int(4)),
        ("regression.steps", Int(3000)),
        ("regression.batch", Int(8)),
        ("regression.lr", Real(3e-4)),
        ("regression.weight_decay", Real(1e-4)),
        ("regression.warmup_frac", Real(0.05)),
        // probing decoders
        ("probe.task", Str("segmentation".into())),
        ("probe.space", Str("direct".into())),
        ("probe.width", Int(128)),
        ("probe.blocks", Int(2)),
        ("probe.depth_bins", Int(64)),
        ("probe.epochs", Int(20)),
        ("probe.batch_frames", Int(16)),
        ("probe.lr", Real(1e-3)),
        ("probe.weight_decay", Real(0.0)),
        // evaluation protocol
        ("eval.method", Str("flow".into())),
        ("eval.space", Str("vae".into())),
        ("eval.scenes", Int(32)),
        ("eval.k", Int(16)),
        ("eval.k_context1", Int(64)),
        ("eval.contexts", Str("1,2,3,4".into())),
        // spectral analysis
        ("spectral.source", Str("vae-latents".into())),
        ("spectral.samples", Int(256)),
    ]
}

#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, Value>,
}

impl Default for Config {
    fn default() -> Self {
        Self { values: defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Config::default();
        config.apply_text(&text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::Malformed { line, text: stripped.to_string() });
            };
            self.set_at_line(key.trim(), value.trim(), line)?;
        }
        Ok(())
    }

    /// Applies one `key=value` override (the CLI `--set` form).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at_line(key, value, 0)
    }

    fn set_at_line(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let current = self
            .values
            .get(key)
            .ok_or_else(|| ConfigError::UnknownKey { line, key: key.to_string() })?;
        let parsed = match current {
            Value::Int(_) => value
                .parse::<i64>()
                .map(Value::Int)
                .map_err(|_| bad_type(line, key, "an integer", value))?,
            Value::Real(_) => value
                .parse::<f64>()
                .map(Value::Real)
                .map_err(|_| bad_type(line, key, "a real number", value))?,
            Value::Bool(_) => match value {
                "true" => Value::Bool(true),
                "false" => Value::Bool(false),
                _ => return Err(bad_type(line, key, "true or false", value)),
            },
            Value::Str(_) => Value::Str(value.to_string()),
        };
        self.values.insert(key.to_string(), parsed);
        Ok(())
    }

    pub fn int(&self, key: &str) -> i64 {
        match &self.values[key] {
            Value::Int(v) => *v,
            other => panic!("key {key} is not an integer: {other:?}"),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        self.int(key) as usize
    }

    pub fn real(&self, key: &str) -> f64 {
        match &self.values[key] {
            Value::Real(v) => *v,
            Value::Int(v) => *v as f64,
            other => panic!("key {key} is not a real: {other:?}"),
        }
    }

    pub fn boolean(&self, key: &str) -> bool {
        match &self.values[key] {
            Value::Bool(v) => *v,
            other => panic!("key {key} is not a bool: {other:?}"),
        }
    }

    pub fn string(&self, key: &str) -> String {
        self.values[key].to_string()
    }

    pub fn seed(&self) -> u64 {
        self.int("global_seed") as u64
    }

    pub fn workers(&self) -> usize {
        self.usize("workers")
    }

    /// The fully resolved config as `key = value` lines, sorted by key.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn bad_type(line: usize, key: &str, expected: &'static str, value: &str) -> ConfigError {
    ConfigError::BadType { line, key: key.to_string(), expected, value: value.to_string() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_echo() {
        let config = Config::default();
        let echo = config.resolved();
        let mut config2 = Config::default();
        config2.apply_text(&echo).unwrap();
        assert_eq!(config2.resolved(), echo);
    }

    #[test]
    fn unknown_key_reports_line() {
        let mut config = Config::default();
        let err = config.apply_text("vae.beta = 0.1\nworld.nope = 3\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("world.nope"), "{msg}");
    }

    #[test]
    fn comments_and_types() {
        let mut config = Config::default();
        config
            .apply_text("# comment\nvae.beta = 0.1 # trailing\nflow.qk_norm = false\n")
            .unwrap();
        assert_eq!(config.real("vae.beta"), 0.1);
        assert!(!config.boolean("flow.qk_norm"));
        assert!(config.apply_text("vae.epochs = notanint\n").is_err());
    }
}
