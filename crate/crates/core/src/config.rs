//! Training configuration resolution. Layers apply in increasing priority:
//! built-in defaults, then a named preset, then a flat `key = value` file,
//! then command-line flags.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pooling::PoolingKind;
use crate::trainer::{Preset, TrainConfig};

/// Keys accepted in config files and as flag overrides.
pub const KEYS: &[&str] = &[
    "preset",
    "warmup_iters",
    "joint_iters",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "mi_weight",
    "pooling",
    "pooling_n",
    "seed",
    "eval_every",
    "deterministic",
    "augment",
    "freeze_backbone_iters",
    "depth",
    "base_width",
    "disc_hidden_width",
    "disc_hidden_layers",
];

/// Ordered `key = value` assignments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues(pub Vec<(String, String)>);

impl KeyValues {
    /// Parses UTF-8 text of `key = value` lines. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", i + 1)))?;
            let key = k.trim();
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", i + 1)));
            }
            out.push((key.to_string(), v.trim().to_string()));
        }
        Ok(KeyValues(out))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Applies every assignment except `preset` on top of `config`.
    pub fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        for (k, v) in &self.0 {
            apply_one(config, k, v)?;
        }
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

fn apply_one(c: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "preset" => {}
        "warmup_iters" => c.warmup_iters = parse(key, v)?,
        "joint_iters" => c.joint_iters = parse(key, v)?,
        "batch_size" => c.batch_size = parse(key, v)?,
        "learning_rate" => c.learning_rate = parse(key, v)?,
        "beta1" => c.beta1 = parse(key, v)?,
        "beta2" => c.beta2 = parse(key, v)?,
        "mi_weight" => c.mi_weight = parse(key, v)?,
        "pooling" => c.pooling.kind = v.parse::<PoolingKind>()?,
        "pooling_n" => c.pooling.n_pixels = parse(key, v)?,
        "seed" => c.seed = parse(key, v)?,
        "eval_every" => c.eval_every = parse(key, v)?,
        "deterministic" => c.deterministic = parse_bool(key, v)?,
        "augment" => c.augment = parse_bool(key, v)?,
        "freeze_backbone_iters" => c.freeze_backbone_iters = parse(key, v)?,
        "depth" => c.model.depth = parse(key, v)?,
        "base_width" => c.model.base_width = parse(key, v)?,
        "disc_hidden_width" => c.model.disc_hidden_width = parse(key, v)?,
        "disc_hidden_layers" => c.model.disc_hidden_layers = parse(key, v)?,
        other => return Err(Error::Config(format!("unknown key '{other}'"))),
    }
    Ok(())
}

/// Resolves the final configuration. A preset named by a flag wins over one
/// named in the file.
pub fn resolve(file: Option<&KeyValues>, flags: &KeyValues) -> Result<TrainConfig> {
    let preset = flags.get("preset").or_else(|| file.and_then(|f| f.get("preset")));
    let mut config = match preset {
        Some(name) => name.parse::<Preset>()?.config(),
        None => TrainConfig::default(),
    };
    if let Some(f) = file {
        f.apply(&mut config)?;
    }
    flags.apply(&mut config)?;
    config.validate()?;
    Ok(config)
}
