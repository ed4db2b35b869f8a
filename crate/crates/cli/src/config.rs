//! Run configuration: defaults, then a JSON file, then `key.path=value`
//! overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use histoseg::network::NetworkSpec;
use histoseg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RESOLVED_CONFIG: &str = "resolved-config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory with `images/` and `masks/`.
    pub dir: Option<PathBuf>,
    /// Split fractions used when the dataset has no `manifest.json`.
    pub fractions: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            fractions: vec![0.7, 0.2, 0.1],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub network: NetworkSpec,
    pub data: DataConfig,
}

impl RunConfig {
    /// Resolves defaults, the optional file and the overrides in that order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            merge(&mut value, patch);
        }
        for (key, raw) in overrides {
            set_dotted(&mut value, key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
        cfg.train.validate().context("invalid train configuration")?;
        cfg.network.validate().context("invalid network configuration")?;
        Ok(cfg)
    }

    pub fn load_resolved(path: &Path) -> Result<Self> {
        Self::resolve(Some(path), &[])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets `a.b.c` to `raw`, parsed as JSON when possible and as a string
/// otherwise. Every segment must name an existing field.
pub fn set_dotted(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut node = root;
    for seg in key.split('.') {
        node = match node {
            Value::Object(map) => match map.get_mut(seg) {
                Some(v) => v,
                None => bail!("unknown configuration key `{key}`"),
            },
            _ => bail!("unknown configuration key `{key}`"),
        };
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Parses `KEY=VALUE`.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected KEY=VALUE, got `{s}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn defaults_round_trip() {
        assert_eq!(RunConfig::resolve(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_apply_after_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"train": {"epochs": 3, "loss": {"gamma": 1.5}}, "network": {"input_height": 64}}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&path), &[ov("train.epochs", "5"), ov("data.dir", "some/where")]).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.loss.gamma, 1.5);
        assert_eq!(cfg.network.input_height, 64);
        assert_eq!(cfg.network.input_width, 256);
        assert_eq!(cfg.data.dir.as_deref(), Some(Path::new("some/where")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::resolve(None, &[ov("train.epoch", "5")]).is_err());
        assert!(RunConfig::resolve(None, &[ov("train.epochs.x", "5")]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"network": {"widht_multiplier": 0.5}}"#).unwrap();
        let err = RunConfig::resolve(Some(&path), &[]).unwrap_err();
        assert!(format!("{err:#}").contains("widht_multiplier"), "{err:#}");
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::resolve(None, &[ov("train.epochs", "0")]).is_err());
        assert!(RunConfig::resolve(None, &[ov("network.input_height", "65")]).is_err());
        assert!(RunConfig::resolve(None, &[ov("train.learning_rate", "fast")]).is_err());
    }

    #[test]
    fn override_syntax() {
        assert_eq!(parse_override("a.b = 1").unwrap(), ov("a.b", "1"));
        assert!(parse_override("a.b").is_err());
        assert!(parse_override("=1").is_err());
    }
}
