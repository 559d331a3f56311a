//! Run settings: a JSON file of flat keys, overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use scratchcnn::{Error, Result};
use serde_json::Value;

pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "momentum",
    "weight_decay",
    "seed",
    "arch",
    "dataset.images",
    "dataset.targets",
    "eval.mode",
    "eval.k",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
    pub arch: Option<String>,
    pub images: Option<PathBuf>,
    pub targets: Option<PathBuf>,
    pub eval_mode: Option<EvalMode>,
    pub eval_k: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Holdout,
    KFold,
}

/// Nested objects are accepted and read as dotted keys.
fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn as_count(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|n| n as usize)
        .ok_or_else(|| Error::Config(format!("{key}: expected a non-negative integer, got {v}")))
}

fn as_float(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("{key}: expected a number, got {v}")))
}

fn as_text<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("{key}: expected a string, got {v}")))
}

pub fn parse_eval_mode(text: &str) -> Result<EvalMode> {
    match text {
        "holdout" => Ok(EvalMode::Holdout),
        "kfold" | "k-fold" => Ok(EvalMode::KFold),
        other => Err(Error::Config(format!(
            "eval.mode must be holdout or kfold, got {other:?}"
        ))),
    }
}

impl Settings {
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !root.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        let mut flat = BTreeMap::new();
        flatten("", &root, &mut flat);
        let mut s = Settings::default();
        for (key, v) in &flat {
            match key.as_str() {
                "epochs" => s.epochs = Some(as_count(key, v)?),
                "batch_size" => s.batch_size = Some(as_count(key, v)?),
                "lr" => s.lr = Some(as_float(key, v)?),
                "momentum" => s.momentum = Some(as_float(key, v)?),
                "weight_decay" => s.weight_decay = Some(as_float(key, v)?),
                "seed" => {
                    s.seed = Some(v.as_u64().ok_or_else(|| {
                        Error::Config(format!("seed: expected a non-negative integer, got {v}"))
                    })?)
                }
                "arch" => s.arch = Some(as_text(key, v)?.to_string()),
                "dataset.images" => s.images = Some(as_text(key, v)?.into()),
                "dataset.targets" => s.targets = Some(as_text(key, v)?.into()),
                "eval.mode" => s.eval_mode = Some(parse_eval_mode(as_text(key, v)?)?),
                "eval.k" => s.eval_k = Some(as_count(key, v)?),
                other => {
                    return Err(Error::Config(format!(
                        "unknown config key {other:?}; known keys: {}",
                        KEYS.join(", ")
                    )))
                }
            }
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| e.context(path.display()))
    }

    /// Values set in `other` win.
    pub fn overridden_by(self, other: Settings) -> Settings {
        Settings {
            epochs: other.epochs.or(self.epochs),
            batch_size: other.batch_size.or(self.batch_size),
            lr: other.lr.or(self.lr),
            momentum: other.momentum.or(self.momentum),
            weight_decay: other.weight_decay.or(self.weight_decay),
            seed: other.seed.or(self.seed),
            arch: other.arch.or(self.arch),
            images: other.images.or(self.images),
            targets: other.targets.or(self.targets),
            eval_mode: other.eval_mode.or(self.eval_mode),
            eval_k: other.eval_k.or(self.eval_k),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_nested_keys() {
        let a = Settings::from_json(r#"{"epochs": 3, "lr": 0.1, "dataset.images": "x.idx", "eval": {"mode": "kfold", "k": 4}}"#).unwrap();
        assert_eq!(a.epochs, Some(3));
        assert_eq!(a.lr, Some(0.1));
        assert_eq!(a.images, Some(PathBuf::from("x.idx")));
        assert_eq!(a.eval_mode, Some(EvalMode::KFold));
        assert_eq!(a.eval_k, Some(4));
    }

    #[test]
    fn unknown_and_mistyped_keys_are_config_errors() {
        assert!(matches!(
            Settings::from_json(r#"{"learning_rate": 0.1}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Settings::from_json(r#"{"epochs": "ten"}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Settings::from_json(r#"{"epochs": -1}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(Settings::from_json("[1]"), Err(Error::Config(_))));
        assert!(matches!(Settings::from_json("{"), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_file() {
        let file = Settings {
            epochs: Some(5),
            lr: Some(0.1),
            ..Settings::default()
        };
        let flags = Settings {
            epochs: Some(7),
            ..Settings::default()
        };
        let s = file.overridden_by(flags);
        assert_eq!((s.epochs, s.lr), (Some(7), Some(0.1)));
    }
}
