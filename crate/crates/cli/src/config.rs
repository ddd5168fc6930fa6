//! Run configuration: JSON file deep-merged over defaults, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use l2tkt::data::{SplitFractions, SynthConfig};
use l2tkt::models::EncoderConfig;
use l2tkt::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::failure::Failure;

/// Where the labeled and auxiliary sets come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Labeled manifest (`path,label,mask_path`).
    pub labeled: Option<PathBuf>,
    /// Auxiliary manifest; every entry needs a mask.
    pub aux: Option<PathBuf>,
}

impl DataConfig {
    /// Manifests written by `synth-data` into `dir`.
    pub fn from_dir(dir: &Path) -> Self {
        Self {
            labeled: Some(dir.join("labeled.csv")),
            aux: Some(dir.join("aux.csv")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub split: SplitFractions,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Baseline student checkpoint stem that initializes the teacher.
    pub baseline_ckpt: Option<PathBuf>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Defaults of `T` overlaid with the JSON object in `path`, if any.
pub fn load_merged<T>(path: Option<&Path>) -> Result<T, Failure>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let mut value = serde_json::to_value(T::default())?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::new("config", format!("{}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(Failure::new(
                "config",
                format!("{}: expected a JSON object", path.display()),
            ));
        }
        merge(&mut value, patch);
    }
    serde_json::from_value(value).map_err(|e| Failure::new("config", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_patch_keeps_sibling_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(
            &path,
            r#"{"train": {"epochs": 3, "pool": {"mode": "dynamic"}}, "seed": 9}"#,
        )
        .unwrap();
        let cfg: RunConfig = load_merged(Some(&path)).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.pool.mode, l2tkt::quizpool::PoolMode::Dynamic);
        assert_eq!(cfg.train.pool.alpha, 0.7);
        assert_eq!(cfg.train.lambda_s, TrainConfig::default().lambda_s);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_shapes_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, "[1, 2]").unwrap();
        assert_eq!(
            load_merged::<RunConfig>(Some(&path)).unwrap_err().kind,
            "config"
        );
        fs::write(&path, r#"{"train": {"epochs": "many"}}"#).unwrap();
        assert_eq!(
            load_merged::<RunConfig>(Some(&path)).unwrap_err().kind,
            "config"
        );
    }
}
