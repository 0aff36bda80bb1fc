//! Layered configuration: built-in profile, then the config file, then flags.

use std::fs;
use std::path::Path;

use measure_attn::{Error, ExperimentConfig};
use serde_json::Value;

/// Overlays `patch` onto `base`, recursing into objects. Arrays and scalars
/// in `patch` replace the base value.
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

/// Effective configuration before subcommand flags are applied.
pub fn resolve(
    path: Option<&Path>,
    reduced: bool,
    seed: Option<u64>,
) -> Result<ExperimentConfig, Error> {
    let base = if reduced {
        ExperimentConfig::reduced()
    } else {
        ExperimentConfig::default()
    };
    let mut value = serde_json::to_value(base)?;
    if let Some(path) = path {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let patch: Value = serde_json::from_str(&text)?;
        if !patch.is_object() {
            return Err(Error::InvalidArgument(format!(
                "{}: config must be a JSON object",
                path.display()
            )));
        }
        merge(&mut value, patch);
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_profile_and_seed_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"n_val": 7, "seed": 3, "train": {"epochs": 2}}"#).unwrap();
        let cfg = resolve(Some(&path), true, None).unwrap();
        assert_eq!(cfg.n_val, 7);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.epochs, 2);
        // Untouched nested fields keep the profile value.
        assert_eq!(cfg.train.lr0, ExperimentConfig::reduced().train.lr0);
        assert_eq!(cfg.n_tokens, 1000);
        assert_eq!(resolve(Some(&path), true, Some(9)).unwrap().seed, 9);
    }

    #[test]
    fn missing_or_malformed_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            resolve(Some(&dir.path().join("nope.json")), false, None),
            Err(Error::Io { .. })
        ));
        let path = dir.path().join("bad.json");
        fs::write(&path, "[1, 2]").unwrap();
        assert!(resolve(Some(&path), false, None).is_err());
    }
}
