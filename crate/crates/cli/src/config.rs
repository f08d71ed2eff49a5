//! TOML configuration with environment overrides.
//!
//! Any variable `EHRT_<SECTION>__<KEY>=<value>` overrides `section.key` in the
//! loaded file (double underscore separates path segments, matching is
//! case-insensitive). Values are parsed as TOML literals when possible and
//! taken as strings otherwise, so `EHRT_TRAIN__LR=5e-4` and
//! `EHRT_COHORT__SIGNAL_MODE=presence_only` both work.

use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "EHRT_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override {key}: '{segment}' is not a table")]
    NotATable { key: String, segment: String },
}

pub fn load<T: DeserializeOwned>(path: Option<&Path>) -> Result<T, ConfigError> {
    load_with(path, std::env::vars())
}

/// [`load`] with an explicit environment, for tests.
pub fn load_with<T: DeserializeOwned>(
    path: Option<&Path>,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<T, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
            path: p.display().to_string(),
            source,
        })?,
        None => String::new(),
    };
    let mut table: Table = text.parse()?;
    let mut overrides: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    overrides.sort();
    for (key, raw) in overrides {
        apply_override(&mut table, &key, &raw)?;
    }
    Ok(Value::Table(table).try_into()?)
}

fn parse_literal(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let path: Vec<String> = key[ENV_PREFIX.len()..]
        .split("__")
        .map(|s| s.to_ascii_lowercase())
        .collect();
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cur = table;
    for seg in parents {
        let entry = cur
            .entry(seg.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(ConfigError::NotATable {
                    key: key.to_string(),
                    segment: seg.clone(),
                })
            }
        };
    }
    cur.insert(last.clone(), parse_literal(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Deserialize, PartialEq)]
    #[serde(default)]
    struct Inner {
        lr: f64,
        name: String,
    }

    #[derive(Debug, Default, Deserialize, PartialEq)]
    #[serde(default)]
    struct Outer {
        seed: u64,
        train: Inner,
    }

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn overrides_nested_keys_and_types() {
        let cfg: Outer = load_with(
            None,
            env(&[
                ("EHRT_SEED", "9"),
                ("EHRT_TRAIN__LR", "5e-4"),
                ("EHRT_TRAIN__NAME", "presence_only"),
                ("OTHER", "x"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.lr, 5e-4);
        assert_eq!(cfg.train.name, "presence_only");
    }

    #[test]
    fn file_values_yield_to_environment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\n[train]\nlr = 0.1\nname = \"a\"\n").unwrap();
        let cfg: Outer = load_with(Some(&path), env(&[("EHRT_TRAIN__LR", "0.2")])).unwrap();
        assert_eq!(
            cfg,
            Outer {
                seed: 3,
                train: Inner { lr: 0.2, name: "a".into() }
            }
        );
        let err = load_with::<Outer>(Some(&path), env(&[("EHRT_SEED__X", "1")]));
        assert!(matches!(err, Err(ConfigError::NotATable { .. })));
    }
}
