//! Config-file layer. Flags and `KGNED_*` environment variables are
//! resolved by clap; anything they leave unset is looked up here, then
//! falls back to the built-in default.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use kgned::{Error, Result};

/// Keys a config file may set. Each one mirrors a long flag with dashes
/// replaced by underscores.
pub const KNOWN_KEYS: &[&str] = &[
    "endpoint", "hops", "cap", "parallelism", "lang", "ctx_hops", "max_triples", "max_seq_len", "seed", "epochs",
    "lr", "batch_size", "warmup", "d_model", "n_layers", "n_heads", "ffn_dim", "dropout", "protocol", "match",
];

#[derive(Debug, Clone, Default)]
pub struct FileLayer {
    values: BTreeMap<String, String>,
}

impl FileLayer {
    /// Reads `key=value` lines (`#` starts a comment) or, when the file
    /// starts with `{`, a flat JSON object.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading config {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        if text.trim_start().starts_with('{') {
            let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
            for (k, v) in obj {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                values.insert(k, v);
            }
        } else {
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1))
                })?;
                values.insert(k.trim().to_owned(), v.trim().to_owned());
            }
        }
        for k in values.keys() {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                log::warn!("config key {k:?} is not recognized");
            }
        }
        Ok(Self { values })
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("config key {key}={v:?}: {e}"))))
            .transpose()
    }

    /// The flag/env value if given, else the file value, else `default`.
    pub fn pick<T>(&self, given: Option<T>, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match given {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    /// Like [`FileLayer::pick`] without a default.
    pub fn pick_opt<T>(&self, given: Option<T>, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: std::fmt::Display,
    {
        match given {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(text: &str) -> FileLayer {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c");
        fs::write(&p, text).unwrap();
        FileLayer::load(&p).unwrap()
    }

    #[test]
    fn key_value_and_json_forms_agree() {
        let a = layer("seed = 3\n# comment\nlr=0.01 # trailing\n");
        let b = layer(r#"{"seed": 3, "lr": "0.01"}"#);
        for l in [&a, &b] {
            assert_eq!(l.get::<u64>("seed").unwrap(), Some(3));
            assert_eq!(l.get::<f64>("lr").unwrap(), Some(0.01));
        }
    }

    #[test]
    fn precedence() {
        let l = layer("seed=3\n");
        assert_eq!(l.pick(Some(9u64), "seed", 0).unwrap(), 9);
        assert_eq!(l.pick(None, "seed", 0u64).unwrap(), 3);
        assert_eq!(l.pick(None, "epochs", 20usize).unwrap(), 20);
        let bad = layer("seed=x\n");
        assert!(bad.pick(None, "seed", 0u64).is_err());
    }
}
