//! Flag/config-file merging. Flags win; the resolved values are recorded.

use std::path::Path;

use restitch_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "RESTITCH_SEED";

#[derive(Debug, Default)]
pub struct Options {
    file: Map<String, Value>,
    resolved: Map<String, Value>,
}

fn normalize(key: &str) -> String {
    key.replace('_', "-")
}

impl Options {
    /// Loads a flat JSON object. Keys may use `_` or `-`.
    pub fn load(path: Option<&Path>) -> Result<Options> {
        let Some(path) = path else {
            return Ok(Options::default());
        };
        let v: Value = restitch_core::io::read_json(path)?;
        let Value::Object(obj) = v else {
            return Err(Error::Config(format!(
                "config file {} must hold a JSON object",
                path.display()
            )));
        };
        let mut file = Map::new();
        for (k, v) in obj {
            file.insert(normalize(&k), v);
        }
        Ok(Options {
            file,
            resolved: Map::new(),
        })
    }

    /// The flag value if set, else the config file's, else `None`.
    pub fn get<T: Serialize + DeserializeOwned>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(Value::Null) | None => None,
                Some(raw) => Some(
                    serde_json::from_value(raw.clone())
                        .map_err(|e| Error::Config(format!("config key {key:?}: {e}")))?,
                ),
            },
        };
        if let Some(v) = &v {
            self.resolved.insert(
                key.to_string(),
                serde_json::to_value(v).expect("serializable option"),
            );
        }
        Ok(v)
    }

    pub fn get_or<T: Serialize + DeserializeOwned>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> Result<T> {
        match self.get(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.insert(
                    key.to_string(),
                    serde_json::to_value(&default).expect("serializable option"),
                );
                Ok(default)
            }
        }
    }

    pub fn require<T: Serialize + DeserializeOwned>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> Result<T> {
        self.get(key, flag)?
            .ok_or_else(|| Error::Config(format!("--{key} is required (flag or config key)")))
    }

    /// Seed precedence: flag, config file, `RESTITCH_SEED`, then 0.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = self.get::<u64>("seed", flag)? {
            return Ok(s);
        }
        let s = match std::env::var(SEED_ENV) {
            Ok(raw) => raw.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer"))
            })?,
            Err(_) => 0,
        };
        self.resolved.insert("seed".into(), Value::from(s));
        Ok(s)
    }

    pub fn resolved(&self) -> Value {
        Value::Object(self.resolved.clone())
    }
}
