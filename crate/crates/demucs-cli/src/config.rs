//! Flat key=value configuration files. Flags mirror keys 1:1 and override
//! file values; the resolved configuration is echoed into output artifacts.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};

/// Parsed config file (possibly empty when no file was given).
#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected key=value, got {line:?}", path.display(), lineno + 1);
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig { values })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| anyhow::anyhow!("config key {key} has unparsable value {raw:?}")),
        }
    }
}

/// Flag beats file beats default.
pub fn resolve<T: FromStr + Clone>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(v) = file.get::<T>(key)? {
        return Ok(v);
    }
    Ok(default)
}

/// Render the effective configuration as the same key=value format.
pub fn echo(pairs: &[(&str, String)]) -> String {
    let mut out = String::from("# effective configuration\n");
    for (k, v) in pairs {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}
