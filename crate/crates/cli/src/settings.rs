//! Resolved run configuration: config file first, then flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bcos_diffusion::{Error, Result};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "BCOSDIFF_OUT";

pub struct Settings {
    command: String,
    raw: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

/// Parse `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    pub fn new(command: &str, config: Option<&Path>, flags: Vec<(&str, Option<String>)>) -> Result<Self> {
        let mut raw = match config {
            Some(p) => parse_config(
                &fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            )?,
            None => BTreeMap::new(),
        };
        if let Some(p) = config {
            raw.remove("config");
            raw.insert("config".into(), p.display().to_string());
        }
        for (k, v) in flags {
            if let Some(v) = v {
                raw.insert(k.to_string(), v);
            }
        }
        Ok(Settings {
            command: command.to_string(),
            raw,
            resolved: BTreeMap::new(),
        })
    }

    /// Value for `key`, falling back to `default`; recorded for the manifest.
    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T> {
        match self.get_opt(key)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.insert(key.to_string(), default.to_string());
                Ok(default)
            }
        }
    }

    pub fn get_opt<T: FromStr + Display>(&mut self, key: &str) -> Result<Option<T>> {
        let Some(s) = self.raw.get(key) else {
            return Ok(None);
        };
        let v: T = s
            .parse()
            .map_err(|_| Error::Config(format!("invalid value '{s}' for {key}")))?;
        self.resolved.insert(key.to_string(), v.to_string());
        Ok(Some(v))
    }

    pub fn require(&mut self, key: &str) -> Result<String> {
        self.get_opt::<String>(key)?
            .ok_or_else(|| Error::Config(format!("missing required setting '{key}'")))
    }

    pub fn flag(&mut self, key: &str) -> Result<bool> {
        self.get(key, false)
    }

    /// Output directory: setting, then the environment variable, then `out`.
    pub fn out_dir(&mut self) -> Result<PathBuf> {
        let default = std::env::var(OUT_ENV).unwrap_or_else(|_| "out".into());
        let dir = PathBuf::from(self.get("out", default)?);
        fs::create_dir_all(&dir)
            .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(dir)
    }

    /// Settings that were supplied but never read.
    pub fn unused(&self) -> Vec<&str> {
        self.raw
            .keys()
            .filter(|k| k.as_str() != "config" && !self.resolved.contains_key(*k))
            .map(String::as_str)
            .collect()
    }

    pub fn manifest(&self) -> String {
        let mut out = format!("command = {}\n", self.command);
        if let Some(c) = self.raw.get("config") {
            out.push_str(&format!("config = {c}\n"));
        }
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write_manifest(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("manifest.txt"), self.manifest())?;
        Ok(())
    }
}
