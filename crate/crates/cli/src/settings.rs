//! `key = value` run settings merged from a config file, `MLMLAB_*`
//! environment variables and `--set` flags (later sources win).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};

pub const ENV_PREFIX: &str = "MLMLAB_";

#[derive(Clone, Debug)]
pub enum Source {
    File(PathBuf, usize),
    Env(String),
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::File(p, line) => write!(f, "{}:{line}", p.display()),
            Source::Env(var) => write!(f, "environment variable {var}"),
            Source::Flag => f.write_str("command line"),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, (String, Source)>,
}

impl Settings {
    /// Merge the three sources, rejecting keys outside `known` (unknown
    /// environment variables are ignored so unrelated ones do no harm).
    pub fn load(file: Option<&Path>, overrides: &[String], known: &[&str]) -> Result<Self> {
        let mut s = Settings::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let Some((k, v)) = line.split_once('=') else {
                    bail!("{}:{}: expected `key = value`, got {line:?}", path.display(), i + 1);
                };
                let k = k.trim();
                if !known.contains(&k) {
                    bail!("{}:{}: unknown setting `{k}` (known: {})", path.display(), i + 1, known.join(", "));
                }
                s.values.insert(k.to_string(), (v.trim().to_string(), Source::File(path.to_path_buf(), i + 1)));
            }
        }
        let mut env: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        for (var, v) in env {
            let key = var[ENV_PREFIX.len()..].to_ascii_lowercase();
            if known.contains(&key.as_str()) {
                s.values.insert(key, (v.trim().to_string(), Source::Env(var)));
            }
        }
        for o in overrides {
            let Some((k, v)) = o.split_once('=') else {
                bail!("--set expects key=value, got {o:?}");
            };
            let k = k.trim();
            if !known.contains(&k) {
                bail!("unknown setting `{k}` in --set (known: {})", known.join(", "));
            }
            s.values.insert(k.to_string(), (v.trim().to_string(), Source::Flag));
        }
        Ok(s)
    }

    /// Set from a dedicated command-line flag when the flag was given.
    pub fn flag(&mut self, key: &str, value: Option<String>) {
        if let Some(v) = value {
            self.values.insert(key.to_string(), (v, Source::Flag));
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some((v, src)) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("setting `{key}` = {v:?} ({src}): {e}")),
        }
    }

    /// Overwrite `slot` when `key` is set.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.get(key)?.ok_or_else(|| anyhow::anyhow!("missing setting `{key}`"))
    }

    /// Wrap a validation failure with the setting it concerns.
    pub fn blame(&self, key: &str, err: impl fmt::Display) -> anyhow::Error {
        match self.values.get(key) {
            Some((v, src)) => anyhow::anyhow!("setting `{key}` = {v:?} ({src}): {err}"),
            None => anyhow::anyhow!("setting `{key}`: {err}"),
        }
    }
}

/// `key = value` manifest written next to every output.
pub fn write_manifest(path: &Path, command: &str, entries: &[(String, String)]) -> Result<()> {
    let mut text = format!("mlmlab_version = {}\ncommand = {command}\n", env!("CARGO_PKG_VERSION"));
    for (k, v) in entries {
        text.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `out.csv` → `out.csv.manifest.txt`
pub fn manifest_beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.txt");
    file.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "# comment\nlr = 0.5\nseed=3 # trailing\n").unwrap();
        let s = Settings::load(Some(&p), &["seed=4".into()], &["lr", "seed"]).unwrap();
        assert_eq!(s.get::<f64>("lr").unwrap(), Some(0.5));
        assert_eq!(s.get::<u64>("seed").unwrap(), Some(4));
    }

    #[test]
    fn errors_name_the_setting() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "lr = fast\nbogus = 1\n").unwrap();
        let e = Settings::load(Some(&p), &[], &["lr"]).unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        std::fs::write(&p, "lr = fast\n").unwrap();
        let s = Settings::load(Some(&p), &[], &["lr"]).unwrap();
        let e = s.get::<f64>("lr").unwrap_err().to_string();
        assert!(e.contains("`lr`") && e.contains("c.txt:1"), "{e}");
    }

    #[test]
    fn manifest_path() {
        assert_eq!(manifest_beside(Path::new("a/b.csv")), Path::new("a/b.csv.manifest.txt"));
    }
}
