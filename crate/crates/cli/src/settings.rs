//! Flat `key = value` settings with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {raw:?}", n + 1))?;
            let k = k.trim();
            if k.is_empty() {
                bail!("line {}: empty key", n + 1);
            }
            s.set(k, v.trim());
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.values.insert(key.to_string(), value.to_string());
    }

    /// Applies `key=value` overrides.
    pub fn apply(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override {o:?} is not key=value"))?;
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<String> {
        self.get_str(key)
            .map(str::to_string)
            .ok_or_else(|| anyhow!("missing required setting `{key}`"))
    }

    pub fn get<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.get_str(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| anyhow!("setting `{key}` = {v:?}: {e}")),
        }
    }

    /// Rejects keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .map(String::as_str)
            .filter(|k| !known.contains(k))
            .collect();
        if !unknown.is_empty() {
            bail!("unknown setting(s): {}", unknown.join(", "));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of [`Settings::to_text`].
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn without(&self, key: &str) -> Settings {
        let mut s = self.clone();
        s.values.remove(key);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let mut s = Settings::parse("# header\nepochs = 5 # inline\n\nseed=3\n").unwrap();
        assert_eq!(s.get::<usize>("epochs", 1).unwrap(), 5);
        s.apply(&["epochs=7".into()]).unwrap();
        assert_eq!(s.get::<usize>("epochs", 1).unwrap(), 7);
        assert_eq!(s.get::<u64>("missing", 9).unwrap(), 9);
        assert!(s.get::<usize>("seed", 0).is_ok());
        assert!(Settings::parse("no equals here").is_err());
        assert!(s.apply(&["broken".into()]).is_err());
        s.set("epochs", "x");
        assert!(s.get::<usize>("epochs", 1).is_err());
    }

    #[test]
    fn echo_round_trips_and_hash_is_stable() {
        let s = Settings::parse("b = 2\na = 1\n").unwrap();
        assert_eq!(s.to_text(), "a = 1\nb = 2\n");
        assert_eq!(Settings::parse(&s.to_text()).unwrap(), s);
        assert_eq!(s.digest(), Settings::parse("a=1\nb=2").unwrap().digest());
        assert!(s.check_known(&["a"]).is_err());
        assert!(s.check_known(&["a", "b"]).is_ok());
    }
}
