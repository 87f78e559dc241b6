//! Run configuration: defaults, then a `key = value` file with `[run]`,
//! `[model]` and `[train]` sections, then command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use misr_core::data::Band;
use misr_core::model::ModelConfig;
use misr_core::train::TrainConfig;

use crate::CliError;

/// Everything a command needs, merged from all sources.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    /// Share of the training scenes held out for validation when no
    /// separate validation root is given.
    pub val_fraction: f64,
    pub band: Band,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            data: None,
            val_data: None,
            val_fraction: 0.2,
            band: Band::Nir,
            out: PathBuf::from("runs/misr"),
        }
    }
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

fn opt_path(v: &str) -> Option<PathBuf> {
    match v.trim() {
        "" | "none" => None,
        s => Some(PathBuf::from(s)),
    }
}

impl RunConfig {
    fn run_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data", path_text(&self.data)),
            ("val_data", path_text(&self.val_data)),
            ("val_fraction", self.val_fraction.to_string()),
            ("band", self.band.to_string()),
            ("out", self.out.display().to_string()),
        ]
    }

    fn get(&self, section: &str, key: &str) -> Option<String> {
        let pairs = match section {
            "run" => self.run_pairs(),
            "model" => self.model.to_pairs(),
            "train" => self.train.to_pairs(),
            _ => return None,
        };
        pairs.into_iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    }

    /// Sets `section.key`; errors name the offending key.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), CliError> {
        let bad = |msg: String| CliError::Config { key: format!("{section}.{key}"), msg };
        match section {
            "run" => match key {
                "data" => self.data = opt_path(value),
                "val_data" => self.val_data = opt_path(value),
                "val_fraction" => {
                    self.val_fraction = value.trim().parse().map_err(|_| bad(format!("invalid value '{value}'")))?;
                }
                "band" => self.band = value.parse().map_err(|e: misr_core::Error| bad(e.to_string()))?,
                "out" => self.out = PathBuf::from(value.trim()),
                _ => return Err(bad("unknown key".into())),
            },
            "model" => self.model.set(key, value).map_err(|e| bad(e.to_string()))?,
            "train" => self.train.set(key, value).map_err(|e| bad(e.to_string()))?,
            _ => return Err(bad(format!("unknown section '{section}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Config { key: "model".into(), msg: e.to_string() })?;
        self.train.validate().map_err(|e| CliError::Config { key: "train".into(), msg: e.to_string() })?;
        if self.model.frames != self.train.k {
            return Err(CliError::Config {
                key: "model.frames".into(),
                msg: format!("{} differs from train.k = {}", self.model.frames, self.train.k),
            });
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(CliError::Config { key: "run.val_fraction".into(), msg: format!("{} outside [0, 1)", self.val_fraction) });
        }
        Ok(())
    }

    /// Snapshot in the file format; loading it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, pairs) in [("run", self.run_pairs()), ("model", self.model.to_pairs()), ("train", self.train.to_pairs())] {
            let _ = writeln!(s, "[{name}]");
            for (k, v) in pairs {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Parses `[section]` headers and `key = value` lines; `#` starts a comment.
/// Keys before any header belong to `[run]`.
pub fn parse_text(text: &str) -> Result<Vec<(String, String, String)>, CliError> {
    let mut section = "run".to_string();
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config { key: format!("line {}", n + 1), msg: format!("expected key = value, got '{line}'") })?;
        out.push((section.clone(), k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Merges sources in order. A command-line value replacing a file value is
/// logged, so the two never disagree silently.
pub struct Resolver {
    pub cfg: RunConfig,
    from_file: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(file: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        let mut from_file = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            for (section, key, value) in parse_text(&text)? {
                cfg.set(&section, &key, &value)?;
                from_file.insert(format!("{section}.{key}"), value);
            }
        }
        Ok(Self { cfg, from_file })
    }

    /// Applies one command-line override given as `section.key` and a value.
    pub fn apply(&mut self, dotted: &str, value: &str) -> Result<(), CliError> {
        let (section, key) = dotted
            .split_once('.')
            .ok_or_else(|| CliError::Config { key: dotted.into(), msg: "expected section.key".into() })?;
        if let Some(file_value) = self.from_file.get(dotted) {
            let before = self.cfg.get(section, key);
            self.cfg.set(section, key, value)?;
            if before != self.cfg.get(section, key) {
                log::warn!("{dotted}: command line value '{value}' replaces config file value '{file_value}'");
            }
            Ok(())
        } else {
            self.cfg.set(section, key, value)
        }
    }

    pub fn apply_opt(&mut self, dotted: &str, value: Option<impl ToString>) -> Result<(), CliError> {
        match value {
            Some(v) => self.apply(dotted, &v.to_string()),
            None => Ok(()),
        }
    }

    /// `section.key=value` strings from `--set`.
    pub fn apply_assignments(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config { key: s.clone(), msg: "expected section.key=value".into() })?;
            self.apply(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut c = RunConfig::default();
        c.set("train", "shuffle_t", "6").unwrap();
        c.set("run", "data", "/tmp/x").unwrap();
        c.set("model", "frame_bias_mode", "frame-agnostic").unwrap();
        let mut back = RunConfig::default();
        for (s, k, v) in parse_text(&c.to_text()).unwrap() {
            back.set(&s, &k, &v).unwrap();
        }
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::default().set("train", "epoch", "3").unwrap_err();
        assert!(err.to_string().contains("train.epoch"), "{err}");
        let err = parse_text("[model]\nnonsense").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn later_source_wins() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.cfg");
        std::fs::write(&path, "# comment\n[train]\nepochs = 7\nlr = 0.01\n").unwrap();
        let mut r = Resolver::new(Some(&path)).unwrap();
        assert_eq!(r.cfg.train.epochs, 7);
        r.apply("train.epochs", "2").unwrap();
        assert_eq!(r.cfg.train.epochs, 2);
        assert_eq!(r.cfg.train.lr, 0.01);
    }

    #[test]
    fn frame_count_must_match_k() {
        let mut c = RunConfig::default();
        c.set("train", "k", "6").unwrap();
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("model.frames"));
    }
}
