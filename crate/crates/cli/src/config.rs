//! `key = value` run files.
//!
//! Keys are the `RunConfig` field names (backbone fields under `model.`) plus
//! the run-level keys of [`CliConfig`]. Values are parsed against the type of
//! the field they replace, so every field is reachable without a hand-kept
//! table and unknown keys fail loudly.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{Map, Number, Value};
use siavc_core::vcam::default_promotion_tau;
use siavc_core::RunConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub run: RunConfig,
    pub manifest: Option<PathBuf>,
    pub synthetic: bool,
    /// Clips per class and split of the generated dataset.
    pub per_class: usize,
    /// Labeled budget as a count; wins over `labels_frac` when both are set.
    pub labels: Option<usize>,
    pub labels_frac: f64,
    pub out_dir: PathBuf,
    pub checkpoint_interval: u64,
    /// Keys assigned so far, so class-dependent defaults can step aside.
    explicit: BTreeSet<String>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            run: RunConfig::default(),
            manifest: None,
            synthetic: false,
            per_class: 20,
            labels: None,
            labels_frac: 0.1,
            out_dir: PathBuf::from("runs"),
            checkpoint_interval: 500,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("expected a boolean, got `{v}`"),
    }
}

/// Parses `text` into a value shaped like `like`.
fn parse_like(like: &Value, text: &str) -> Result<Value> {
    Ok(match like {
        Value::Bool(_) => Value::Bool(parse_bool(text)?),
        Value::Number(n) if n.is_u64() => Value::from(
            text.parse::<u64>()
                .with_context(|| format!("expected a non-negative integer, got `{text}`"))?,
        ),
        Value::Number(_) => {
            let x: f64 = text.parse().with_context(|| format!("expected a number, got `{text}`"))?;
            Value::Number(Number::from_f64(x).ok_or_else(|| anyhow!("`{text}` is not finite"))?)
        }
        Value::Array(items) => {
            let parts: Vec<&str> = text.split(',').map(str::trim).collect();
            if parts.len() != items.len() {
                bail!("expected {} comma-separated values, got `{text}`", items.len());
            }
            Value::Array(
                items
                    .iter()
                    .zip(parts)
                    .map(|(item, part)| parse_like(item, part))
                    .collect::<Result<_>>()?,
            )
        }
        Value::String(_) => Value::String(text.to_string()),
        other => bail!("unsupported field type {other}"),
    })
}

fn lookup<'a>(root: &'a mut Map<String, Value>, key: &str) -> Option<&'a mut Value> {
    match key.split_once('.') {
        Some((head, rest)) => match root.get_mut(head)? {
            Value::Object(inner) => lookup(inner, rest),
            _ => None,
        },
        None => root.get_mut(key).filter(|v| !v.is_object()),
    }
}

/// Every `RunConfig` key in file order, nested fields dotted.
pub fn run_config_keys() -> Vec<String> {
    fn walk(prefix: &str, map: &Map<String, Value>, out: &mut Vec<String>) {
        for (k, v) in map {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                Value::Object(inner) => walk(&key, inner, out),
                _ => out.push(key),
            }
        }
    }
    let mut out = Vec::new();
    if let Value::Object(map) = serde_json::to_value(RunConfig::default()).expect("config serialises") {
        walk("", &map, &mut out);
    }
    out
}

fn render(v: &Value) -> String {
    match v {
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(","),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl CliConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "synthetic" => self.synthetic = parse_bool(value)?,
            "per_class" => self.per_class = value.parse().context("per_class")?,
            "labels" => self.labels = Some(value.parse().context("labels")?),
            "labels_frac" => self.labels_frac = value.parse().context("labels_frac")?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint_interval" => self.checkpoint_interval = value.parse().context("checkpoint_interval")?,
            _ => {
                let Value::Object(mut root) = serde_json::to_value(&self.run)? else {
                    unreachable!("RunConfig serialises to an object")
                };
                let slot = lookup(&mut root, key).ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
                *slot = parse_like(slot, value).with_context(|| format!("bad value for `{key}`"))?;
                self.run = serde_json::from_value(Value::Object(root))
                    .with_context(|| format!("bad value for `{key}`"))?;
            }
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Fills defaults that depend on other keys.
    pub fn finalize(&mut self) {
        if !self.explicit.contains("vcam_tau") {
            self.run.vcam_tau = default_promotion_tau(self.run.num_classes);
        }
    }

    /// Applies a config file's lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Serialises every key, readable back by [`CliConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(m) = &self.manifest {
            let _ = writeln!(out, "manifest = {}", m.display());
        }
        let _ = writeln!(out, "synthetic = {}", self.synthetic);
        let _ = writeln!(out, "per_class = {}", self.per_class);
        if let Some(n) = self.labels {
            let _ = writeln!(out, "labels = {n}");
        }
        let _ = writeln!(out, "labels_frac = {}", self.labels_frac);
        let _ = writeln!(out, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(out, "checkpoint_interval = {}", self.checkpoint_interval);
        let Value::Object(mut root) = serde_json::to_value(&self.run).expect("config serialises") else {
            unreachable!()
        };
        for key in run_config_keys() {
            let v = lookup(&mut root, &key).expect("key came from the same config");
            let _ = writeln!(out, "{key} = {}", render(v));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_run_field_round_trips() {
        let mut cfg = CliConfig::default();
        cfg.set("lr", "0.01").unwrap();
        cfg.set("model.patch", "4, 8, 8").unwrap();
        cfg.set("mask_frac", "0.2,0.4").unwrap();
        cfg.set("use_vcam", "false").unwrap();
        cfg.set("total_steps", "17").unwrap();
        cfg.set("labels", "30").unwrap();
        assert_eq!(cfg.run.lr, 0.01);
        assert_eq!(cfg.run.model.patch, [4, 8, 8]);
        assert_eq!(cfg.run.mask_frac, [0.2, 0.4]);
        assert!(!cfg.run.use_vcam);
        assert_eq!(cfg.run.total_steps, 17);

        let mut back = CliConfig::default();
        back.apply_text(&cfg.to_text(), "test").unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!((back.run, back.labels), (cfg.run, cfg.labels));
    }

    #[test]
    fn binary_tasks_get_the_lower_promotion_threshold() {
        let mut cfg = CliConfig::default();
        cfg.set("num_classes", "2").unwrap();
        cfg.finalize();
        assert_eq!(cfg.run.vcam_tau, 0.6);
        cfg.set("vcam_tau", "0.75").unwrap();
        cfg.finalize();
        assert_eq!(cfg.run.vcam_tau, 0.75);
        let mut nine = CliConfig::default();
        nine.finalize();
        assert_eq!(nine.run.vcam_tau, 0.9);
    }

    #[test]
    fn all_keys_are_settable() {
        let mut cfg = CliConfig::default();
        let text = cfg.to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        for key in run_config_keys() {
            assert!(keys.contains(&key.as_str()), "{key} missing from the dump");
        }
        cfg.apply_text(&text, "dump").unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut cfg = CliConfig::default();
        assert!(cfg.set("learning_rate", "0.1").is_err());
        assert!(cfg.set("model", "1").is_err());
        assert!(cfg.set("model.depth", "-1").is_err());
        assert!(cfg.set("lr", "fast").is_err());
        assert!(cfg.set("mask_frac", "0.1").is_err());
        assert!(cfg.set("use_sab", "maybe").is_err());
        let err = cfg.apply_text("lr = 0.1\nbogus = 3\n", "f.conf").unwrap_err();
        assert!(format!("{err:#}").contains("f.conf:2"), "{err:#}");
        assert!(cfg.apply_text("no equals sign", "f").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let mut cfg = CliConfig::default();
        cfg.apply_text("# header\n\nseed = 9  # trailing\n", "f").unwrap();
        assert_eq!(cfg.run.seed, 9);
    }
}
