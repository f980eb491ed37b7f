//! Run configuration files: sectioned `key = value` text, or JSON.
//!
//! Keys are paths into [`PcnConfig`]. A section header `[train.arch.seg]`
//! prefixes every key below it, and list entries are addressed by index
//! (`intensity_table.1.venous.mean`). Every problem in a file is collected
//! before failing, so one run reports all of them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::error::{ConfigIssue, PcnError, Result};
use crate::io::sha256_hex;
use crate::nn::OptimizerKind;
use crate::phantom::PhantomConfig;
use crate::trainer::TrainConfig;
use crate::types::PhaseTag;

/// Size and seed of a generated phantom dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub cases: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { cases: 50, seed: 0 }
    }
}

/// Named starting points for the phantom section.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhantomPreset {
    Default,
    WeakArterial,
    WeakVenous,
    Abnormal,
}

impl PhantomPreset {
    pub const NAMES: [&'static str; 4] = ["default", "weak_arterial", "weak_venous", "abnormal"];

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "default" => Some(Self::Default),
            "weak_arterial" => Some(Self::WeakArterial),
            "weak_venous" => Some(Self::WeakVenous),
            "abnormal" => Some(Self::Abnormal),
            _ => None,
        }
    }

    pub fn config(self) -> PhantomConfig {
        match self {
            Self::Default => PhantomConfig::default(),
            Self::WeakArterial => PhantomConfig::weak_phase(PhaseTag::Arterial),
            Self::WeakVenous => PhantomConfig::weak_phase(PhaseTag::Venous),
            Self::Abnormal => PhantomConfig::abnormal(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcnConfig {
    pub phantom: PhantomConfig,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
}

const PRESET_KEY: &str = "phantom.preset";

struct Entry {
    line: Option<usize>,
    key: String,
    value: Value,
}

impl PcnConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PcnError::Prerequisite(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Parses either format; text starting with `{` is read as JSON.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = if text.trim_start().starts_with('{') {
            json_entries(text)?
        } else {
            ini_entries(text)?
        };
        build(entries)
    }

    /// Every invariant violation, keyed by full path.
    pub fn issues(&self) -> Vec<(String, String)> {
        let mut v: Vec<(String, String)> = self
            .train
            .issues()
            .into_iter()
            .map(|(k, m)| (format!("train.{k}"), m))
            .collect();
        v.extend(self.phantom.issues().into_iter().map(|(k, m)| (format!("phantom.{k}"), m)));
        if self.dataset.cases == 0 {
            v.push(("dataset.cases".into(), "must be >= 1".into()));
        }
        if self.train.arch.seg.num_classes != self.phantom.num_classes {
            v.push((
                "train.arch.seg.num_classes".into(),
                format!(
                    "is {} but the phantom has {} classes",
                    self.train.arch.seg.num_classes, self.phantom.num_classes
                ),
            ));
        }
        v
    }

    /// `PCN_DETERMINISTIC=1` in the environment forces deterministic mode.
    pub fn apply_env(&mut self) {
        if std::env::var("PCN_DETERMINISTIC").is_ok_and(|v| v.trim() == "1") {
            self.train.deterministic = true;
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

fn issue(line: Option<usize>, key: &str, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

fn scalar(raw: &str) -> Value {
    let raw = raw.trim();
    if let Some(s) = raw.strip_prefix('"').and_then(|r| r.strip_suffix('"')) {
        return Value::String(s.to_string());
    }
    match raw {
        "true" => return Value::Bool(true),
        "false" => return Value::Bool(false),
        _ => {}
    }
    if let Ok(u) = raw.parse::<u64>() {
        return Value::Number(u.into());
    }
    if let Ok(i) = raw.parse::<i64>() {
        return Value::Number(i.into());
    }
    if let Some(n) = raw.parse::<f64>().ok().and_then(Number::from_f64) {
        return Value::Number(n);
    }
    Value::String(raw.to_string())
}

fn ini_entries(text: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    let mut issues = Vec::new();
    let mut section = String::new();
    for (i, line) in text.lines().enumerate() {
        let n = Some(i + 1);
        let line = match line.find(" #") {
            Some(p) => &line[..p],
            None => line,
        }
        .trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            match rest.strip_suffix(']') {
                Some(s) if !s.trim().is_empty() => section = s.trim().to_string(),
                _ => issues.push(issue(n, line, "malformed section header")),
            }
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            issues.push(issue(n, line, "expected key = value"));
            continue;
        };
        let k = k.trim();
        if k.is_empty() {
            issues.push(issue(n, line, "empty key"));
            continue;
        }
        let key = if section.is_empty() {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        entries.push(Entry {
            line: n,
            key,
            value: scalar(v),
        });
    }
    if issues.is_empty() {
        Ok(entries)
    } else {
        Err(PcnError::Validation(issues))
    }
}

fn flatten(prefix: &str, v: Value, out: &mut Vec<Entry>) {
    let join = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match v {
        Value::Object(m) if !m.is_empty() => m.into_iter().for_each(|(k, v)| flatten(&join(&k), v, out)),
        Value::Array(a) if !a.is_empty() => a
            .into_iter()
            .enumerate()
            .for_each(|(i, v)| flatten(&join(&i.to_string()), v, out)),
        v => out.push(Entry {
            line: None,
            key: prefix.to_string(),
            value: v,
        }),
    }
}

fn json_entries(text: &str) -> Result<Vec<Entry>> {
    let v: Value = serde_json::from_str(text)
        .map_err(|e| PcnError::Validation(vec![issue(Some(e.line()), "<json>", e.to_string())]))?;
    let Value::Object(top) = v else {
        return Err(PcnError::Validation(vec![issue(None, "<json>", "top level must be an object")]));
    };
    let mut out = Vec::new();
    for (k, v) in top {
        flatten(&k, v, &mut out);
    }
    Ok(out)
}

fn nearest<'a>(key: &str, candidates: impl Iterator<Item = &'a String>) -> Option<&'a String> {
    candidates
        .map(|c| (strsim::jaro_winkler(key, c), c))
        .filter(|(s, _)| *s > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c)
}

fn variant_default(field: &str, name: &str) -> Option<Value> {
    if field != "optimizer" {
        return None;
    }
    let kind = match name {
        "adam" => OptimizerKind::adam(),
        "sgd" => OptimizerKind::sgd(),
        _ => return None,
    };
    serde_json::to_value(kind).ok()
}

/// Writes `value` at `key` inside `root`, refusing paths the default tree
/// does not have.
fn set(root: &mut Value, key: &str, value: Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    let mut walked = String::new();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(m) => {
                if !m.contains_key(*part) {
                    let hint = nearest(part, m.keys())
                        .map(|s| format!("; did you mean `{}`?", join(&walked, s)))
                        .unwrap_or_default();
                    return Err(format!("unknown key `{}`{hint}", join(&walked, part)));
                }
                m.get_mut(*part).expect("checked")
            }
            Value::Array(a) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| format!("`{walked}` is a list; expected an index, got `{part}`"))?;
                let len = a.len();
                a.get_mut(idx)
                    .ok_or_else(|| format!("index {idx} out of range for `{walked}` ({len} entries)"))?
            }
            _ => return Err(format!("`{walked}` is a value, not a table")),
        };
        walked = join(&walked, part);
        if last {
            if cur.is_object() {
                let name = value.as_str().unwrap_or_default();
                return match variant_default(part, name) {
                    Some(v) => {
                        *cur = v;
                        Ok(())
                    }
                    None => Err(format!("`{walked}` is a table; set its fields instead")),
                };
            }
            *cur = value;
            return Ok(());
        }
    }
    unreachable!("key has at least one part")
}

fn join(a: &str, b: &str) -> String {
    if a.is_empty() {
        b.to_string()
    } else {
        format!("{a}.{b}")
    }
}

fn build(entries: Vec<Entry>) -> Result<PcnConfig> {
    let mut issues = Vec::new();
    let mut base = PcnConfig::default();
    let mut lines: BTreeMap<String, Option<usize>> = BTreeMap::new();
    for e in entries.iter().filter(|e| e.key == PRESET_KEY) {
        match e.value.as_str().and_then(PhantomPreset::parse) {
            Some(p) => base.phantom = p.config(),
            None => issues.push(issue(
                e.line,
                PRESET_KEY,
                format!("unknown preset; expected one of {}", PhantomPreset::NAMES.join(", ")),
            )),
        }
    }
    let mut root = serde_json::to_value(&base)?;
    for e in entries.into_iter().filter(|e| e.key != PRESET_KEY) {
        if let Some(prev) = lines.get(&e.key) {
            let at = prev.map(|l| format!(" (first set on line {l})")).unwrap_or_default();
            issues.push(issue(e.line, &e.key, format!("duplicate key{at}")));
            continue;
        }
        lines.insert(e.key.clone(), e.line);
        let before = root.clone();
        if let Err(m) = set(&mut root, &e.key, e.value) {
            issues.push(issue(e.line, &e.key, m));
            continue;
        }
        // Type errors surface here, attributed to the entry that caused them.
        if let Err(err) = PcnConfig::deserialize(&root) {
            issues.push(issue(e.line, &e.key, err.to_string()));
            root = before;
        }
    }
    let cfg = PcnConfig::deserialize(&root)?;
    for (k, m) in cfg.issues() {
        let line = lines.get(&k).copied().flatten();
        issues.push(issue(line, &k, m));
    }
    if issues.is_empty() {
        Ok(cfg)
    } else {
        Err(PcnError::Validation(issues))
    }
}

/// Parses a flat JSON object of overrides for `TrainConfig` fields, as used by
/// experiment grids.
pub fn train_overrides(base: &TrainConfig, overrides: &Map<String, Value>) -> Result<TrainConfig> {
    let mut root = serde_json::to_value(base)?;
    let mut issues = Vec::new();
    let mut entries = Vec::new();
    for (k, v) in overrides {
        flatten(k, v.clone(), &mut entries);
    }
    for e in entries {
        if let Err(m) = set(&mut root, &e.key, e.value) {
            issues.push(issue(None, &e.key, m));
        }
    }
    if !issues.is_empty() {
        return Err(PcnError::Validation(issues));
    }
    TrainConfig::deserialize(&root).map_err(|e| PcnError::Validation(vec![issue(None, "overrides", e.to_string())]))
}
