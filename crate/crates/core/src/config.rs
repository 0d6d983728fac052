//! TOML configuration tree with defaults, strict key checking and
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::attacks::{CounterAttackSpec, Norm, PerturbationBudget, PgdConfig, PgdTarget};
use crate::editors::{EditParams, EditorConfig};
use crate::error::{Error, Result};
use crate::immunizer::ImmunizerConfig;
use crate::training::{LossWeights, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// JSONL manifest of `(image, mask, prompt)` records.
    pub manifest: Option<PathBuf>,
    /// Working resolution (square) that images and masks are resized to.
    pub resolution: usize,
    pub split_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            resolution: 512,
            split_ratio: 0.8,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub kappa: f64,
    pub norm: Norm,
    pub steps: usize,
    pub step_size: Option<f64>,
    pub target: PgdTarget,
    pub target_value: f64,
    pub prompt: String,
    pub random_seed: u64,
    pub jpeg_quality: u8,
    pub denoiser: String,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let pgd = PgdConfig::default();
        let budget = PerturbationBudget::default();
        Self {
            kappa: budget.kappa,
            norm: budget.norm,
            steps: pgd.steps,
            step_size: pgd.step_size,
            target: pgd.target,
            target_value: pgd.target_value,
            prompt: pgd.prompt,
            random_seed: 0,
            jpeg_quality: 75,
            denoiser: "gaussian".into(),
        }
    }
}

impl AttackConfig {
    pub fn budget(&self) -> PerturbationBudget {
        PerturbationBudget {
            kappa: self.kappa,
            norm: self.norm,
        }
    }

    pub fn pgd(&self, target: PgdTarget, editor: EditParams) -> PgdConfig {
        PgdConfig {
            steps: self.steps,
            step_size: self.step_size,
            target,
            target_value: self.target_value,
            prompt: self.prompt.clone(),
            editor,
        }
    }

    /// The default counter-attack arms: JPEG at the configured quality and
    /// the configured denoiser.
    pub fn counter_attacks(&self) -> Vec<CounterAttackSpec> {
        vec![
            CounterAttackSpec::Jpeg {
                quality: self.jpeg_quality,
            },
            CounterAttackSpec::Denoise {
                denoiser_id: self.denoiser.clone(),
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Load the contrastive text-image scorer for CLIP-T.
    pub clip: bool,
    /// Number of samples evaluated (0 = all).
    pub limit: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { clip: true, limit: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Parent directory of timestamped run directories.
    pub root: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { root: "runs".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunConfig,
    pub data: DataConfig,
    pub immunizer: ImmunizerConfig,
    pub editor: EditorConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
}

/// Keys whose default is absent and therefore missing from the serialized
/// defaults.
const OPTIONAL_KEYS: &[&str] = &[
    "data.manifest",
    "editor.weights_dir",
    "train.max_steps",
    "attack.step_size",
];

fn known_keys() -> Vec<String> {
    let defaults = Value::try_from(Config::default()).expect("defaults serialize");
    let mut keys = Vec::new();
    if let Value::Table(t) = defaults {
        for (section, v) in t {
            if let Value::Table(inner) = v {
                for k in inner.keys() {
                    keys.push(format!("{section}.{k}"));
                }
            }
        }
    }
    keys.extend(OPTIONAL_KEYS.iter().map(|s| s.to_string()));
    keys.sort();
    keys
}

fn unknown_keys(tree: &toml::Table, known: &[String]) -> Vec<String> {
    let sections: Vec<&str> = known.iter().filter_map(|k| k.split('.').next()).collect();
    let mut bad = Vec::new();
    for (section, v) in tree {
        if !sections.contains(&section.as_str()) {
            bad.push(format!("unknown key `{section}`"));
            continue;
        }
        match v {
            Value::Table(inner) => {
                for k in inner.keys() {
                    let full = format!("{section}.{k}");
                    if !known.contains(&full) {
                        bad.push(format!("unknown key `{full}`"));
                    }
                }
            }
            _ => bad.push(format!("`{section}` must be a table")),
        }
    }
    bad
}

/// Resolves a dotted or bare key. A bare key must name exactly one field.
pub fn resolve_key(key: &str) -> Result<String> {
    let known = known_keys();
    if known.iter().any(|k| k == key) {
        return Ok(key.to_string());
    }
    if !key.contains('.') {
        let hits: Vec<&String> = known.iter().filter(|k| k.rsplit('.').next() == Some(key)).collect();
        match hits.len() {
            1 => return Ok(hits[0].clone()),
            n if n > 1 => {
                return Err(Error::config(format!(
                    "ambiguous key `{key}`; use one of {}",
                    hits.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                )))
            }
            _ => {}
        }
    }
    Err(Error::config(format!("unknown key `{key}`")))
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Parses a TOML document, applies `key=value` overrides and validates the
/// result. Every offending key is reported in one error.
pub fn load_config_str(text: &str, overrides: &[String]) -> Result<Config> {
    let mut tree: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("parse error: {e}")))?;
    let known = known_keys();
    let mut errs = unknown_keys(&tree, &known);
    for ov in overrides {
        let Some((k, v)) = ov.split_once('=') else {
            errs.push(format!("override `{ov}` is not key=value"));
            continue;
        };
        match resolve_key(k.trim()) {
            Ok(full) => {
                let (section, field) = full.split_once('.').expect("dotted");
                let entry = tree
                    .entry(section.to_string())
                    .or_insert_with(|| Value::Table(toml::Table::new()));
                if let Value::Table(t) = entry {
                    t.insert(field.to_string(), parse_value(v.trim()));
                }
            }
            Err(Error::Config(mut e)) => errs.append(&mut e),
            Err(e) => errs.push(e.to_string()),
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let cfg: Config = Value::Table(tree)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    load_config_str(&text, overrides)
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut collect = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Config(mut e)) => errs.append(&mut e),
            Err(e) => errs.push(e.to_string()),
        };
        collect(self.immunizer.validate());
        collect(self.train.validate());
        collect(self.loss.validate());
        collect(self.budget().validate());
        collect(self.attack.pgd(self.attack.target, self.editor.params()).validate());
        for c in self.attack.counter_attacks() {
            collect(c.validate());
        }
        if self.data.resolution < crate::data::MIN_SIDE {
            errs.push(format!("data.resolution must be at least {}", crate::data::MIN_SIDE));
        }
        if !(self.data.split_ratio > 0.0 && self.data.split_ratio <= 1.0) {
            errs.push(format!("data.split_ratio must be in (0, 1], got {}", self.data.split_ratio));
        }
        if self.editor.steps == 0 {
            errs.push("editor.steps must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn budget(&self) -> PerturbationBudget {
        self.attack.budget()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
