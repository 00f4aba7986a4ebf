//! Layered configuration: defaults, then a TOML file, then `SLOTCOT_*`
//! environment variables, then command-line overrides. Later layers win.
//!
//! ```toml
//! [forge]
//! master_seed = 42
//! distractors_max = 5
//!
//! [forge.case_weights]
//! plain = 2.0
//!
//! [metrics]
//! matching = "exact"
//!
//! [adapter]
//! stack_factor = 4
//! ```
//!
//! Environment keys are `SLOTCOT_<SECTION>_<KEY>`, with `__` descending into
//! a nested table: `SLOTCOT_FORGE_MASTER_SEED=7`,
//! `SLOTCOT_FORGE_CASE_WEIGHTS__PLAIN=2`. Values are read as TOML literals
//! and fall back to plain strings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::adapter::AdapterConfig;
use crate::forge::ForgeConfig;
use crate::slotmetrics::MatchConfig;

pub const ENV_PREFIX: &str = "SLOTCOT_";
const SECTIONS: [&str; 3] = ["forge", "metrics", "adapter"];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub forge: ForgeConfig,
    pub metrics: MatchConfig,
    pub adapter: AdapterConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Default,
    File,
    Env,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Env => "env",
            Source::Flag => "flag",
        })
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid TOML in {origin}: {message}")]
    Syntax { origin: String, message: String },
    #[error("unknown config key {key} (from {layer})")]
    UnknownKey { key: String, layer: Source },
    #[error("bad override {0:?}, expected section.key=value")]
    BadOverride(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// The merged settings plus the layer each leaf key came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveConfig {
    pub settings: Settings,
    pub provenance: BTreeMap<String, Source>,
}

impl EffectiveConfig {
    /// `key = value  (source)` lines, sorted by key.
    pub fn describe(&self) -> String {
        let table = to_table(&self.settings);
        let mut leaves = BTreeMap::new();
        collect_leaves(&table, "", &mut leaves);
        let mut out = String::new();
        for (key, value) in leaves {
            let source = self.provenance.get(&key).copied().unwrap_or(Source::Default);
            out.push_str(&format!("{key} = {value}  ({source})\n"));
        }
        out
    }
}

fn to_table(settings: &Settings) -> Table {
    match Value::try_from(settings) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("settings serialize to a table"),
    }
}

fn collect_leaves(table: &Table, prefix: &str, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Value::Table(t) => collect_leaves(t, &key, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// Merges `layer` into `base`, recording every leaf it sets. Keys missing
/// from `base` are unknown.
fn merge(
    base: &mut Table,
    layer: &Table,
    prefix: &str,
    source: Source,
    provenance: &mut BTreeMap<String, Source>,
) -> Result<(), ConfigError> {
    for (k, v) in layer {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (base.get_mut(k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src, &key, source, provenance)?,
            (Some(slot), _) => {
                *slot = v.clone();
                let mut leaves = BTreeMap::new();
                match v {
                    Value::Table(t) => collect_leaves(t, &key, &mut leaves),
                    _ => {
                        leaves.insert(key, v.clone());
                    }
                }
                for leaf in leaves.into_keys() {
                    provenance.insert(leaf, source);
                }
            }
            (None, _) => return Err(ConfigError::UnknownKey { key, layer: source }),
        }
    }
    Ok(())
}

fn literal(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn nested(path: &[&str], value: Value) -> Table {
    let mut t = Table::new();
    match path {
        [] => {}
        [last] => {
            t.insert((*last).to_string(), value);
        }
        [head, rest @ ..] => {
            t.insert((*head).to_string(), Value::Table(nested(rest, value)));
        }
    }
    t
}

/// `SLOTCOT_*` variables addressing a known section, as a TOML layer.
/// Other variables with the prefix are ignored.
pub fn env_layer<I>(vars: I) -> Table
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut layer = Table::new();
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let rest = rest.to_ascii_lowercase();
        let Some((section, key)) = rest.split_once('_') else {
            continue;
        };
        if !SECTIONS.contains(&section) || key.is_empty() {
            continue;
        }
        let mut path = vec![section];
        path.extend(key.split("__"));
        let piece = nested(&path, literal(&raw));
        merge_loose(&mut layer, piece);
    }
    layer
}

fn merge_loose(base: &mut Table, layer: Table) {
    for (k, v) in layer {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge_loose(dst, src),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses `section.key=value` command-line overrides into a TOML layer.
pub fn override_layer(overrides: &[String]) -> Result<Table, ConfigError> {
    let mut layer = Table::new();
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(item.clone()))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::BadOverride(item.clone()));
        }
        merge_loose(&mut layer, nested(&path, literal(raw.trim())));
    }
    Ok(layer)
}

pub fn parse_toml(text: &str, origin: &str) -> Result<Table, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Syntax {
        origin: origin.to_string(),
        message: e.to_string(),
    })
}

/// Resolves settings from every layer and validates the result.
pub fn resolve(
    file: Option<&Table>,
    env: &Table,
    flags: &Table,
    seed: Option<u64>,
) -> Result<EffectiveConfig, ConfigError> {
    let mut table = to_table(&Settings::default());
    let mut provenance = BTreeMap::new();
    let mut defaults = BTreeMap::new();
    collect_leaves(&table, "", &mut defaults);
    for key in defaults.into_keys() {
        provenance.insert(key, Source::Default);
    }
    if let Some(file) = file {
        merge(&mut table, file, "", Source::File, &mut provenance)?;
    }
    merge(&mut table, env, "", Source::Env, &mut provenance)?;
    merge(&mut table, flags, "", Source::Flag, &mut provenance)?;

    let mut settings: Settings = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Invalid(e.message().to_string()))?;
    // Seeds may exceed the TOML integer range, so the flag is applied typed.
    if let Some(seed) = seed {
        settings.forge.master_seed = seed;
        provenance.insert("forge.master_seed".into(), Source::Flag);
    }
    settings
        .forge
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    settings
        .adapter
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(EffectiveConfig {
        settings,
        provenance,
    })
}

/// Reads the optional TOML file and the process environment, then resolves.
pub fn load(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<EffectiveConfig, ConfigError> {
    let file = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?;
            Some(parse_toml(&text, &p.display().to_string())?)
        }
        None => None,
    };
    let env = env_layer(std::env::vars());
    resolve(file.as_ref(), &env, &override_layer(overrides)?, seed)
}
