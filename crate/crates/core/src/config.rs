//! Run configuration: defaults, a JSON file and `key=value` overrides merged
//! in that order.
//!
//! The file mirrors [`RunConfig`] with one object per section:
//!
//! ```json
//! { "seed": 7, "train": { "lr": 0.01 }, "rank": { "fraction": 0.3 } }
//! ```
//!
//! Override keys are dotted paths (`train.lr`) or bare field names when the
//! name occurs in exactly one section (`lr`). Values parse as JSON, falling
//! back to a plain string, so `precision=double` and `lr=1e-3` both work.
//! The seed and precision are global and drive every stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::corpus::Modality;
use crate::eval::RecallOptions;
use crate::linalg::Precision;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config file is not valid JSON: {0}")]
    Parse(serde_json::Error),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` is ambiguous; use one of {candidates}")]
    Ambiguous { key: String, candidates: String },
    #[error("override `{0}` is not of the form key=value")]
    Override(String),
    #[error("bad value for `{key}`: {reason}")]
    Type { key: String, reason: String },
}

/// Ranking method for `rank`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RankMethod {
    Single,
    #[default]
    Two,
    Random,
    Raw,
}

impl RankMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RankMethod::Single => "single",
            RankMethod::Two => "two",
            RankMethod::Random => "random",
            RankMethod::Raw => "raw",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankConfig {
    pub method: RankMethod,
    /// Share of each shot's snippets kept by stage one.
    pub fraction: f64,
    /// Columns used by the raw-feature baseline.
    pub modality: Modality,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            method: RankMethod::Two,
            fraction: 0.3,
            modality: Modality::Audiovisual,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Scenes in the validation split written next to the training split.
    pub val_scenes: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { val_scenes: 80 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
    pub precision: Precision,
    /// Zero this modality's columns in every corpus loaded for training,
    /// ranking or heatmaps.
    pub zero_modality: Option<Modality>,
    pub synth: SynthConfig,
    pub gen: GenConfig,
    pub train: TrainConfig,
    pub rank: RankConfig,
    pub eval: RecallOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            precision: Precision::Single,
            zero_modality: None,
            synth: SynthConfig::default(),
            gen: GenConfig::default(),
            train: TrainConfig::default(),
            rank: RankConfig::default(),
            eval: RecallOptions::default(),
        }
    }
}

/// Section fields that the global keys replace.
const SHADOWED: &[(&str, &str)] = &[
    ("synth", "seed"),
    ("synth", "split"),
    ("train", "seed"),
    ("train", "precision"),
];

impl RunConfig {
    /// Pushes the global seed and precision down into the sections.
    fn propagate(mut self) -> Self {
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.train.precision = self.precision;
        self
    }

    /// The resolved config as it is logged and recorded in provenance.
    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        strip_shadowed(&mut v);
        v
    }
}

fn strip_shadowed(v: &mut Value) {
    for (section, key) in SHADOWED {
        if let Some(obj) = v.get_mut(*section).and_then(Value::as_object_mut) {
            obj.remove(*key);
        }
    }
}

fn defaults_tree() -> Value {
    RunConfig::default().to_value()
}

/// Merges `src` into `dst`, rejecting keys absent from `dst`.
fn merge(dst: &mut Map<String, Value>, src: Map<String, Value>, prefix: &str) -> Result<(), ConfigError> {
    for (k, v) in src {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match dst.get_mut(&k) {
            None => return Err(ConfigError::UnknownKey(path)),
            Some(Value::Object(inner)) if v.is_object() => {
                let Value::Object(src_inner) = v else { unreachable!() };
                merge(inner, src_inner, &path)?;
            }
            Some(slot) => *slot = v,
        }
    }
    Ok(())
}

/// Full dotted path for an override key.
fn resolve_key(tree: &Map<String, Value>, key: &str) -> Result<Vec<String>, ConfigError> {
    let parts: Vec<String> = key.split('.').map(str::to_string).collect();
    let mut node = tree;
    for (n, p) in parts.iter().enumerate() {
        match node.get(p) {
            Some(Value::Object(inner)) if n + 1 < parts.len() => node = inner,
            Some(_) if n + 1 == parts.len() => return Ok(parts),
            _ => break,
        }
    }
    if parts.len() == 1 {
        let hits: Vec<&String> = tree
            .iter()
            .filter(|(_, v)| v.as_object().is_some_and(|o| o.contains_key(key)))
            .map(|(s, _)| s)
            .collect();
        match hits.as_slice() {
            [one] => return Ok(vec![(*one).clone(), key.to_string()]),
            [] => {}
            many => {
                return Err(ConfigError::Ambiguous {
                    key: key.into(),
                    candidates: many.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", "),
                })
            }
        }
    }
    Err(ConfigError::UnknownKey(key.into()))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Resolves a config from an optional JSON file and `key=value` overrides.
/// Overrides win over the file, the file over the defaults.
pub fn resolve_config(file: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let Value::Object(mut tree) = defaults_tree() else { unreachable!() };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let parsed: Value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(&text).map_err(ConfigError::Parse)?
        };
        let Value::Object(obj) = parsed else {
            return Err(ConfigError::Type {
                key: "<root>".into(),
                reason: "config file must hold a JSON object".into(),
            });
        };
        merge(&mut tree, obj, "")?;
    }
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
        let path = resolve_key(&tree, key.trim())?;
        let mut node = &mut tree;
        for p in &path[..path.len() - 1] {
            node = node.get_mut(p).and_then(Value::as_object_mut).expect("resolved path");
        }
        node.insert(path[path.len() - 1].clone(), parse_value(raw.trim()));
    }
    from_tree(tree)
}

fn from_tree(tree: Map<String, Value>) -> Result<RunConfig, ConfigError> {
    // Check each leaf on its own so a type error names its key.
    let defaults = defaults_tree();
    for (section, v) in &tree {
        if let (Value::Object(fields), Some(Value::Object(_))) = (v, defaults.get(section)) {
            for (k, fv) in fields {
                let mut probe = defaults.clone();
                probe[section][k] = fv.clone();
                check_leaf(probe, &format!("{section}.{k}"))?;
            }
        } else {
            let mut probe = defaults.clone();
            probe[section] = v.clone();
            check_leaf(probe, section)?;
        }
    }
    let cfg: RunConfig = serde_json::from_value(Value::Object(tree)).map_err(|e| ConfigError::Type {
        key: "<config>".into(),
        reason: e.to_string(),
    })?;
    Ok(cfg.propagate())
}

fn check_leaf(probe: Value, key: &str) -> Result<(), ConfigError> {
    serde_json::from_value::<RunConfig>(probe)
        .map(|_| ())
        .map_err(|e| ConfigError::Type {
            key: key.into(),
            reason: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn empty_file_gives_defaults() {
        let f = file("");
        assert_eq!(resolve_config(Some(f.path()), &[]).unwrap(), RunConfig::default());
        assert_eq!(resolve_config(None, &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn override_beats_file() {
        let f = file(r#"{"train": {"lr": 0.01}}"#);
        let cfg = resolve_config(Some(f.path()), &["lr=0.003".into()]).unwrap();
        assert_eq!(cfg.train.lr, 0.003);
        let cfg = resolve_config(Some(f.path()), &[]).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
    }

    #[test]
    fn unknown_key_is_named() {
        let f = file(r#"{"train": {"foo": 1}}"#);
        let err = resolve_config(Some(f.path()), &[]).unwrap_err().to_string();
        assert!(err.contains("train.foo"), "{err}");
        let err = resolve_config(None, &["foo=1".into()]).unwrap_err().to_string();
        assert!(err.contains("`foo`"), "{err}");
    }

    #[test]
    fn shadowed_section_keys_are_unknown() {
        assert!(matches!(
            resolve_config(None, &["train.seed=3".into()]),
            Err(ConfigError::UnknownKey(_))
        ));
    }

    #[test]
    fn type_mismatch_names_key() {
        let err = resolve_config(None, &["epochs=\"many\"".into()]).unwrap_err().to_string();
        assert!(err.contains("train.epochs"), "{err}");
        let err = resolve_config(None, &["precision=triple".into()]).unwrap_err().to_string();
        assert!(err.contains("precision"), "{err}");
    }

    #[test]
    fn ambiguous_bare_key() {
        // `modality_split` lives only in synth, `seed` is global, `fraction` only in rank.
        assert!(resolve_config(None, &["fraction=0.5".into()]).is_ok());
        let cfg = resolve_config(None, &["seed=9".into(), "precision=double".into()]).unwrap();
        assert_eq!((cfg.synth.seed, cfg.train.seed), (9, 9));
        assert_eq!(cfg.train.precision, Precision::Double);
    }

    #[test]
    fn enum_values_parse_as_strings() {
        let cfg = resolve_config(None, &["method=raw".into(), "eval.distance=exclusive".into()]).unwrap();
        assert_eq!(cfg.rank.method, RankMethod::Raw);
        assert_eq!(cfg.eval.distance, crate::eval::DistanceMode::Exclusive);
    }

    #[test]
    fn resolved_value_round_trips() {
        let cfg = resolve_config(None, &["seed=4".into(), "n_scenes=12".into()]).unwrap();
        let text = serde_json::to_string(&cfg.to_value()).unwrap();
        let f = file(&text);
        assert_eq!(resolve_config(Some(f.path()), &[]).unwrap(), cfg);
    }
}
