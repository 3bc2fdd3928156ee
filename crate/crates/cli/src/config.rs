use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use wsdattn::data::DEFAULT_RATIOS;
use wsdattn::eval::Backoff;
use wsdattn::model::ArchitectureConfig;
use wsdattn::training::TrainConfig;
use wsdattn::{Error, Result};

pub const SNAPSHOT_FILE: &str = "config.json";

/// Everything a run needs. Written into the run directory so that
/// `train --config <run>/config.json` replays it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Sense-tagged training corpus.
    pub corpus: Option<PathBuf>,
    /// Split manifest to apply instead of drawing a fresh split.
    pub split: Option<PathBuf>,
    pub split_ratios: Option<[f64; 3]>,
    pub split_seed: u64,
    pub backoff: Backoff,
    pub model: ArchitectureConfig,
    pub training: TrainConfig,
}

const SECTIONS: [&str; 2] = ["model", "training"];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn ratios(&self) -> [f64; 3] {
        self.split_ratios.unwrap_or(DEFAULT_RATIOS)
    }

    /// Applies `key=value` overrides. Keys are the field names of the run,
    /// model or training settings (`learning_rate`, `architecture`, ...),
    /// optionally followed by `.field` to reach inside a nested value.
    /// Values are read as JSON and fall back to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set {item}: expected KEY=VALUE")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let slot = locate(&mut root, key.trim())
                .ok_or_else(|| Error::Config(format!("--set {item}: unknown key `{key}`; known keys: {}", known_keys(self).join(", "))))?;
            *slot = value;
        }
        let out: RunConfig = serde_json::from_value(root).map_err(|e| Error::Config(format!("--set: {e}")))?;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        wsdattn::io::write_json(&dir.join(SNAPSHOT_FILE), self)
    }
}

fn object(v: &mut Value) -> &mut Map<String, Value> {
    v.as_object_mut().expect("config is a JSON object")
}

fn locate<'a>(root: &'a mut Value, key: &str) -> Option<&'a mut Value> {
    let mut parts = key.split('.');
    let head = parts.next()?;
    let mut slot = if SECTIONS.contains(&head) {
        let field = parts.next()?;
        object(root).get_mut(head)?.as_object_mut()?.get_mut(field)?
    } else if object(root).contains_key(head) {
        object(root).get_mut(head)?
    } else {
        let section = SECTIONS.iter().find(|s| root[**s].get(head).is_some())?;
        object(root).get_mut(*section)?.as_object_mut()?.get_mut(head)?
    };
    for part in parts {
        if slot.is_null() {
            return None;
        }
        slot = slot.as_object_mut()?.get_mut(part)?;
    }
    Some(slot)
}

fn known_keys(cfg: &RunConfig) -> Vec<String> {
    let root = serde_json::to_value(cfg).expect("config serializes");
    let mut keys = Vec::new();
    for (k, v) in root.as_object().expect("object") {
        if SECTIONS.contains(&k.as_str()) {
            keys.extend(v.as_object().expect("object").keys().cloned());
        } else {
            keys.push(k.clone());
        }
    }
    keys
}

#[cfg(test)]
mod tests {
    use super::*;
    use wsdattn::model::{Architecture, ScorerKind};

    fn set(items: &[&str]) -> Result<RunConfig> {
        RunConfig::default().with_overrides(&items.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    #[test]
    fn flat_and_qualified_keys() {
        let c = set(&["architecture=seq2seq+pos-pointwise", "learning_rate=0.2", "model.scorer=general", "corpus=a.tsv"]).unwrap();
        assert_eq!(c.model.architecture, Architecture::Seq2SeqPosPointwise);
        assert_eq!(c.training.learning_rate, 0.2);
        assert_eq!(c.model.scorer, ScorerKind::General);
        assert_eq!(c.corpus, Some(PathBuf::from("a.tsv")));
    }

    #[test]
    fn nested_values() {
        let c = set(&["window.each_side=5", r#"fusion_init={"mode":"uniform","bound":0.1}"#]).unwrap();
        assert_eq!(serde_json::to_value(c.training.window).unwrap()["each_side"], 5);
        assert_eq!(serde_json::to_value(&c.model.fusion_init).unwrap()["bound"], 0.1);
    }

    #[test]
    fn unknown_and_invalid() {
        assert!(matches!(set(&["learning_rat=0.1"]), Err(Error::Config(m)) if m.contains("learning_rat")));
        assert!(matches!(set(&["learning_rate"]), Err(Error::Usage(_))));
        assert!(matches!(set(&["learning_rate=-1"]), Err(Error::Config(_))));
        assert!(matches!(set(&["architecture=seq2seq+lstm"]), Err(Error::Config(_))));
        assert!(set(&["training.architecture=seq2seq"]).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        let c = set(&["seed=7", "split_ratios=[0.5,0.25,0.25]"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&dir.path().join(SNAPSHOT_FILE)).unwrap(), c);
    }
}
