//! Pipeline configuration: one JSON document plus `PIPELINE_<SECTION>_<FIELD>`
//! environment overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use saeaudit::audit::AuditConfig;
use saeaudit::lm_train::TrainRunConfig;
use saeaudit::{GptConfig, SaeConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const ENV_PREFIX: &str = "PIPELINE_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
    pub probes: PathBuf,
    pub work_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Train fraction of the training-role documents; the rest validate.
    pub split_ratio: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { split_ratio: 0.9 }
    }
}

/// Settings shared by every layer's SAE. `hidden_dim` defaults to the
/// depth-scaled width. `overrides` maps a layer number to a partial
/// [`SaeConfig`] applied last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    /// Layers to extract, train and audit; empty means all.
    pub layers: Vec<u32>,
    /// Fraction of sentences used to train each SAE.
    pub split_ratio: f64,
    pub hidden_dim: Option<usize>,
    pub k: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub min_delta: f64,
    pub center: bool,
    pub overrides: BTreeMap<String, Value>,
}

impl Default for SaeSection {
    fn default() -> Self {
        let d = SaeConfig::default();
        Self {
            layers: Vec::new(),
            split_ratio: 0.9,
            hidden_dim: None,
            k: d.k,
            max_epochs: d.max_epochs,
            patience: d.patience,
            lr: d.lr,
            batch_size: d.batch_size,
            min_delta: d.min_delta,
            center: d.center,
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub top_detectors: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { top_detectors: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub prompt: String,
    pub max_new: usize,
    pub temperature: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            prompt: "It is a truth universally acknowledged".into(),
            max_new: 40,
            temperature: 0.8,
        }
    }
}

/// The whole run description. The global `seed` replaces the model and
/// training seeds; each layer's SAE uses `seed + layer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: GptConfig,
    #[serde(default)]
    pub train: TrainRunConfig,
    #[serde(default)]
    pub sae: SaeSection,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub generate: GenerateSection,
}

impl PipelineConfig {
    /// Reads `path`, applies overrides from `env`, resolves relative paths
    /// against the config file's directory and validates.
    pub fn load(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let src = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut doc: Value = serde_json::from_str(&src).with_context(|| format!("parsing config {}", path.display()))?;
        apply_env_overrides(&mut doc, env)?;
        let mut cfg = Self::from_value(doc)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve_against(base);
        cfg.model.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Deserializes with the failing field path in the error.
    pub fn from_value(doc: Value) -> Result<Self> {
        serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            anyhow!("config field `{path}`: {}", e.into_inner())
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (field, p) in [
            ("paths.corpus_dir", &self.paths.corpus_dir),
            ("paths.vocab", &self.paths.vocab),
            ("paths.merges", &self.paths.merges),
            ("paths.probes", &self.paths.probes),
        ] {
            if !p.exists() {
                bail!("config field `{field}`: {} does not exist", p.display());
            }
        }
        let r = self.corpus.split_ratio;
        if !(r > 0.0 && r < 1.0) {
            bail!("config field `corpus.split_ratio`: {r} outside (0, 1)");
        }
        let r = self.sae.split_ratio;
        if !(r > 0.0 && r < 1.0) {
            bail!("config field `sae.split_ratio`: {r} outside (0, 1)");
        }
        let t = self.generate.temperature;
        if t.is_nan() || t <= 0.0 {
            bail!("config field `generate.temperature`: {t} must be positive");
        }
        if self.train.checkpoint_dir.is_some() {
            bail!("config field `train.checkpoint_dir`: checkpoints are placed in the work dir; leave it unset");
        }
        let field = |name: &str, r: saeaudit::Result<()>| r.map_err(|e| anyhow!("config section `{name}`: {e}"));
        field("model", self.model.validate())?;
        field("train", self.train.validate())?;
        field("audit", self.audit.validate())?;
        for l in &self.sae.layers {
            if *l == 0 || *l as usize > self.model.layers {
                bail!("config field `sae.layers`: layer {l} outside 1..={}", self.model.layers);
            }
        }
        for key in self.sae.overrides.keys() {
            let l: u32 = key
                .parse()
                .map_err(|_| anyhow!("config field `sae.overrides.{key}`: key must be a layer number"))?;
            if l == 0 || l as usize > self.model.layers {
                bail!("config field `sae.overrides.{key}`: layer outside 1..={}", self.model.layers);
            }
        }
        for l in self.all_layers() {
            self.sae_config(l)?;
        }
        Ok(())
    }

    /// Every model layer, 1-based.
    pub fn all_layers(&self) -> Vec<u32> {
        (1..=self.model.layers as u32).collect()
    }

    /// The configured SAE layers, or all of them.
    pub fn sae_layers(&self) -> Vec<u32> {
        if self.sae.layers.is_empty() {
            self.all_layers()
        } else {
            let mut l = self.sae.layers.clone();
            l.sort_unstable();
            l.dedup();
            l
        }
    }

    /// Full SAE configuration for one layer.
    pub fn sae_config(&self, layer: u32) -> Result<SaeConfig> {
        let s = &self.sae;
        let mut cfg = SaeConfig::for_layer(layer, self.model.embed_dim);
        if let Some(h) = s.hidden_dim {
            cfg.hidden_dim = h;
        }
        cfg.k = s.k;
        cfg.max_epochs = s.max_epochs;
        cfg.patience = s.patience;
        cfg.lr = s.lr;
        cfg.batch_size = s.batch_size;
        cfg.min_delta = s.min_delta;
        cfg.center = s.center;
        cfg.seed = self.seed.wrapping_add(layer as u64);
        if let Some(over) = s.overrides.get(&layer.to_string()) {
            let mut merged = serde_json::to_value(&cfg)?;
            merge(&mut merged, over.clone());
            cfg = serde_path_to_error::deserialize(merged).map_err(|e| {
                let path = e.path().to_string();
                anyhow!("config field `sae.overrides.{layer}.{path}`: {}", e.into_inner())
            })?;
            cfg.layer = layer;
        }
        cfg.validate()
            .map_err(|e| anyhow!("config section `sae` (layer {layer}): {e}"))?;
        Ok(cfg)
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.corpus_dir,
            &mut self.vocab,
            &mut self.merges,
            &mut self.probes,
            &mut self.work_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn merge(into: &mut Value, from: Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `PIPELINE_<SECTION>_<FIELD>=value` pairs to the raw document.
/// `PIPELINE_SEED` sets the top-level seed. Values parse as JSON when they
/// can and are taken as strings otherwise.
pub fn apply_env_overrides(doc: &mut Value, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let root = doc
        .as_object_mut()
        .ok_or_else(|| anyhow!("config must be a JSON object"))?;
    let mut pairs: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    pairs.sort();
    for (key, raw) in pairs {
        let rest = key[ENV_PREFIX.len()..].to_ascii_lowercase();
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw.clone()));
        if rest == "seed" {
            root.insert(rest, value);
            continue;
        }
        let (section, field) = rest
            .split_once('_')
            .ok_or_else(|| anyhow!("{key}: expected {ENV_PREFIX}<SECTION>_<FIELD>"))?;
        if !SECTIONS.contains(&section) {
            bail!("{key}: unknown config section `{section}`");
        }
        let slot = root.entry(section).or_insert_with(|| Value::Object(Map::new()));
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| anyhow!("{key}: config section `{section}` is not an object"))?;
        obj.insert(field.to_string(), value);
    }
    Ok(())
}

const SECTIONS: &[&str] = &["paths", "corpus", "model", "train", "sae", "audit", "report", "generate"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_keep_underscored_field_names() {
        let mut doc = serde_json::json!({"model": {"embed_dim": 8}});
        apply_env_overrides(
            &mut doc,
            [
                ("PIPELINE_MODEL_EMBED_DIM".to_string(), "16".to_string()),
                ("PIPELINE_SEED".to_string(), "9".to_string()),
                ("HOME".to_string(), "/root".to_string()),
            ],
        )
        .unwrap();
        assert_eq!(doc["model"]["embed_dim"], 16);
        assert_eq!(doc["seed"], 9);
    }

    #[test]
    fn unknown_section_is_rejected() {
        let mut doc = serde_json::json!({});
        let err = apply_env_overrides(&mut doc, [("PIPELINE_NOPE_X".into(), "1".into())]).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }
}
