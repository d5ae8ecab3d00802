use std::path::{Path, PathBuf};

use pqo::collect::CollectionPolicy;
use pqo::learn::ModelConfig;
use pqo::rce::RceParams;
use pqo::simdb::scenarios::ScenarioParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::PipelineError;

pub const CONFIG_VERSION: u64 = 1;

/// Instances whose binding in `slot` lies in the top `fraction` of the
/// workload's range for that slot. They are kept out of training and
/// reported separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Holdout {
    pub slot: usize,
    pub fraction: f64,
}

/// File names of every artifact, relative to `output_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Files {
    pub schema: String,
    pub workload: String,
    pub candidates: String,
    pub dataset: String,
    pub cover: String,
    pub collect_report: String,
    pub model: String,
    pub train_report: String,
    pub metrics: String,
    pub metrics_text: String,
    pub per_instance_csv: String,
}

impl Default for Files {
    fn default() -> Self {
        Files {
            schema: "schema.jsonl".into(),
            workload: "workload.jsonl".into(),
            candidates: "candidates.jsonl".into(),
            dataset: "dataset.jsonl".into(),
            cover: "cover.json".into(),
            collect_report: "collect_report.json".into(),
            model: "model.json".into(),
            train_report: "train_report.json".into(),
            metrics: "metrics.json".into(),
            metrics_text: "metrics.txt".into(),
            per_instance_csv: "per_instance.csv".into(),
        }
    }
}

/// Everything one pipeline run needs. The top-level `seed` replaces the
/// seeds of the nested sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub format_version: u64,
    pub seed: u64,
    pub scenario: ScenarioParams,
    pub instances: usize,
    #[serde(default)]
    pub rce: RceParams,
    #[serde(default)]
    pub collection: CollectionPolicy,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub holdout: Option<Holdout>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub files: Files,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        match v.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(CONFIG_VERSION) => {}
            Some(found) => {
                return Err(PipelineError::Config(format!(
                    "unsupported config format_version {found} (expected {CONFIG_VERSION})"
                )))
            }
            None => return Err(PipelineError::Config("config has no integer `format_version`".into())),
        }
        let cfg: PipelineConfig = serde_json::from_value(v).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.instances == 0 {
            return bad("`instances` must be positive".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("`train_fraction` must be in (0, 1), got {}", self.train_fraction));
        }
        if let Some(h) = &self.holdout {
            if !(h.fraction > 0.0 && h.fraction < 1.0) {
                return bad(format!("holdout fraction must be in (0, 1), got {}", h.fraction));
            }
        }
        if !(0.0..1.0).contains(&self.scenario.noise_level) {
            return bad(format!("noise level must be in [0, 1), got {}", self.scenario.noise_level));
        }
        let nested = [
            ("rce", self.rce_params().validate()),
            ("collection", self.collection_policy().validate()),
            ("model", self.model.validate()),
        ];
        for (name, r) in nested {
            if let Err(e) = r {
                return bad(format!("{name}: {e}"));
            }
        }
        Ok(())
    }

    pub fn rce_params(&self) -> RceParams {
        RceParams { seed: self.seed, ..self.rce.clone() }
    }

    pub fn collection_policy(&self) -> CollectionPolicy {
        CollectionPolicy { seed: self.seed, ..self.collection.clone() }
    }

    /// SHA-256 over the configuration without its output locations, so the
    /// same experiment written to two directories shares one digest.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
            o.remove("files");
        }
        let bytes = serde_json::to_vec(&v).expect("value serializes");
        hex::encode(&Sha256::digest(&bytes)[..16])
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}
