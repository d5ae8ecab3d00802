//! Instance featurization: standardized numerics and dates, vocabulary
//! embeddings for strings, or estimator selectivities.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ExecutionDataset, LatencyTable};
use crate::error::{Error, Result};
use crate::simdb::{ColumnDef, Schema};
use crate::types::{CmpOp, ParamType, ParamValue, QueryInstance, QueryTemplate};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Parameter values themselves.
    #[default]
    Values,
    /// The estimator's selectivity of each parameterized predicate.
    Selectivity,
}

/// Most useful values of one string parameter, plus hashed buckets for
/// everything else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub slot: usize,
    pub values: Vec<String>,
    pub oov_buckets: usize,
}

impl Vocabulary {
    /// Ranks the values of string slot `slot` over `instances` by the total
    /// latency the oracle-best plan saves over the default plan on instances
    /// carrying that value; keeps the top `k`. Ties go to the smaller value.
    pub fn build(
        instances: &[QueryInstance],
        table: &LatencyTable,
        indices: &[usize],
        slot: usize,
        k: usize,
        oov_buckets: usize,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("vocabulary size must be at least 1".into()));
        }
        let mut score: std::collections::BTreeMap<&str, f64> = Default::default();
        for &i in indices {
            let q = instances.get(i).ok_or_else(|| Error::InvalidArgument(format!("no instance {i}")))?;
            let Some(ParamValue::String(v)) = q.bindings.get(slot) else {
                return Err(Error::InvalidArgument(format!("parameter slot {slot} is not string-typed")));
            };
            let d = table.default_latency(i).ms;
            let best = table.best(i).map_or(d, |(_, b)| b);
            *score.entry(v.as_str()).or_insert(0.0) += (d - best).max(0.0);
        }
        let mut ranked: Vec<(&str, f64)> = score.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Vocabulary {
            slot,
            values: ranked.into_iter().take(k).map(|(v, _)| v.to_string()).collect(),
            oov_buckets: oov_buckets.max(1),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() + self.oov_buckets
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row of `value`: its rank, or a hashed bucket after the ranked values.
    pub fn index(&self, value: &str) -> usize {
        match self.values.iter().position(|v| v == value) {
            Some(i) => i,
            None => {
                let h = Sha256::digest(value.as_bytes());
                let x = u64::from_le_bytes(h[..8].try_into().expect("8 bytes"));
                self.values.len() + (x % self.oov_buckets as u64) as usize
            }
        }
    }
}

/// Vocabulary of the values ranked by total latency improvement, over a
/// whole dataset, with four out-of-vocabulary buckets.
pub fn build_vocabulary(ds: &ExecutionDataset, slot: usize, k: usize) -> Result<Vocabulary> {
    let table = LatencyTable::from_dataset(ds)?;
    let all: Vec<usize> = (0..ds.instances.len()).collect();
    Vocabulary::build(&ds.instances, &table, &all, slot, k, 4)
}

/// Marginal selectivity of one parameterized predicate, with everything
/// needed to evaluate it for new bindings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectivityModel {
    pub op: CmpOp,
    pub segments: Vec<f64>,
    pub column: ColumnDef,
}

impl SelectivityModel {
    pub fn selectivity(&self, v: &ParamValue) -> f64 {
        let per = self.column.segment_selectivity(self.op, v);
        self.segments.iter().zip(per).map(|(w, s)| w * s).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotFeature {
    Numeric { mean: f64, std: f64 },
    /// Days since 1970-01-01, standardized.
    Date { mean: f64, std: f64 },
    Embedding { vocabulary: Vocabulary, dim: usize },
    /// log10 of the estimated selectivity, standardized.
    Selectivity { mean: f64, std: f64, model: SelectivityModel },
}

/// Network input of one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub dense: Vec<f64>,
    /// One vocabulary row per embedded slot, in slot order.
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturizerState {
    pub mode: FeatureMode,
    pub slots: Vec<SlotFeature>,
}

const SELECTIVITY_FLOOR: f64 = 1e-12;

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

fn raw_scalar(v: &ParamValue) -> Option<f64> {
    match v {
        ParamValue::Int(x) => Some(*x as f64),
        ParamValue::Float(x) => Some(*x),
        ParamValue::Date(d) => Some((*d - epoch()).num_days() as f64),
        ParamValue::String(_) => None,
    }
}

fn standardize(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-9 { std } else { 1.0 })
}

/// Fit options for [`FeaturizerState::fit`].
#[derive(Clone, Debug)]
pub struct FeaturizerConfig {
    pub mode: FeatureMode,
    pub vocabulary_size: usize,
    pub oov_buckets: usize,
    pub embedding_dim: usize,
}

impl FeaturizerState {
    /// Fits normalization and vocabularies on the `indices` instances.
    /// Selectivity mode needs the schema the estimator runs on.
    pub fn fit(
        template: &QueryTemplate,
        instances: &[QueryInstance],
        table: &LatencyTable,
        indices: &[usize],
        config: &FeaturizerConfig,
        schema: Option<&Schema>,
    ) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyWorkload);
        }
        let mut slots = Vec::new();
        for (slot, spec) in template.param_specs().iter().enumerate() {
            let values: Vec<&ParamValue> = indices.iter().map(|&i| &instances[i].bindings[slot]).collect();
            let f = match config.mode {
                FeatureMode::Selectivity => {
                    let schema = schema.ok_or_else(|| {
                        Error::InvalidArgument("selectivity features need the schema".into())
                    })?;
                    let p = template
                        .predicates()
                        .iter()
                        .find(|p| p.slot == slot)
                        .ok_or_else(|| Error::InvalidTemplate(format!("slot {slot} has no predicate")))?;
                    let t = schema.table(&p.table)?;
                    let model = SelectivityModel {
                        op: p.op,
                        segments: t.segments.clone(),
                        column: schema.column(&p.table, &p.column)?.clone(),
                    };
                    let xs: Vec<f64> = values.iter().map(|v| model.selectivity(v).max(SELECTIVITY_FLOOR).log10()).collect();
                    let (mean, std) = standardize(&xs);
                    SlotFeature::Selectivity { mean, std, model }
                }
                FeatureMode::Values => match spec.ty {
                    ParamType::String => SlotFeature::Embedding {
                        vocabulary: Vocabulary::build(
                            instances,
                            table,
                            indices,
                            slot,
                            config.vocabulary_size,
                            config.oov_buckets,
                        )?,
                        dim: config.embedding_dim,
                    },
                    ty => {
                        let xs: Vec<f64> = values.iter().filter_map(|v| raw_scalar(v)).collect();
                        if xs.len() != values.len() {
                            return Err(Error::InvalidInstance(format!("slot {slot} binding is not {ty:?}")));
                        }
                        let (mean, std) = standardize(&xs);
                        if ty == ParamType::Date {
                            SlotFeature::Date { mean, std }
                        } else {
                            SlotFeature::Numeric { mean, std }
                        }
                    }
                },
            };
            slots.push(f);
        }
        Ok(FeaturizerState { mode: config.mode, slots })
    }

    pub fn dense_dim(&self) -> usize {
        self.slots.iter().filter(|s| !matches!(s, SlotFeature::Embedding { .. })).count()
    }

    /// `(vocabulary rows, dimension)` of each embedding, in slot order.
    pub fn embeddings(&self) -> Vec<(usize, usize)> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                SlotFeature::Embedding { vocabulary, dim } => Some((vocabulary.len(), *dim)),
                _ => None,
            })
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.dense_dim() + self.embeddings().iter().map(|e| e.1).sum::<usize>()
    }

    pub fn transform(&self, instance: &QueryInstance) -> Result<Features> {
        if instance.bindings.len() != self.slots.len() {
            return Err(Error::InvalidInstance(format!(
                "{} bindings for {} parameters",
                instance.bindings.len(),
                self.slots.len()
            )));
        }
        let mut dense = Vec::with_capacity(self.dense_dim());
        let mut tokens = Vec::new();
        for (slot, (f, v)) in self.slots.iter().zip(&instance.bindings).enumerate() {
            let mismatch = || Error::InvalidInstance(format!("slot {slot} has the wrong type"));
            match f {
                SlotFeature::Numeric { mean, std } => match v {
                    ParamValue::Int(_) | ParamValue::Float(_) => dense.push((raw_scalar(v).unwrap_or(0.0) - mean) / std),
                    _ => return Err(mismatch()),
                },
                SlotFeature::Date { mean, std } => match v {
                    ParamValue::Date(_) => dense.push((raw_scalar(v).unwrap_or(0.0) - mean) / std),
                    _ => return Err(mismatch()),
                },
                SlotFeature::Embedding { vocabulary, .. } => match v {
                    ParamValue::String(s) => tokens.push(vocabulary.index(s)),
                    _ => return Err(mismatch()),
                },
                SlotFeature::Selectivity { mean, std, model } => {
                    dense.push((model.selectivity(v).max(SELECTIVITY_FLOOR).log10() - mean) / std)
                }
            }
        }
        Ok(Features { dense, tokens })
    }
}
