use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::SubPlanKey;

/// Cardinality overrides for join sub-plans, with a per-key count of how
/// often each override has been perturbed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<RowCountEntry>", into = "Vec<RowCountEntry>")]
pub struct RowCountMap {
    rows: BTreeMap<SubPlanKey, f64>,
    perturbations: BTreeMap<SubPlanKey, u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowCountEntry {
    pub tables: SubPlanKey,
    pub rows: f64,
    pub perturbations: u32,
}

impl TryFrom<Vec<RowCountEntry>> for RowCountMap {
    type Error = Error;

    fn try_from(entries: Vec<RowCountEntry>) -> Result<Self> {
        let mut map = RowCountMap::default();
        for e in entries {
            map.set(e.tables.clone(), e.rows)?;
            map.perturbations.insert(e.tables, e.perturbations);
        }
        Ok(map)
    }
}

impl From<RowCountMap> for Vec<RowCountEntry> {
    fn from(map: RowCountMap) -> Self {
        map.rows
            .into_iter()
            .map(|(k, rows)| RowCountEntry {
                perturbations: map.perturbations.get(&k).copied().unwrap_or(0),
                tables: k,
                rows,
            })
            .collect()
    }
}

impl RowCountMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets an override. Only join sub-plans may be overridden and counts
    /// must be at least one row.
    pub fn set(&mut self, key: SubPlanKey, rows: f64) -> Result<()> {
        if !key.is_join() {
            return Err(Error::InvalidArgument(format!(
                "row-count overrides apply to joins only; got base key {key}"
            )));
        }
        if !(rows >= 1.0 && rows.is_finite()) {
            return Err(Error::InvalidArgument(format!("override for {key} must be >= 1, got {rows}")));
        }
        self.rows.insert(key, rows);
        Ok(())
    }

    pub fn get(&self, key: &SubPlanKey) -> Option<f64> {
        self.rows.get(key).copied()
    }

    pub fn perturbation_count(&self, key: &SubPlanKey) -> u32 {
        self.perturbations.get(key).copied().unwrap_or(0)
    }

    pub(crate) fn bump(&mut self, key: &SubPlanKey) {
        *self.perturbations.entry(key.clone()).or_insert(0) += 1;
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SubPlanKey, f64)> {
        self.rows.iter().map(|(k, v)| (k, *v))
    }
}
