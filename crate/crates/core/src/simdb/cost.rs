use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plan::{JoinOp, ScanOp};

/// Per-operator cost coefficients, in abstract work units per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostModel {
    pub seq_row: f64,
    pub index_probe: f64,
    pub index_row: f64,
    pub hash_build: f64,
    pub hash_probe: f64,
    pub nl_pair: f64,
    pub merge_sort: f64,
    pub merge_row: f64,
    pub output_row: f64,
    /// Latency per work unit.
    pub ms_per_unit: f64,
    /// Hidden multipliers applied when executing, never seen by the planner.
    pub distortion: Distortion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Distortion {
    pub seq_scan: f64,
    pub index_scan: f64,
    pub hash_join: f64,
    pub nested_loop: f64,
    pub merge_join: f64,
}

impl Default for Distortion {
    fn default() -> Self {
        Distortion { seq_scan: 1.0, index_scan: 1.0, hash_join: 1.0, nested_loop: 1.0, merge_join: 1.0 }
    }
}

impl Distortion {
    pub fn is_identity(&self) -> bool {
        *self == Distortion::default()
    }

    pub fn scan(&self, op: ScanOp) -> f64 {
        match op {
            ScanOp::SeqScan => self.seq_scan,
            ScanOp::IndexScan => self.index_scan,
        }
    }

    pub fn join(&self, op: JoinOp) -> f64 {
        match op {
            JoinOp::HashJoin => self.hash_join,
            JoinOp::NestedLoop => self.nested_loop,
            JoinOp::MergeJoin => self.merge_join,
        }
    }
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            seq_row: 1.0,
            index_probe: 4.0,
            index_row: 2.0,
            hash_build: 1.5,
            hash_probe: 1.0,
            nl_pair: 0.02,
            merge_sort: 0.1,
            merge_row: 0.5,
            output_row: 0.5,
            ms_per_unit: 1e-3,
            distortion: Distortion::default(),
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let d = &self.distortion;
        let all = [
            self.seq_row,
            self.index_probe,
            self.index_row,
            self.hash_build,
            self.hash_probe,
            self.nl_pair,
            self.merge_sort,
            self.merge_row,
            self.output_row,
            self.ms_per_unit,
            d.seq_scan,
            d.index_scan,
            d.hash_join,
            d.nested_loop,
            d.merge_join,
        ];
        if all.iter().all(|c| *c > 0.0 && c.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("cost coefficients and distortion factors must be positive".into()))
        }
    }

    /// Cost of scanning a table of `table_rows` rows that yields `out` rows.
    pub fn scan_cost(&self, op: ScanOp, table_rows: f64, out: f64) -> f64 {
        let work = match op {
            ScanOp::SeqScan => self.seq_row * table_rows,
            ScanOp::IndexScan => self.index_probe * (table_rows + 1.0).log2() + self.index_row * out,
        };
        work + self.output_row * out
    }

    /// Cost of one join node, excluding its inputs.
    pub fn join_cost(&self, op: JoinOp, left: f64, right: f64, out: f64) -> f64 {
        let work = match op {
            JoinOp::HashJoin => self.hash_build * right + self.hash_probe * left,
            JoinOp::NestedLoop => self.nl_pair * left * right,
            JoinOp::MergeJoin => {
                self.merge_sort * (left * (left + 1.0).log2() + right * (right + 1.0).log2())
                    + self.merge_row * (left + right)
            }
        };
        work + self.output_row * out
    }
}
