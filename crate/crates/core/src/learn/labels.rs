//! Near-optimality labels and example weights.

use serde::{Deserialize, Serialize};

use crate::dataset::LatencyTable;
use crate::error::{Error, Result};
use crate::plan::PlanFingerprint;

/// Whether a plan with latency `l_p` is near-optimal given the default
/// `l_d` and the best `l_o`.
///
/// When the default is at least as fast as every plan (`l_d <= l_o`), the
/// improvement inequality is vacuous and plans within `1 + tau` of `l_o`
/// count instead.
pub fn label_near_optimal(l_p: f64, l_d: f64, l_o: f64, tau: f64) -> bool {
    if l_d - l_o > 0.0 {
        (l_d - l_p) * (1.0 + tau) >= l_d - l_o
    } else {
        l_p <= l_o * (1.0 + tau)
    }
}

/// `c` for regressions, otherwise `1 + d * ln(max(l_d - l_p, 1))`.
pub fn example_weight(l_d: f64, l_p: f64, is_regression: bool, c: f64, d: f64) -> f64 {
    if is_regression {
        c
    } else {
        1.0 + d * (l_d - l_p).max(1.0).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelParams {
    pub tau: f64,
    pub regression_weight: f64,
    pub improvement_weight: f64,
}

impl Default for LabelParams {
    fn default() -> Self {
        LabelParams { tau: 0.05, regression_weight: 5.0, improvement_weight: 0.5 }
    }
}

impl LabelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.regression_weight >= 1.0) {
            return Err(Error::InvalidArgument(format!("C must be >= 1, got {}", self.regression_weight)));
        }
        if !(self.improvement_weight >= 0.0) {
            return Err(Error::InvalidArgument(format!("D must be >= 0, got {}", self.improvement_weight)));
        }
        Ok(())
    }
}

/// Per (instance, head plan) labels and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    pub heads: Vec<PlanFingerprint>,
    pub instances: Vec<usize>,
    pub labels: Vec<Vec<bool>>,
    pub weights: Vec<Vec<f64>>,
}

impl LabelMatrix {
    /// Labels `instances` against the `heads` plans. The best latency is
    /// taken over the heads' uncensored measurements. Censored or missing
    /// measurements are never positive; censored ones and plans slower than
    /// the default are regressions.
    pub fn build(table: &LatencyTable, instances: &[usize], heads: &[PlanFingerprint], p: &LabelParams) -> Result<Self> {
        p.validate()?;
        if heads.is_empty() {
            return Err(Error::Training("no plans to label".into()));
        }
        let mut labels = Vec::with_capacity(instances.len());
        let mut weights = Vec::with_capacity(instances.len());
        for &i in instances {
            if i >= table.num_instances() {
                return Err(Error::InvalidArgument(format!("no instance {i}")));
            }
            let l_d = table.default_latency(i).ms;
            let lat: Vec<_> = heads.iter().map(|h| table.latency(i, h)).collect();
            let l_o = lat.iter().flatten().filter(|l| !l.censored).map(|l| l.ms).fold(f64::INFINITY, f64::min);
            let mut row = Vec::with_capacity(heads.len());
            let mut w = Vec::with_capacity(heads.len());
            for l in &lat {
                match l {
                    Some(l) if !l.censored => {
                        let pos = label_near_optimal(l.ms, l_d, l_o, p.tau);
                        let reg = l.ms > l_d;
                        row.push(pos);
                        w.push(if pos || reg {
                            example_weight(l_d, l.ms, reg, p.regression_weight, p.improvement_weight)
                        } else {
                            1.0
                        });
                    }
                    Some(_) => {
                        row.push(false);
                        w.push(p.regression_weight);
                    }
                    None => {
                        row.push(false);
                        w.push(1.0);
                    }
                }
            }
            if !row.iter().any(|&b| b) {
                let k = lat
                    .iter()
                    .enumerate()
                    .filter_map(|(k, l)| l.map(|l| (k, l.ms)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(k, _)| k)
                    .ok_or_else(|| Error::MissingRecord { instance: i, plan: heads[0].clone() })?;
                row[k] = true;
            }
            labels.push(row);
            weights.push(w);
        }
        Ok(LabelMatrix { heads: heads.to_vec(), instances: instances.to_vec(), labels, weights })
    }
}
