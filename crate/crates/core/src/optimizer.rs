//! The seam between the pipeline and a database system.
//!
//! [`Optimizer`] is implemented by the built-in simulator
//! ([`crate::simdb::SimDb`]). A live-DBMS adapter would implement `plan` by
//! sending row-count hints to its optimizer and `run_once` by executing the
//! plan with join-order and operator hints under a statement timeout.

use crate::dataset::{Measurement, RunOutcome};
use crate::error::{Error, Result};
use crate::plan::PlanTree;
use crate::rowcount::RowCountMap;
use crate::types::{QueryInstance, QueryTemplate};

pub trait Optimizer: Sync {
    fn template(&self) -> &QueryTemplate;

    /// Cost-based plan for `instance` with `overrides` replacing the
    /// optimizer's own join cardinality estimates. Deterministic.
    fn plan(&self, instance: &QueryInstance, overrides: &RowCountMap) -> Result<PlanTree>;

    /// Executes `plan` once. `repeat` numbers the run so that repeated runs
    /// draw independent, reproducible noise.
    fn run_once(
        &self,
        plan: &PlanTree,
        instance: &QueryInstance,
        timeout_ms: f64,
        seed: u64,
        repeat: u32,
    ) -> Result<RunOutcome>;

    fn default_plan(&self, instance: &QueryInstance) -> Result<PlanTree> {
        self.plan(instance, &RowCountMap::new())
    }

    /// Runs `plan` up to `repeats` times under one timeout, stopping at the
    /// first censored run.
    fn execute(
        &self,
        plan: &PlanTree,
        instance: &QueryInstance,
        timeout_ms: f64,
        repeats: u32,
        seed: u64,
    ) -> Result<Measurement> {
        if !(timeout_ms > 0.0) {
            return Err(Error::InvalidArgument(format!("timeout must be positive, got {timeout_ms}")));
        }
        if repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be at least 1".into()));
        }
        let mut runs = Vec::with_capacity(repeats as usize);
        for r in 0..repeats {
            let run = self.run_once(plan, instance, timeout_ms, seed, r)?;
            runs.push(run);
            if run.censored {
                break;
            }
        }
        Measurement::from_runs(&runs, &vec![timeout_ms; runs.len()])
    }
}
