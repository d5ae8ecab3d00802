//! Parametric query optimization toolkit.
//!
//! Candidate plans come from perturbing join cardinality estimates
//! ([`rce`]), are executed under adaptive timeouts and pruned to a plan
//! cover (`collect`), and feed a per-template best-plan classifier with
//! calibrated confidence (`learn`). [`simdb`] provides the optimizer and
//! executor behind the [`Optimizer`] trait.

pub mod collect;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod learn;
pub mod optimizer;
pub mod plan;
pub mod rce;
pub mod rowcount;
pub mod simdb;
pub mod types;

pub use dataset::{
    estimated_latency, export_dataset, import_dataset, ExecutionDataset, ExecutionRecord, Latency, LatencyTable,
    Measurement, Provenance, RunOutcome,
};
pub use error::{Error, Result};
pub use optimizer::Optimizer;
pub use plan::{plan_fingerprint, JoinOp, PlanFingerprint, PlanNode, PlanTree, ScanOp};
pub use rowcount::RowCountMap;
pub use types::{
    split_indices, split_workload, CmpOp, JoinEdge, ParamSpec, ParamType, ParamValue, Predicate, QueryInstance,
    QueryTemplate, SubPlanKey, Workload,
};
