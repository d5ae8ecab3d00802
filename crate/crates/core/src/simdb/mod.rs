//! A deterministic simulated database: synthetic schema, an
//! independence-assuming cardinality estimator, a cost-based DP planner that
//! honours row-count overrides, and a latency model driven by true
//! cardinalities.

pub mod cardinality;
pub mod cost;
pub mod planner;
pub mod scenarios;
pub mod schema;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use cardinality::{estimate_cardinality, true_cardinality, BoundQuery, CardinalityMode, CardinalityOracle, JoinModel};
pub use cost::{CostModel, Distortion};
pub use planner::Planner;
pub use scenarios::{Scenario, ScenarioKind, ScenarioParams};
pub use schema::{ColumnDef, IndexDef, JoinDef, Schema, TableDef};

use crate::dataset::RunOutcome;
use crate::error::{Error, Result};
use crate::optimizer::Optimizer;
use crate::plan::PlanTree;
use crate::rowcount::RowCountMap;
use crate::types::{QueryInstance, QueryTemplate, SubPlanKey};

/// The simulated optimizer and executor for one template.
#[derive(Clone, Debug)]
pub struct SimDb {
    schema: Schema,
    planner: Planner,
    model: JoinModel,
    noise_level: f64,
}

impl SimDb {
    pub fn new(schema: Schema, template: QueryTemplate, cost: CostModel, noise_level: f64) -> Result<Self> {
        schema.validate()?;
        cost.validate()?;
        if !(0.0..1.0).contains(&noise_level) {
            return Err(Error::InvalidArgument(format!("noise level must be in [0, 1), got {noise_level}")));
        }
        let planner = Planner::new(&schema, &template, &cost)?;
        let model = JoinModel::new(&schema, &template)?;
        Ok(SimDb { schema, planner, model, noise_level })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    pub fn cost_model(&self) -> &CostModel {
        self.planner.cost_model()
    }

    pub fn noise_level(&self) -> f64 {
        self.noise_level
    }

    pub fn bind(&self, instance: &QueryInstance) -> Result<BoundQuery<'_>> {
        self.model.bind(&self.schema, self.planner.template(), instance)
    }

    pub fn true_cardinality(&self, instance: &QueryInstance, sub: &SubPlanKey) -> Result<f64> {
        true_cardinality(&self.schema, self.planner.template(), instance, sub)
    }

    pub fn estimate_cardinality(&self, instance: &QueryInstance, sub: &SubPlanKey, overrides: &RowCountMap) -> Result<f64> {
        estimate_cardinality(&self.schema, self.planner.template(), instance, sub, overrides)
    }

    fn estimator<'a>(&'a self, q: &'a BoundQuery<'a>, overrides: &'a RowCountMap) -> impl Fn(u32) -> f64 + 'a {
        move |mask: u32| {
            if mask.count_ones() >= 2 {
                if let Some(r) = overrides.get(&self.planner.template().key_of(mask)) {
                    return r;
                }
            }
            q.estimated_rows(mask)
        }
    }

    /// The plan chosen when every sub-plan, base tables included, is given
    /// its true cardinality.
    pub fn exact_cardinality_plan(&self, instance: &QueryInstance) -> Result<PlanTree> {
        let q = self.bind(instance)?;
        self.planner.best_plan(&|m| q.true_rows(m))
    }

    /// Row-count overrides holding the true cardinality of every connected
    /// join sub-plan.
    pub fn true_overrides(&self, instance: &QueryInstance) -> Result<RowCountMap> {
        let q = self.bind(instance)?;
        let t = self.planner.template();
        let mut map = RowCountMap::new();
        for mask in 1..=t.full_mask() {
            if mask.count_ones() >= 2 && t.is_connected(mask) {
                map.set(t.key_of(mask), q.true_rows(mask).max(1.0))?;
            }
        }
        Ok(map)
    }

    /// Planner cost of `plan` under the estimator with `overrides`.
    pub fn estimated_cost(&self, plan: &PlanTree, instance: &QueryInstance, overrides: &RowCountMap) -> Result<f64> {
        let q = self.bind(instance)?;
        let est = self.estimator(&q, overrides);
        self.planner.plan_cost(plan.root(), &est, None)
    }

    /// Planner cost of `plan` under true cardinalities, without distortion.
    pub fn true_cost(&self, plan: &PlanTree, instance: &QueryInstance) -> Result<f64> {
        let q = self.bind(instance)?;
        self.planner.plan_cost(plan.root(), &|m| q.true_rows(m), None)
    }

    /// Latency of `plan` before noise.
    pub fn noiseless_latency(&self, plan: &PlanTree, instance: &QueryInstance) -> Result<f64> {
        let q = self.bind(instance)?;
        self.latency_of(plan, &q)
    }

    fn latency_of(&self, plan: &PlanTree, q: &BoundQuery<'_>) -> Result<f64> {
        plan.check_template(self.planner.template())?;
        let c = self.planner.plan_cost(plan.root(), &|m| q.true_rows(m), Some(&self.cost_model().distortion))?;
        Ok(c * self.cost_model().ms_per_unit)
    }

    fn noise(&self, instance: &QueryInstance, plan: &PlanTree, seed: u64, repeat: u32) -> Result<f64> {
        if self.noise_level == 0.0 {
            return Ok(0.0);
        }
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(serde_json::to_vec(instance)?);
        h.update(plan.fingerprint().as_str().as_bytes());
        h.update(repeat.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        Ok(rng.random_range(-self.noise_level..=self.noise_level))
    }
}

impl Optimizer for SimDb {
    fn template(&self) -> &QueryTemplate {
        self.planner.template()
    }

    fn plan(&self, instance: &QueryInstance, overrides: &RowCountMap) -> Result<PlanTree> {
        let q = self.bind(instance)?;
        let t = self.planner.template();
        for (key, _) in overrides.iter() {
            t.mask_of(key)?;
        }
        let est = self.estimator(&q, overrides);
        self.planner.best_plan(&est)
    }

    fn run_once(&self, plan: &PlanTree, instance: &QueryInstance, timeout_ms: f64, seed: u64, repeat: u32) -> Result<RunOutcome> {
        if !(timeout_ms > 0.0) {
            return Err(Error::InvalidArgument(format!("timeout must be positive, got {timeout_ms}")));
        }
        let base = self.noiseless_latency(plan, instance)?;
        let latency = base * (1.0 + self.noise(instance, plan, seed, repeat)?);
        Ok(if latency > timeout_ms {
            RunOutcome { latency_ms: timeout_ms, censored: true }
        } else {
            RunOutcome { latency_ms: latency, censored: false }
        })
    }
}
