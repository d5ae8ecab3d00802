//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use rand::Rng;

use pqo::simdb::SimDb;
use pqo::{
    Error, JoinEdge, JoinOp, Latency, LatencyTable, Optimizer, ParamSpec, ParamType, PlanFingerprint, PlanNode,
    PlanTree, Predicate, QueryInstance, QueryTemplate, Result, RowCountMap, RunOutcome, ScanOp,
};

pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

/// Smallest number of `sets` whose union has at least `required` elements,
/// by exhaustive search. `None` when even all sets fall short.
pub fn min_cover_size(sets: &[BTreeSet<usize>], required: usize) -> Option<usize> {
    let k = sets.len();
    let mut best: Option<usize> = None;
    for pick in 0u32..(1 << k) {
        let size = pick.count_ones() as usize;
        if best.is_some_and(|b| size >= b) {
            continue;
        }
        let mut u = BTreeSet::new();
        for (i, s) in sets.iter().enumerate() {
            if pick & (1 << i) != 0 {
                u.extend(s.iter().copied());
            }
        }
        if u.len() >= required {
            best = Some(size);
        }
    }
    best
}

/// Every bushy plan over connected sub-plans of `db`'s template, with every
/// available scan and join operator.
pub fn enumerate_plans(db: &SimDb) -> Vec<PlanTree> {
    let t = db.planner().template().clone();
    let mut memo: BTreeMap<u32, Vec<PlanNode>> = BTreeMap::new();
    let nodes = subplans(db, &t, t.full_mask(), &mut memo);
    nodes.into_iter().map(|n| PlanTree::new(n).expect("well-formed")).collect()
}

fn subplans(db: &SimDb, t: &QueryTemplate, mask: u32, memo: &mut BTreeMap<u32, Vec<PlanNode>>) -> Vec<PlanNode> {
    if let Some(v) = memo.get(&mask) {
        return v.clone();
    }
    let mut out = Vec::new();
    if mask.count_ones() == 1 {
        let i = mask.trailing_zeros() as usize;
        for &op in db.planner().scan_ops(i) {
            out.push(PlanNode::scan(t.tables()[i].clone(), op, 1.0));
        }
    } else {
        let mut sub = (mask - 1) & mask;
        while sub > 0 {
            let other = mask ^ sub;
            if t.is_connected(sub) && t.is_connected(other) {
                let ls = subplans(db, t, sub, memo);
                let rs = subplans(db, t, other, memo);
                for l in &ls {
                    for r in &rs {
                        for op in JoinOp::ALL {
                            out.push(PlanNode::join(op, 1.0, l.clone(), r.clone()));
                        }
                    }
                }
            }
            sub = (sub - 1) & mask;
        }
    }
    memo.insert(mask, out.clone());
    out
}

/// Cost of a plan from the cost model's operator formulas, with every node's
/// output size given by `rows` over table bitmasks.
pub fn reference_cost(db: &SimDb, node: &PlanNode, rows: &dyn Fn(u32) -> f64, distorted: bool) -> (f64, u32) {
    let cm = db.cost_model();
    let t = db.planner().template();
    match node {
        PlanNode::Scan { table, op, .. } => {
            let i = t.table_index(table).unwrap();
            let base = db.schema().table(table).unwrap().row_count as f64;
            let m = 1u32 << i;
            let f = if distorted { cm.distortion.scan(*op) } else { 1.0 };
            (cm.scan_cost(*op, base, rows(m)) * f, m)
        }
        PlanNode::Join { op, left, right, .. } => {
            let (cl, ml) = reference_cost(db, left, rows, distorted);
            let (cr, mr) = reference_cost(db, right, rows, distorted);
            let m = ml | mr;
            let f = if distorted { cm.distortion.join(*op) } else { 1.0 };
            (cl + cr + cm.join_cost(*op, rows(ml), rows(mr), rows(m)) * f, m)
        }
    }
}

pub fn fp(plan: &PlanNode) -> PlanFingerprint {
    pqo::plan_fingerprint(plan).unwrap()
}

/// Two-table template `a ⋈ b` with an integer predicate on `a.p`.
pub fn two_table_template() -> QueryTemplate {
    QueryTemplate::new(
        "t2",
        vec!["a".into(), "b".into()],
        vec![JoinEdge { left: "a".into(), left_column: "k".into(), right: "b".into(), right_column: "k".into() }],
        vec![Predicate { table: "a".into(), column: "p".into(), op: pqo::CmpOp::Eq, slot: 0 }],
        vec![ParamSpec { ty: ParamType::Int, table: "a".into(), column: "p".into() }],
    )
    .unwrap()
}

/// All 24 physical plans of the two-table template.
pub fn two_table_plans() -> Vec<PlanTree> {
    let mut out = Vec::new();
    for (l, r) in [("a", "b"), ("b", "a")] {
        for sl in [ScanOp::SeqScan, ScanOp::IndexScan] {
            for sr in [ScanOp::SeqScan, ScanOp::IndexScan] {
                for op in JoinOp::ALL {
                    let n = PlanNode::join(op, 1.0, PlanNode::scan(l, sl, 1.0), PlanNode::scan(r, sr, 1.0));
                    out.push(PlanTree::new(n).unwrap());
                }
            }
        }
    }
    out
}

pub fn instance(v: i64) -> QueryInstance {
    QueryInstance::new("t2", vec![pqo::ParamValue::Int(v)])
}

/// Optimizer over the two-table template with scripted behavior: the
/// default plan is `plans[0]`; an override on `a⋈b` of `r` rows selects
/// `plans[route(instance, r)]`. Executions return fixed latencies per plan
/// and are logged.
pub struct Scripted {
    pub template: QueryTemplate,
    pub plans: Vec<PlanTree>,
    pub route: fn(i64, f64) -> usize,
    pub latency: BTreeMap<PlanFingerprint, f64>,
    pub log: Mutex<Vec<(i64, PlanFingerprint, f64)>>,
}

impl Scripted {
    pub fn new(route: fn(i64, f64) -> usize) -> Self {
        Scripted {
            template: two_table_template(),
            plans: two_table_plans(),
            route,
            latency: BTreeMap::new(),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn runs(&self) -> Vec<(i64, PlanFingerprint, f64)> {
        self.log.lock().unwrap().clone()
    }
}

fn binding(q: &QueryInstance) -> i64 {
    match q.bindings[0] {
        pqo::ParamValue::Int(v) => v,
        _ => 0,
    }
}

impl Optimizer for Scripted {
    fn template(&self) -> &QueryTemplate {
        &self.template
    }

    fn plan(&self, q: &QueryInstance, overrides: &RowCountMap) -> Result<PlanTree> {
        let k = overrides.iter().next().map_or(0, |(_, r)| (self.route)(binding(q), r));
        Ok(self.plans[k % self.plans.len()].clone())
    }

    fn run_once(&self, plan: &PlanTree, q: &QueryInstance, timeout_ms: f64, _seed: u64, _repeat: u32) -> Result<RunOutcome> {
        let l = *self.latency.get(plan.fingerprint()).ok_or_else(|| Error::UnknownPlan(plan.fingerprint().clone()))?;
        self.log.lock().unwrap().push((binding(q), plan.fingerprint().clone(), timeout_ms));
        Ok(if l > timeout_ms {
            RunOutcome { latency_ms: timeout_ms, censored: true }
        } else {
            RunOutcome { latency_ms: l, censored: false }
        })
    }
}

/// Synthetic fingerprints `p00`, `p01`, ... in sorted order.
pub fn fake_fps(n: usize) -> Vec<PlanFingerprint> {
    (0..n).map(|i| serde_json::from_value(serde_json::json!(format!("p{i:02}"))).unwrap()).collect()
}

/// Latency table from a dense matrix; `None` leaves a cell unmeasured.
/// Column 0 is every instance's default plan.
pub fn table(rows: &[Vec<Option<f64>>]) -> LatencyTable {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    let fps = fake_fps(width);
    let maps = rows
        .iter()
        .map(|r| r.iter().enumerate().filter_map(|(j, l)| l.map(|l| (fps[j].clone(), Latency::exact(l)))).collect())
        .collect();
    LatencyTable::from_parts(maps, vec![fps[0].clone(); rows.len()]).unwrap()
}

/// `n` instances over `k` plans with per-plan base latencies and
/// occasional large slowdowns.
pub fn random_table(rng: &mut impl Rng, n: usize, k: usize) -> LatencyTable {
    let base: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..3.0)).collect();
    let rows: Vec<Vec<Option<f64>>> = (0..n)
        .map(|_| {
            (0..k)
                .map(|j| {
                    let mut l = base[j] * rng.random_range(0.5..1.5);
                    if rng.random_bool(0.3) {
                        l *= rng.random_range(2.0..10.0);
                    }
                    Some(l)
                })
                .collect()
        })
        .collect();
    table(&rows)
}

/// Per plan, the instances it serves within `1 + eps` of their best.
pub fn near_optimal_sets(t: &LatencyTable, n: usize, fps: &[PlanFingerprint], eps: f64) -> Vec<BTreeSet<usize>> {
    fps.iter()
        .map(|fp| {
            (0..n)
                .filter(|&i| {
                    let best = t.row(i).values().map(|l| l.ms).fold(f64::INFINITY, f64::min);
                    t.latency(i, fp).unwrap().ms <= (1.0 + eps) * best
                })
                .collect()
        })
        .collect()
}
