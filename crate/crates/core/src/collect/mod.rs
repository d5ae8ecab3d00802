//! Training-data collection under adaptive timeouts with online plan-cover
//! pruning.
//!
//! Collection runs in three phases: the default plan of every instance,
//! then every candidate on a bootstrap prefix of the (optionally
//! tail-reordered) workload, then only the plan cover on the remaining
//! instances.

mod cover;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cover::{compute_plan_cover, greedy_cover, required_coverage, PlanCover};

use crate::dataset::{ExecutionDataset, ExecutionRecord, Latency, LatencyTable, Measurement, Provenance, RunOutcome};
use crate::error::{Error, Result};
use crate::optimizer::Optimizer;
use crate::plan::{PlanFingerprint, PlanTree};
use crate::types::{QueryInstance, Workload};

/// Instances collected concurrently between history updates. Fixed so that
/// results do not depend on the worker count.
const BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectionPolicy {
    pub repeats: u32,
    pub timeout_slack: f64,
    pub plan_cover_epsilon: f64,
    pub plan_cover_delta: f64,
    pub bootstrap_instances: usize,
    pub tail_reorder: bool,
    /// Seed for execution noise.
    pub seed: u64,
}

impl Default for CollectionPolicy {
    fn default() -> Self {
        CollectionPolicy {
            repeats: 3,
            timeout_slack: 1.1,
            plan_cover_epsilon: 0.2,
            plan_cover_delta: 0.01,
            bootstrap_instances: 100,
            tail_reorder: true,
            seed: 0,
        }
    }
}

impl CollectionPolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if !(self.timeout_slack > 1.0) || !self.timeout_slack.is_finite() {
            return bad(format!("timeout_slack must be > 1, got {}", self.timeout_slack));
        }
        if !(self.plan_cover_epsilon > 0.0) {
            return bad(format!("plan_cover_epsilon must be > 0, got {}", self.plan_cover_epsilon));
        }
        if !(0.0..1.0).contains(&self.plan_cover_delta) {
            return bad(format!("plan_cover_delta must be in [0, 1), got {}", self.plan_cover_delta));
        }
        if self.bootstrap_instances == 0 {
            return bad("bootstrap_instances must be at least 1".into());
        }
        Ok(())
    }
}

/// Running mean of estimated latencies per plan, across instances.
#[derive(Clone, Debug, Default)]
pub struct History {
    sums: BTreeMap<PlanFingerprint, (f64, usize)>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, plan: &PlanFingerprint, latency_ms: f64) {
        let e = self.sums.entry(plan.clone()).or_insert((0.0, 0));
        e.0 += latency_ms;
        e.1 += 1;
    }

    pub fn mean(&self, plan: &PlanFingerprint) -> Option<f64> {
        self.sums.get(plan).map(|&(s, n)| s / n as f64)
    }

    /// Plans by ascending mean, unseen plans last, ties by fingerprint.
    pub fn order<'a>(&self, plans: impl IntoIterator<Item = &'a PlanTree>) -> Vec<&'a PlanTree> {
        let mut v: Vec<(Option<f64>, &PlanTree)> = plans.into_iter().map(|p| (self.mean(p.fingerprint()), p)).collect();
        v.sort_by(|(ma, a), (mb, b)| {
            let key = |m: &Option<f64>| m.unwrap_or(f64::INFINITY);
            key(ma).total_cmp(&key(mb)).then_with(|| a.fingerprint().cmp(b.fingerprint()))
        });
        v.into_iter().map(|(_, p)| p).collect()
    }

    fn observe_all(&mut self, records: &[ExecutionRecord]) -> Result<()> {
        for r in records {
            self.observe(&r.plan, r.estimated_latency()?.ms);
        }
        Ok(())
    }
}

/// Positions of `default_latencies` by descending latency, stable on ties.
pub fn tail_order(default_latencies: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..default_latencies.len()).collect();
    idx.sort_by(|&a, &b| default_latencies[b].total_cmp(&default_latencies[a]));
    idx
}

/// Reorders a workload so the slowest default latencies come first.
pub fn tail_reorder(w: &Workload, default_latencies: &[f64]) -> Result<Workload> {
    if w.len() != default_latencies.len() {
        return Err(Error::InvalidArgument(format!(
            "{} default latencies for {} instances",
            default_latencies.len(),
            w.len()
        )));
    }
    Ok(w.subset(&tail_order(default_latencies)))
}

/// Records of one instance plus execution accounting.
#[derive(Clone, Debug, Default)]
pub struct InstanceCollection {
    /// Default plan first, then in execution order.
    pub records: Vec<ExecutionRecord>,
    pub runs: usize,
    pub executed_ms: f64,
    /// Runs skipped because a plan was censored before its last repeat.
    pub runs_saved: usize,
    pub diagnostics: Vec<String>,
}

struct Runner<'a, O: ?Sized> {
    executor: &'a O,
    policy: &'a CollectionPolicy,
    instance: &'a QueryInstance,
    best: f64,
    out: InstanceCollection,
}

impl<O: Optimizer + ?Sized> Runner<'_, O> {
    /// Runs `plan` up to `k` times: first run untimed, later runs under
    /// `slack * best latency so far`.
    fn measure(&mut self, plan: &PlanTree) -> Result<Measurement> {
        let k = self.policy.repeats;
        let mut runs = Vec::with_capacity(k as usize);
        let mut timeouts = Vec::with_capacity(k as usize);
        for r in 0..k {
            let timeout = if r == 0 || !self.best.is_finite() { f64::INFINITY } else { self.policy.timeout_slack * self.best };
            let run: RunOutcome = self.executor.run_once(plan, self.instance, timeout, self.policy.seed, r)?;
            self.out.runs += 1;
            self.out.executed_ms += run.latency_ms;
            runs.push(run);
            timeouts.push(timeout);
            if run.censored {
                self.out.runs_saved += (k - r - 1) as usize;
                break;
            }
            self.best = self.best.min(run.latency_ms);
        }
        Measurement::from_runs(&runs, &timeouts)
    }
}

/// Collects one instance: the default plan first (or `prior_default` when
/// it was already measured), then the other plans in ascending historical
/// latency. A failing non-default plan is skipped with a diagnostic.
#[allow(clippy::too_many_arguments)]
pub fn collect_instance<O: Optimizer + ?Sized>(
    instance_index: usize,
    instance: &QueryInstance,
    default: &PlanFingerprint,
    plans: &[&PlanTree],
    executor: &O,
    policy: &CollectionPolicy,
    history: &History,
    prior_default: Option<&Measurement>,
) -> Result<InstanceCollection> {
    let default_plan = plans
        .iter()
        .find(|p| p.fingerprint() == default)
        .ok_or_else(|| Error::UnknownPlan(default.clone()))?;
    let mut runner = Runner { executor, policy, instance, best: f64::INFINITY, out: InstanceCollection::default() };
    let m = match prior_default {
        Some(m) => m.clone(),
        None => runner.measure(default_plan)?,
    };
    let d = ExecutionRecord::new(instance_index, default.clone(), m)?;
    if !d.censored {
        runner.best = d.latencies_ms.iter().copied().fold(runner.best, f64::min);
    }
    runner.out.records.push(d);
    let mut seen = BTreeSet::from([default.clone()]);
    let others: Vec<&PlanTree> = plans.iter().copied().filter(|p| seen.insert(p.fingerprint().clone())).collect();
    for plan in history.order(others) {
        match runner.measure(plan).and_then(|m| ExecutionRecord::new(instance_index, plan.fingerprint().clone(), m)) {
            Ok(r) => runner.out.records.push(r),
            Err(e) => {
                let msg = format!("instance {instance_index}, plan {}: {e}", plan.fingerprint().short());
                log::warn!("skipping record: {msg}");
                runner.out.diagnostics.push(msg);
            }
        }
    }
    Ok(runner.out)
}

/// Execution accounting of one collection.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectReport {
    pub instances: usize,
    pub bootstrap_instances: usize,
    pub candidate_plans: usize,
    pub cover_size: usize,
    pub cover_coverage: f64,
    pub tail_reorder: bool,
    /// Plan runs per phase: defaults, bootstrap matrix, cover on the rest.
    pub runs_default: usize,
    pub runs_bootstrap: usize,
    pub runs_remaining: usize,
    pub runs_total: usize,
    pub executed_ms: f64,
    pub censored_records: usize,
    pub runs_saved_by_timeouts: usize,
    /// Runs the remaining instances would have needed on every candidate
    /// without timeouts, minus the runs actually made on them.
    pub runs_saved_by_cover: usize,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Collection {
    pub dataset: ExecutionDataset,
    pub cover: PlanCover,
    pub report: CollectReport,
    /// Workload indices in processing order; the first
    /// `report.bootstrap_instances` form the bootstrap prefix.
    pub order: Vec<usize>,
}

/// Three-phase collection of `workload` over `candidates`.
pub fn collect_training_data<O: Optimizer + ?Sized>(
    workload: &Workload,
    candidates: &BTreeMap<PlanFingerprint, PlanTree>,
    executor: &O,
    policy: &CollectionPolicy,
    provenance: Provenance,
) -> Result<Collection> {
    policy.validate()?;
    if workload.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate plans".into()));
    }
    let template = executor.template();
    for p in candidates.values() {
        p.check_template(template)?;
    }
    let n = workload.len();

    let phase1: Vec<(PlanTree, InstanceCollection)> = workload
        .instances
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let d = executor.default_plan(q)?;
            let c = collect_instance(i, q, d.fingerprint(), &[&d], executor, policy, &History::new(), None)?;
            Ok((d, c))
        })
        .collect::<Result<_>>()?;
    let mut plans = candidates.clone();
    let mut default_plans = Vec::with_capacity(n);
    let mut per_instance: Vec<InstanceCollection> = Vec::with_capacity(n);
    for (d, c) in phase1 {
        default_plans.push(d.fingerprint().clone());
        plans.entry(d.fingerprint().clone()).or_insert(d);
        per_instance.push(c);
    }
    let mut report = CollectReport {
        instances: n,
        candidate_plans: candidates.len(),
        tail_reorder: policy.tail_reorder,
        runs_default: per_instance.iter().map(|c| c.runs).sum(),
        ..CollectReport::default()
    };

    let default_ms: Vec<f64> =
        per_instance.iter().map(|c| c.records[0].estimated_latency().map(|l| l.ms)).collect::<Result<_>>()?;
    let order = if policy.tail_reorder { tail_order(&default_ms) } else { (0..n).collect() };
    let n_boot = policy.bootstrap_instances.min(n);
    let (boot, rest) = order.split_at(n_boot);
    let mut history = History::new();
    for c in &per_instance {
        history.observe_all(&c.records)?;
    }

    let all: Vec<&PlanTree> = candidates.values().collect();
    let runs = run_phase(workload, boot, &all, &default_plans, &plans, executor, policy, &mut history, &mut per_instance)?;
    report.runs_bootstrap = runs;

    let mut rows: Vec<BTreeMap<PlanFingerprint, Latency>> = vec![BTreeMap::new(); n];
    for (i, c) in per_instance.iter().enumerate() {
        for r in &c.records {
            let l = r.estimated_latency()?;
            rows[i].entry(r.plan.clone()).and_modify(|cur| *cur = cur.merge(l)).or_insert(l);
        }
    }
    let table = LatencyTable::from_parts(rows, default_plans.clone())?;
    let keys: Vec<PlanFingerprint> = candidates.keys().cloned().collect();
    let cover = compute_plan_cover(&table, boot, &keys, policy.plan_cover_epsilon, policy.plan_cover_delta)?;
    report.cover_size = cover.len();
    report.cover_coverage = cover.coverage;
    report.bootstrap_instances = n_boot;

    let cover_plans: Vec<&PlanTree> = cover.plans.iter().map(|fp| &candidates[fp]).collect();
    let runs = run_phase(workload, rest, &cover_plans, &default_plans, &plans, executor, policy, &mut history, &mut per_instance)?;
    report.runs_remaining = runs;
    let full: usize = rest
        .iter()
        .map(|&i| candidates.keys().filter(|fp| **fp != default_plans[i]).count() * policy.repeats as usize)
        .sum();
    report.runs_saved_by_cover = full.saturating_sub(runs);

    let mut records = Vec::new();
    for c in &mut per_instance {
        report.runs_saved_by_timeouts += c.runs_saved;
        report.executed_ms += c.executed_ms;
        report.diagnostics.append(&mut c.diagnostics);
        records.append(&mut c.records);
    }
    report.runs_total = report.runs_default + report.runs_bootstrap + report.runs_remaining;
    report.censored_records = records.iter().filter(|r| r.censored).count();
    let used: BTreeSet<&PlanFingerprint> = records.iter().map(|r| &r.plan).collect();
    let plans = plans.into_iter().filter(|(fp, _)| used.contains(fp)).collect();
    let dataset = ExecutionDataset {
        template: template.clone(),
        instances: workload.instances.clone(),
        default_plans,
        plans,
        records,
        provenance,
    };
    dataset.validate()?;
    Ok(Collection { dataset, cover, report, order })
}

/// Runs `extra` plans (plus each instance's default, already measured) on
/// `indices`, in fixed-size batches that share one history snapshot.
/// Returns the number of plan runs made.
#[allow(clippy::too_many_arguments)]
fn run_phase<O: Optimizer + ?Sized>(
    workload: &Workload,
    indices: &[usize],
    extra: &[&PlanTree],
    default_plans: &[PlanFingerprint],
    plans: &BTreeMap<PlanFingerprint, PlanTree>,
    executor: &O,
    policy: &CollectionPolicy,
    history: &mut History,
    per_instance: &mut [InstanceCollection],
) -> Result<usize> {
    let mut runs = 0;
    for batch in indices.chunks(BATCH) {
        let snapshot = history.clone();
        let done: Vec<InstanceCollection> = batch
            .par_iter()
            .map(|&i| {
                let d = &default_plans[i];
                let mut list: Vec<&PlanTree> = vec![&plans[d]];
                list.extend(extra.iter().copied());
                let prior = Measurement {
                    latencies_ms: per_instance[i].records[0].latencies_ms.clone(),
                    censored: per_instance[i].records[0].censored,
                    timeout_ms: per_instance[i].records[0].timeout_ms,
                };
                collect_instance(i, &workload.instances[i], d, &list, executor, policy, &snapshot, Some(&prior))
            })
            .collect::<Result<_>>()?;
        for (&i, mut c) in batch.iter().zip(done) {
            history.observe_all(&c.records[1..])?;
            runs += c.runs;
            let slot = &mut per_instance[i];
            slot.records.extend(c.records.drain(1..));
            slot.runs += c.runs;
            slot.executed_ms += c.executed_ms;
            slot.runs_saved += c.runs_saved;
            slot.diagnostics.append(&mut c.diagnostics);
        }
    }
    Ok(runs)
}
