//! Speedup, tail and regression metrics over a latency table, plus
//! simulator-only comparisons against exact-cardinality plans.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataset::LatencyTable;
use crate::error::{Error, Result};
use crate::learn::PlanChoice;
use crate::optimizer::Optimizer;
use crate::plan::PlanFingerprint;
use crate::rce::CandidateSet;
use crate::simdb::SimDb;
use crate::types::Workload;

/// Latency used for a chosen plan: censored measurements count at their
/// timeout.
fn chosen_latency(table: &LatencyTable, instance: usize, plan: Option<&PlanFingerprint>) -> Result<f64> {
    match plan {
        None => Ok(table.default_latency(instance).ms),
        Some(fp) => table
            .latency(instance, fp)
            .map(|l| l.ms)
            .ok_or_else(|| Error::MissingRecord { instance, plan: fp.clone() }),
    }
}

fn check_instances(table: &LatencyTable, instances: &[usize]) -> Result<()> {
    if instances.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    if let Some(&i) = instances.iter().find(|&&i| i >= table.num_instances()) {
        return Err(Error::InvalidArgument(format!("no instance {i}")));
    }
    Ok(())
}

fn default_total(table: &LatencyTable, instances: &[usize]) -> f64 {
    instances.iter().map(|&i| table.default_latency(i).ms).sum()
}

/// Per-instance best uncensored latency over `plans` and the default plan.
pub fn oracle_latency(table: &LatencyTable, instance: usize, plans: &BTreeSet<&PlanFingerprint>) -> f64 {
    let d = table.default_plan(instance);
    let dl = table.default_latency(instance).ms;
    table.best_where(instance, |fp| fp == d || plans.contains(fp)).map_or(dl, |(_, l)| l.min(dl))
}

/// Total default latency over total per-instance best latency within
/// `plans` (the default plan is always included).
pub fn oracle_speedup(table: &LatencyTable, plans: &[PlanFingerprint], instances: &[usize]) -> Result<f64> {
    check_instances(table, instances)?;
    let set: BTreeSet<&PlanFingerprint> = plans.iter().collect();
    let best: f64 = instances.iter().map(|&i| oracle_latency(table, i, &set)).sum();
    Ok(default_total(table, instances) / best)
}

/// Total default latency over total latency of the chosen plans; `choices`
/// is indexed like `instances`.
pub fn model_speedup(table: &LatencyTable, choices: &[PlanChoice], instances: &[usize]) -> Result<f64> {
    check_instances(table, instances)?;
    check_len(choices, instances)?;
    let mut chosen = 0.0;
    for (c, &i) in choices.iter().zip(instances) {
        chosen += chosen_latency(table, i, c.plan.as_ref())?;
    }
    Ok(default_total(table, instances) / chosen)
}

fn check_len(choices: &[PlanChoice], instances: &[usize]) -> Result<()> {
    if choices.len() != instances.len() {
        return Err(Error::InvalidArgument(format!(
            "{} choices for {} instances",
            choices.len(),
            instances.len()
        )));
    }
    Ok(())
}

/// Nearest-rank percentile: the smallest value with at least `q` percent of
/// the values at or below it.
pub fn percentile_nearest_rank(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// P99 of default latencies over P99 of chosen latencies.
pub fn tail_speedup_p99(table: &LatencyTable, choices: &[PlanChoice], instances: &[usize]) -> Result<f64> {
    check_instances(table, instances)?;
    check_len(choices, instances)?;
    let d: Vec<f64> = instances.iter().map(|&i| table.default_latency(i).ms).collect();
    let c: Vec<f64> =
        choices.iter().zip(instances).map(|(c, &i)| chosen_latency(table, i, c.plan.as_ref())).collect::<Result<_>>()?;
    let pd = percentile_nearest_rank(&d, 99.0).expect("non-empty");
    let pc = percentile_nearest_rank(&c, 99.0).expect("non-empty");
    Ok(pd / pc)
}

/// Whether the choice for `instance` is at least `1 + threshold` times
/// slower than the default. A censored chosen plan counts: its true latency
/// is unknown beyond the timeout. Fallbacks never count.
fn is_regression(table: &LatencyTable, instance: usize, plan: Option<&PlanFingerprint>, threshold: f64) -> Result<bool> {
    let Some(fp) = plan else { return Ok(false) };
    let l = table.latency(instance, fp).ok_or_else(|| Error::MissingRecord { instance, plan: fp.clone() })?;
    Ok(l.censored || l.ms >= (1.0 + threshold) * table.default_latency(instance).ms)
}

/// Fraction of instances whose choice is a regression at `threshold`.
pub fn regression_frequency(
    table: &LatencyTable,
    choices: &[PlanChoice],
    instances: &[usize],
    threshold: f64,
) -> Result<f64> {
    check_instances(table, instances)?;
    check_len(choices, instances)?;
    let mut n = 0usize;
    for (c, &i) in choices.iter().zip(instances) {
        if is_regression(table, i, c.plan.as_ref(), threshold)? {
            n += 1;
        }
    }
    Ok(n as f64 / instances.len() as f64)
}

/// Total per-instance best latency over the best total of any single plan
/// measured on every instance.
pub fn single_best_plan_ratio(table: &LatencyTable, plans: &[PlanFingerprint], instances: &[usize]) -> Result<f64> {
    check_instances(table, instances)?;
    let set: BTreeSet<&PlanFingerprint> = plans.iter().collect();
    let oracle: f64 = instances.iter().map(|&i| oracle_latency(table, i, &set)).sum();
    let mut best_single = f64::INFINITY;
    for fp in &set {
        let total: Option<f64> = instances.iter().map(|&i| table.latency(i, fp).map(|l| l.ms)).sum();
        if let Some(t) = total {
            best_single = best_single.min(t);
        }
    }
    if !best_single.is_finite() {
        return Err(Error::InvalidArgument("no plan is measured on every instance".into()));
    }
    Ok(oracle / best_single)
}

pub fn geometric_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| !(*v > 0.0)) {
        return None;
    }
    Some((values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceOutcome {
    pub instance: usize,
    pub default_ms: f64,
    pub chosen_ms: f64,
    pub oracle_ms: f64,
    pub plan: Option<PlanFingerprint>,
    pub confidence: f64,
    /// `default_ms / chosen_ms`.
    pub speedup: f64,
    pub regression: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub s_opt: f64,
    pub s_model: f64,
    /// `s_model / s_opt`.
    pub capture: f64,
    pub p99_speedup: f64,
    pub p_reg: f64,
    pub fallbacks: usize,
    pub plan_cover_size: usize,
    pub single_best_plan_ratio: f64,
    pub per_instance: Vec<InstanceOutcome>,
}

/// All metrics of `choices` on `instances`, with `plans` as the oracle's
/// plan set.
pub fn metrics_report(
    table: &LatencyTable,
    plans: &[PlanFingerprint],
    choices: &[PlanChoice],
    instances: &[usize],
) -> Result<MetricsReport> {
    let s_opt = oracle_speedup(table, plans, instances)?;
    let s_model = model_speedup(table, choices, instances)?;
    let set: BTreeSet<&PlanFingerprint> = plans.iter().collect();
    let per_instance = choices
        .iter()
        .zip(instances)
        .map(|(c, &i)| {
            let chosen = chosen_latency(table, i, c.plan.as_ref())?;
            let d = table.default_latency(i).ms;
            Ok(InstanceOutcome {
                instance: i,
                default_ms: d,
                chosen_ms: chosen,
                oracle_ms: oracle_latency(table, i, &set),
                plan: c.plan.clone(),
                confidence: c.confidence,
                speedup: d / chosen,
                regression: is_regression(table, i, c.plan.as_ref(), 0.10)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        instances: instances.len(),
        s_opt,
        s_model,
        capture: s_model / s_opt,
        p99_speedup: tail_speedup_p99(table, choices, instances)?,
        p_reg: regression_frequency(table, choices, instances, 0.10)?,
        fallbacks: choices.iter().filter(|c| c.fallback()).count(),
        plan_cover_size: plans.len(),
        single_best_plan_ratio: single_best_plan_ratio(table, plans, instances).unwrap_or(f64::NAN),
        per_instance,
    })
}

/// Noiseless true latencies of one instance's reference plans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactComparisonRow {
    pub instance: usize,
    pub default_ms: f64,
    pub exact_ms: f64,
    pub best_rce_ms: f64,
    pub best_rce_plan: PlanFingerprint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactComparison {
    pub template_id: String,
    pub rows: Vec<ExactComparisonRow>,
    pub total_default_ms: f64,
    pub total_exact_ms: f64,
    pub total_best_rce_ms: f64,
}

/// Default, exact-cardinality and best candidate plan of every instance,
/// timed by the simulator without noise or timeouts.
pub fn exact_cardinality_comparison(db: &SimDb, workload: &Workload, candidates: &CandidateSet) -> Result<ExactComparison> {
    let mut rows = Vec::with_capacity(workload.len());
    for (i, q) in workload.instances.iter().enumerate() {
        let default_ms = db.noiseless_latency(&db.default_plan(q)?, q)?;
        let exact_ms = db.noiseless_latency(&db.exact_cardinality_plan(q)?, q)?;
        let mut best: Option<(f64, &PlanFingerprint)> = None;
        for c in candidates.candidates() {
            let l = db.noiseless_latency(&c.plan, q)?;
            if best.is_none_or(|(b, fp)| l < b || (l == b && &c.fingerprint < fp)) {
                best = Some((l, &c.fingerprint));
            }
        }
        let (best_rce_ms, fp) = best.ok_or_else(|| Error::InvalidArgument("empty candidate set".into()))?;
        rows.push(ExactComparisonRow { instance: i, default_ms, exact_ms, best_rce_ms, best_rce_plan: fp.clone() });
    }
    Ok(ExactComparison {
        template_id: db.template().template_id().to_string(),
        total_default_ms: rows.iter().map(|r| r.default_ms).sum(),
        total_exact_ms: rows.iter().map(|r| r.exact_ms).sum(),
        total_best_rce_ms: rows.iter().map(|r| r.best_rce_ms).sum(),
        rows,
    })
}

/// Oracle speedups when each instance may use every candidate, versus only
/// the plans its own evolution produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharingReport {
    pub s_opt_all: f64,
    pub s_opt_instance: f64,
    /// Fraction of instances whose best candidate came from another
    /// instance's evolution.
    pub shared_fraction: f64,
}

/// Plan-sharing analysis on noiseless simulator latencies.
pub fn plan_sharing(db: &SimDb, workload: &Workload, candidates: &CandidateSet) -> Result<SharingReport> {
    let produced = candidates.produced();
    let (mut d_total, mut all_total, mut own_total, mut shared) = (0.0, 0.0, 0.0, 0usize);
    for (i, q) in workload.instances.iter().enumerate() {
        let d = db.noiseless_latency(&db.default_plan(q)?, q)?;
        let mut best_all: Option<(f64, &PlanFingerprint)> = None;
        let mut best_own = d;
        for c in candidates.candidates() {
            let l = db.noiseless_latency(&c.plan, q)?;
            if best_all.is_none_or(|(b, fp)| l < b || (l == b && &c.fingerprint < fp)) {
                best_all = Some((l, &c.fingerprint));
            }
            if produced.get(i).is_some_and(|s| s.contains(&c.fingerprint)) {
                best_own = best_own.min(l);
            }
        }
        let (b, fp) = best_all.ok_or_else(|| Error::InvalidArgument("empty candidate set".into()))?;
        let b = b.min(d);
        if b < best_own && !produced.get(i).is_some_and(|s| s.contains(fp)) {
            shared += 1;
        }
        d_total += d;
        all_total += b;
        own_total += best_own;
    }
    Ok(SharingReport {
        s_opt_all: d_total / all_total,
        s_opt_instance: d_total / own_total,
        shared_fraction: shared as f64 / workload.len().max(1) as f64,
    })
}
