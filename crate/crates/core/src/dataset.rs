//! Execution records and the line-delimited execution dataset.
//!
//! File layout: the first line is a header holding the template, the
//! per-instance bindings and default plans, the plan table and provenance;
//! every following line is one [`ExecutionRecord`]. See `docs/formats.md`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{self, FORMAT_VERSION};
use crate::plan::{PlanFingerprint, PlanTree};
use crate::types::{ParamValue, QueryInstance, QueryTemplate, Workload};

/// Outcome of running one plan `k` times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub latencies_ms: Vec<f64>,
    pub censored: bool,
    pub timeout_ms: Option<f64>,
}

/// One timed run of a plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunOutcome {
    pub latency_ms: f64,
    pub censored: bool,
}

impl Measurement {
    /// Folds a sequence of runs into a measurement. `runs` ends at the first
    /// censored run, if any; `timeouts[i]` is the timeout run `i` executed
    /// under.
    ///
    /// A censored run yields a censored measurement only when every completed
    /// run is at least as slow as its timeout; otherwise the completed runs are
    /// a valid uncensored measurement and the censored run is dropped.
    pub fn from_runs(runs: &[RunOutcome], timeouts: &[f64]) -> Result<Measurement> {
        debug_assert_eq!(runs.len(), timeouts.len());
        let Some(last) = runs.last() else {
            return Err(Error::EmptyLatencies);
        };
        let done: Vec<f64> = runs.iter().filter(|r| !r.censored).map(|r| r.latency_ms).collect();
        if !last.censored {
            let tightest = timeouts.iter().copied().filter(|t| t.is_finite()).fold(None, |a: Option<f64>, t| {
                Some(a.map_or(t, |a| a.min(t)))
            });
            return Ok(Measurement { latencies_ms: done, censored: false, timeout_ms: tightest });
        }
        let timeout = timeouts[runs.len() - 1];
        if done.iter().any(|&l| l < timeout) {
            let tightest = timeouts[..runs.len() - 1].iter().copied().filter(|t| t.is_finite()).fold(
                None,
                |a: Option<f64>, t| Some(a.map_or(t, |a| a.min(t))),
            );
            return Ok(Measurement { latencies_ms: done, censored: false, timeout_ms: tightest });
        }
        let mut latencies = done;
        latencies.push(timeout);
        Ok(Measurement { latencies_ms: latencies, censored: true, timeout_ms: Some(timeout) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub instance: usize,
    pub plan: PlanFingerprint,
    pub latencies_ms: Vec<f64>,
    pub censored: bool,
    pub timeout_ms: Option<f64>,
}

/// Estimated latency of a plan on an instance. A censored value is a lower
/// bound on the true latency.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Latency {
    pub ms: f64,
    pub censored: bool,
}

impl Latency {
    pub fn exact(ms: f64) -> Self {
        Latency { ms, censored: false }
    }

    /// Combines two estimates of the same (instance, plan) pair.
    pub(crate) fn merge(self, other: Latency) -> Latency {
        match (self.censored, other.censored) {
            (false, false) => Latency::exact(self.ms.min(other.ms)),
            (false, true) => self,
            (true, false) => other,
            (true, true) => Latency { ms: self.ms.max(other.ms), censored: true },
        }
    }
}

impl ExecutionRecord {
    pub fn new(instance: usize, plan: PlanFingerprint, m: Measurement) -> Result<Self> {
        let r = ExecutionRecord {
            instance,
            plan,
            latencies_ms: m.latencies_ms,
            censored: m.censored,
            timeout_ms: m.timeout_ms,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latencies_ms.is_empty() {
            return Err(Error::EmptyLatencies);
        }
        if let Some(bad) = self.latencies_ms.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument(format!("latency {bad} is not a positive finite value")));
        }
        if self.censored {
            let Some(t) = self.timeout_ms else {
                return Err(Error::InvalidArgument("censored record without a timeout".into()));
            };
            let min = self.latencies_ms.iter().copied().fold(f64::INFINITY, f64::min);
            if min < t {
                return Err(Error::InvalidArgument(format!(
                    "censored record has latency {min} below its timeout {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn estimated_latency(&self) -> Result<Latency> {
        estimated_latency(self)
    }
}

/// Minimum over repeats; censored records report their timeout.
pub fn estimated_latency(record: &ExecutionRecord) -> Result<Latency> {
    if record.latencies_ms.is_empty() {
        return Err(Error::EmptyLatencies);
    }
    if record.censored {
        let t = record
            .timeout_ms
            .ok_or_else(|| Error::InvalidArgument("censored record without a timeout".into()))?;
        return Ok(Latency { ms: t, censored: true });
    }
    let min = record.latencies_ms.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Latency::exact(min))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExecutionDataset {
    pub template: QueryTemplate,
    pub instances: Vec<QueryInstance>,
    /// Default plan of each instance, frozen at collection time.
    pub default_plans: Vec<PlanFingerprint>,
    pub plans: BTreeMap<PlanFingerprint, PlanTree>,
    pub records: Vec<ExecutionRecord>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u64,
    kind: String,
    template: QueryTemplate,
    provenance: Provenance,
    instances: Vec<InstanceEntry>,
    plans: Vec<PlanEntry>,
}

#[derive(Serialize, Deserialize)]
struct InstanceEntry {
    bindings: Vec<ParamValue>,
    default_plan: PlanFingerprint,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct PlanEntry {
    pub fingerprint: PlanFingerprint,
    pub plan: PlanTree,
}

const KIND: &str = "execution_dataset";

impl ExecutionDataset {
    pub fn workload(&self) -> Workload {
        Workload {
            template_id: self.template.template_id().to_string(),
            instances: self.instances.clone(),
        }
    }

    pub fn num_instances(&self) -> usize {
        self.instances.len()
    }

    /// Checks plan-table closure, instance indices and default coverage.
    pub fn validate(&self) -> Result<()> {
        if self.default_plans.len() != self.instances.len() {
            return Err(Error::InvalidArgument(format!(
                "{} default plans for {} instances",
                self.default_plans.len(),
                self.instances.len()
            )));
        }
        for q in &self.instances {
            q.check(&self.template)?;
        }
        for fp in &self.default_plans {
            if !self.plans.contains_key(fp) {
                return Err(Error::UnknownPlan(fp.clone()));
            }
        }
        let mut has_default = vec![false; self.instances.len()];
        for r in &self.records {
            r.validate()?;
            if r.instance >= self.instances.len() {
                return Err(Error::InvalidArgument(format!(
                    "record references instance {} of {}",
                    r.instance,
                    self.instances.len()
                )));
            }
            if !self.plans.contains_key(&r.plan) {
                return Err(Error::UnknownPlan(r.plan.clone()));
            }
            if r.plan == self.default_plans[r.instance] {
                has_default[r.instance] = true;
            }
        }
        if let Some(i) = has_default.iter().position(|h| !h) {
            return Err(Error::MissingRecord { instance: i, plan: self.default_plans[i].clone() });
        }
        Ok(())
    }

    pub fn to_writer<W: Write>(&self, out: &mut W) -> Result<()> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: KIND.to_string(),
            template: self.template.clone(),
            provenance: self.provenance.clone(),
            instances: self
                .instances
                .iter()
                .zip(&self.default_plans)
                .map(|(q, d)| InstanceEntry { bindings: q.bindings.clone(), default_plan: d.clone() })
                .collect(),
            plans: self
                .plans
                .iter()
                .map(|(fp, p)| PlanEntry { fingerprint: fp.clone(), plan: p.clone() })
                .collect(),
        };
        jsonl::write_line(out, &header)?;
        for r in &self.records {
            jsonl::write_line(out, r)?;
        }
        Ok(())
    }

    pub fn from_reader<R: std::io::BufRead>(input: R) -> Result<Self> {
        let (header, records): (Header, Vec<ExecutionRecord>) = jsonl::read_lines(input)?;
        if header.kind != KIND {
            return Err(Error::format(1, format!("expected kind `{KIND}`, found `{}`", header.kind)));
        }
        let template_id = header.template.template_id().to_string();
        let mut plans = BTreeMap::new();
        for e in header.plans {
            if e.plan.fingerprint() != &e.fingerprint {
                return Err(Error::format(
                    1,
                    format!("plan table entry {} does not match its plan's fingerprint", e.fingerprint),
                ));
            }
            plans.insert(e.fingerprint, e.plan);
        }
        for (i, r) in records.iter().enumerate() {
            r.validate().map_err(|e| Error::format(i + 2, e.to_string()))?;
        }
        let ds = ExecutionDataset {
            instances: header
                .instances
                .iter()
                .map(|e| QueryInstance::new(template_id.clone(), e.bindings.clone()))
                .collect(),
            default_plans: header.instances.into_iter().map(|e| e.default_plan).collect(),
            template: header.template,
            plans,
            records,
            provenance: header.provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the dataset; the inverse of [`ExecutionDataset::read`].
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.to_writer(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.to_writer(&mut buf)?;
        Ok(buf)
    }
}

pub fn export_dataset(ds: &ExecutionDataset, path: impl AsRef<Path>) -> Result<()> {
    ds.write(path)
}

pub fn import_dataset(path: impl AsRef<Path>) -> Result<ExecutionDataset> {
    ExecutionDataset::read(path)
}

/// Per-instance latency function derived from a dataset: the minimum over
/// all repeats of all records of a pair, censored values as lower bounds.
#[derive(Clone, Debug)]
pub struct LatencyTable {
    rows: Vec<BTreeMap<PlanFingerprint, Latency>>,
    defaults: Vec<PlanFingerprint>,
}

impl LatencyTable {
    pub fn from_dataset(ds: &ExecutionDataset) -> Result<Self> {
        let mut rows: Vec<BTreeMap<PlanFingerprint, Latency>> = vec![BTreeMap::new(); ds.instances.len()];
        for r in &ds.records {
            let l = r.estimated_latency()?;
            let row = rows.get_mut(r.instance).ok_or_else(|| {
                Error::InvalidArgument(format!("record references unknown instance {}", r.instance))
            })?;
            row.entry(r.plan.clone()).and_modify(|cur| *cur = cur.merge(l)).or_insert(l);
        }
        for (i, d) in ds.default_plans.iter().enumerate() {
            if !rows[i].contains_key(d) {
                return Err(Error::MissingRecord { instance: i, plan: d.clone() });
            }
        }
        Ok(LatencyTable { rows, defaults: ds.default_plans.clone() })
    }

    /// Builds a table directly; used by tests and tools that synthesize
    /// latency matrices.
    pub fn from_parts(rows: Vec<BTreeMap<PlanFingerprint, Latency>>, defaults: Vec<PlanFingerprint>) -> Result<Self> {
        if rows.len() != defaults.len() {
            return Err(Error::InvalidArgument("one default plan per instance required".into()));
        }
        for (i, d) in defaults.iter().enumerate() {
            if !rows[i].contains_key(d) {
                return Err(Error::MissingRecord { instance: i, plan: d.clone() });
            }
        }
        Ok(LatencyTable { rows, defaults })
    }

    pub fn num_instances(&self) -> usize {
        self.rows.len()
    }

    pub fn latency(&self, instance: usize, plan: &PlanFingerprint) -> Option<Latency> {
        self.rows.get(instance)?.get(plan).copied()
    }

    pub fn default_plan(&self, instance: usize) -> &PlanFingerprint {
        &self.defaults[instance]
    }

    pub fn default_latency(&self, instance: usize) -> Latency {
        self.rows[instance][&self.defaults[instance]]
    }

    pub fn row(&self, instance: usize) -> &BTreeMap<PlanFingerprint, Latency> {
        &self.rows[instance]
    }

    /// Fastest uncensored plan of an instance among plans accepted by `keep`;
    /// ties go to the smaller fingerprint.
    pub fn best_where(
        &self,
        instance: usize,
        mut keep: impl FnMut(&PlanFingerprint) -> bool,
    ) -> Option<(&PlanFingerprint, f64)> {
        let mut best: Option<(&PlanFingerprint, f64)> = None;
        for (fp, l) in &self.rows[instance] {
            if l.censored || !keep(fp) {
                continue;
            }
            if best.is_none_or(|(_, b)| l.ms < b) {
                best = Some((fp, l.ms));
            }
        }
        best
    }

    pub fn best(&self, instance: usize) -> Option<(&PlanFingerprint, f64)> {
        self.best_where(instance, |_| true)
    }
}
