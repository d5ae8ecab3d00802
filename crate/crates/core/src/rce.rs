//! Row Count Evolution: candidate plans from perturbed join cardinalities.
//!
//! Starting from the optimizer's default plan, each generation samples parent
//! plans, multiplies the estimated row counts of their join sub-plans by
//! random powers of `exponent_base`, and asks the optimizer to replan under
//! the perturbed counts. Only plans never seen before survive.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Provenance;
use crate::error::{Error, Result};
use crate::jsonl::{self, FORMAT_VERSION};
use crate::optimizer::Optimizer;
use crate::plan::{PlanFingerprint, PlanTree};
use crate::rowcount::RowCountMap;
use crate::types::{QueryInstance, Workload};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RceParams {
    pub generations: u32,
    pub exponent_base: f64,
    pub exponent_range: u32,
    pub samples_per_generation: usize,
    pub perturbations_per_plan: usize,
    pub subplan_perturbation_limit: u32,
    pub per_instance_plan_limit: usize,
    pub total_plan_limit: usize,
    pub seed: u64,
}

impl Default for RceParams {
    fn default() -> Self {
        RceParams {
            generations: 3,
            exponent_base: 10.0,
            exponent_range: 2,
            samples_per_generation: 20,
            perturbations_per_plan: 20,
            subplan_perturbation_limit: 5,
            per_instance_plan_limit: 100,
            total_plan_limit: 500,
            seed: 0,
        }
    }
}

impl RceParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("rce: {m}")));
        if !(self.exponent_base > 1.0 && self.exponent_base.is_finite()) {
            return bad("exponent_base must be > 1");
        }
        if self.exponent_range < 1 {
            return bad("exponent_range must be >= 1");
        }
        if self.samples_per_generation < 1 || self.perturbations_per_plan < 1 {
            return bad("samples_per_generation and perturbations_per_plan must be >= 1");
        }
        if self.subplan_perturbation_limit < 1 {
            return bad("subplan_perturbation_limit must be >= 1");
        }
        if self.per_instance_plan_limit < 1 || self.total_plan_limit < 1 {
            return bad("plan limits must be >= 1");
        }
        Ok(())
    }

    /// The `2m + 1` multipliers available for an estimate of `w` rows.
    pub fn factors(&self, w: f64) -> Vec<f64> {
        let w = if w > 0.0 { w } else { 1.0 };
        let m = self.exponent_range as f64;
        let lo = -(w.log(self.exponent_base)).min(m);
        (0..=2 * self.exponent_range).map(|j| self.exponent_base.powf(lo + j as f64)).collect()
    }

    /// The perturbed row counts reachable from an estimate of `w` rows.
    pub fn candidate_counts(&self, w: f64) -> Vec<f64> {
        let w = if w > 0.0 { w } else { 1.0 };
        self.factors(w).into_iter().map(|f| perturbed(w, f)).collect()
    }
}

fn perturbed(w: f64, f: f64) -> f64 {
    // The tolerance keeps exact products such as 40 * 0.1 from flooring to 3.
    (w * f * (1.0 + 1e-12)).floor().max(1.0)
}

/// Perturbs every join sub-plan of `plan` whose perturbation budget in `r`
/// is not exhausted; other entries of `r` are inherited.
pub fn sample_perturbations(plan: &PlanTree, r: &RowCountMap, params: &RceParams, rng: &mut impl Rng) -> Result<RowCountMap> {
    let mut out = r.clone();
    for (key, w) in plan.join_subplans() {
        if out.perturbation_count(&key) >= params.subplan_perturbation_limit {
            continue;
        }
        let factors = params.factors(w);
        let f = factors[rng.random_range(0..factors.len())];
        let w = if w > 0.0 { w } else { 1.0 };
        out.set(key.clone(), perturbed(w, f))?;
        out.bump(&key);
    }
    Ok(out)
}

/// One candidate plan with the row counts that produce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub fingerprint: PlanFingerprint,
    pub plan: PlanTree,
    pub row_counts: RowCountMap,
    pub parent: Option<PlanFingerprint>,
    pub generation: u32,
    /// Workload position of the instance whose evolution first found it.
    pub instance: usize,
}

/// Row Count Evolution on one instance. `instance_index` only labels the
/// provenance of the returned candidates; generation 0 is the default plan.
pub fn row_count_evolution<O: Optimizer + ?Sized>(
    instance: &QueryInstance,
    instance_index: usize,
    optimizer: &O,
    params: &RceParams,
    rng: &mut impl Rng,
) -> Result<Vec<Candidate>> {
    params.validate()?;
    let default = optimizer.default_plan(instance)?;
    let mut seen = BTreeSet::from([default.fingerprint().clone()]);
    let mut out = vec![Candidate {
        fingerprint: default.fingerprint().clone(),
        plan: default,
        row_counts: RowCountMap::new(),
        parent: None,
        generation: 0,
        instance: instance_index,
    }];
    let mut prev: Vec<usize> = vec![0];
    'generations: for g in 1..=params.generations {
        if prev.is_empty() || out.len() >= params.per_instance_plan_limit {
            break;
        }
        let mut parents = Vec::with_capacity(params.samples_per_generation);
        while parents.len() < params.samples_per_generation {
            let mut pass = prev.clone();
            pass.shuffle(rng);
            let take = (params.samples_per_generation - parents.len()).min(pass.len());
            parents.extend_from_slice(&pass[..take]);
        }
        let mut next = Vec::new();
        for p in parents {
            for _ in 0..params.perturbations_per_plan {
                let parent = &out[p];
                let r = sample_perturbations(&parent.plan, &parent.row_counts, params, rng)?;
                let plan = optimizer.plan(instance, &r)?;
                if seen.insert(plan.fingerprint().clone()) {
                    let parent_fp = parent.fingerprint.clone();
                    next.push(out.len());
                    out.push(Candidate {
                        fingerprint: plan.fingerprint().clone(),
                        plan,
                        row_counts: r,
                        parent: Some(parent_fp),
                        generation: g,
                        instance: instance_index,
                    });
                    if out.len() >= params.per_instance_plan_limit {
                        break 'generations;
                    }
                }
            }
        }
        prev = next;
    }
    Ok(out)
}

/// Deterministic per-instance stream derived from the run seed.
pub fn instance_rng(seed: u64, instance: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(instance as u64);
    rng
}

/// Candidate plans for a workload with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    candidates: Vec<Candidate>,
    index: BTreeMap<PlanFingerprint, usize>,
    defaults: Vec<PlanFingerprint>,
    produced: Vec<BTreeSet<PlanFingerprint>>,
    pub provenance: Provenance,
}

impl CandidateSet {
    fn empty(n: usize) -> Self {
        CandidateSet {
            candidates: Vec::new(),
            index: BTreeMap::new(),
            defaults: Vec::with_capacity(n),
            produced: Vec::with_capacity(n),
            provenance: Provenance::default(),
        }
    }

    /// Adds one instance's evolution; `full == false` keeps only its default.
    fn absorb(&mut self, found: Vec<Candidate>, full: bool) {
        let default = found[0].fingerprint.clone();
        let mut produced = BTreeSet::new();
        for c in found.into_iter().take(if full { usize::MAX } else { 1 }) {
            produced.insert(c.fingerprint.clone());
            if !self.index.contains_key(&c.fingerprint) {
                self.index.insert(c.fingerprint.clone(), self.candidates.len());
                self.candidates.push(c);
            }
        }
        self.defaults.push(default);
        self.produced.push(produced);
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn get(&self, fp: &PlanFingerprint) -> Option<&Candidate> {
        self.index.get(fp).map(|&i| &self.candidates[i])
    }

    pub fn contains(&self, fp: &PlanFingerprint) -> bool {
        self.index.contains_key(fp)
    }

    pub fn fingerprints(&self) -> impl Iterator<Item = &PlanFingerprint> {
        self.candidates.iter().map(|c| &c.fingerprint)
    }

    /// Default plan of each workload instance.
    pub fn defaults(&self) -> &[PlanFingerprint] {
        &self.defaults
    }

    /// Plans found by each instance's own evolution, default included.
    pub fn produced(&self) -> &[BTreeSet<PlanFingerprint>] {
        &self.produced
    }

    /// Candidates of generation `g`.
    pub fn generation(&self, g: u32) -> impl Iterator<Item = &Candidate> {
        self.candidates.iter().filter(move |c| c.generation == g)
    }

    pub fn plans(&self) -> BTreeMap<PlanFingerprint, PlanTree> {
        self.candidates.iter().map(|c| (c.fingerprint.clone(), c.plan.clone())).collect()
    }

    pub fn to_writer<W: Write>(&self, out: &mut W) -> Result<()> {
        jsonl::write_line(
            out,
            &Header {
                format_version: FORMAT_VERSION,
                kind: "candidate_set".into(),
                provenance: self.provenance.clone(),
                defaults: self.defaults.clone(),
                produced: self.produced.clone(),
            },
        )?;
        for c in &self.candidates {
            jsonl::write_line(out, c)?;
        }
        Ok(())
    }

    pub fn from_reader<R: std::io::BufRead>(input: R) -> Result<Self> {
        let (h, candidates): (Header, Vec<Candidate>) = jsonl::read_lines(input)?;
        if h.kind != "candidate_set" {
            return Err(Error::format(1, format!("expected kind `candidate_set`, found `{}`", h.kind)));
        }
        let mut index = BTreeMap::new();
        for (i, c) in candidates.iter().enumerate() {
            if &c.fingerprint != c.plan.fingerprint() {
                return Err(Error::format(i + 2, "stored fingerprint does not match the plan"));
            }
            if index.insert(c.fingerprint.clone(), i).is_some() {
                return Err(Error::format(i + 2, format!("duplicate plan {}", c.fingerprint)));
            }
        }
        if h.defaults.len() != h.produced.len() {
            return Err(Error::format(1, "defaults and produced sets differ in length"));
        }
        for fp in h.defaults.iter().chain(h.produced.iter().flatten()) {
            if !index.contains_key(fp) {
                return Err(Error::UnknownPlan(fp.clone()));
            }
        }
        Ok(CandidateSet { candidates, index, defaults: h.defaults, produced: h.produced, provenance: h.provenance })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.to_writer(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u64,
    kind: String,
    provenance: Provenance,
    defaults: Vec<PlanFingerprint>,
    produced: Vec<BTreeSet<PlanFingerprint>>,
}

/// Row Count Evolution over a workload, unioned with global dedup.
///
/// Instances are evolved in parallel batches but merged in workload order,
/// so the result does not depend on scheduling. Once `total_plan_limit` is
/// reached, later instances contribute only their default plans.
pub fn workload_candidate_generation<O: Optimizer + ?Sized>(
    workload: &Workload,
    optimizer: &O,
    params: &RceParams,
) -> Result<CandidateSet> {
    params.validate()?;
    if workload.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    let n = workload.len();
    let mut set = CandidateSet::empty(n);
    let batch = rayon::current_num_threads().max(1) * 2;
    let mut start = 0;
    while start < n {
        if set.len() >= params.total_plan_limit {
            for i in start..n {
                let plan = optimizer.default_plan(&workload.instances[i])?;
                set.absorb(
                    vec![Candidate {
                        fingerprint: plan.fingerprint().clone(),
                        plan,
                        row_counts: RowCountMap::new(),
                        parent: None,
                        generation: 0,
                        instance: i,
                    }],
                    false,
                );
            }
            break;
        }
        let end = (start + batch).min(n);
        let results: Vec<Result<Vec<Candidate>>> = (start..end)
            .into_par_iter()
            .map(|i| row_count_evolution(&workload.instances[i], i, optimizer, params, &mut instance_rng(params.seed, i)))
            .collect();
        for (i, r) in (start..end).zip(results) {
            let found = r?;
            let full = set.len() < params.total_plan_limit;
            if !full {
                log::debug!("rce: plan limit reached; instance {i} keeps its default plan only");
            }
            set.absorb(found, full);
        }
        start = end;
    }
    Ok(set)
}
