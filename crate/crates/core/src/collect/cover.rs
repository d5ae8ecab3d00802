//! Greedy plan cover over the bootstrap instances.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::LatencyTable;
use crate::error::{Error, Result};
use crate::plan::PlanFingerprint;

/// Plans such that (almost) every bootstrap instance has one within a
/// `1 + epsilon` factor of its fastest observed latency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanCover {
    /// In greedy pick order.
    pub plans: Vec<PlanFingerprint>,
    /// Fraction of bootstrap instances covered.
    pub coverage: f64,
    /// Bootstrap instances (workload indices) each picked plan is
    /// near-optimal for.
    pub covered: BTreeMap<PlanFingerprint, BTreeSet<usize>>,
    pub bootstrap: Vec<usize>,
    pub epsilon: f64,
    pub delta: f64,
}

impl PlanCover {
    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn contains(&self, fp: &PlanFingerprint) -> bool {
        self.plans.contains(fp)
    }
}

/// Number of instances out of `n` that must be covered for `1 - delta`.
pub fn required_coverage(n: usize, delta: f64) -> usize {
    (((1.0 - delta) * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Greedy set cover over `sets` (each a set of element ids in `0..n`):
/// repeatedly takes the set with the most uncovered elements, lowest index
/// first on ties, until at least `required` elements are covered.
///
/// Returns the picked set indices, or the elements left uncovered when the
/// target is out of reach.
pub fn greedy_cover(sets: &[BTreeSet<usize>], n: usize, required: usize) -> std::result::Result<Vec<usize>, Vec<usize>> {
    let mut covered = BTreeSet::new();
    let mut picked = Vec::new();
    while covered.len() < required {
        let best = sets
            .iter()
            .enumerate()
            .map(|(i, s)| (i, s.difference(&covered).count()))
            .filter(|&(_, gain)| gain > 0)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((i, _)) => {
                covered.extend(sets[i].iter().copied());
                picked.push(i);
            }
            None => return Err((0..n).filter(|e| !covered.contains(e)).collect()),
        }
    }
    Ok(picked)
}

/// Greedy plan cover of the `bootstrap` instances over `candidates`.
///
/// Instance `i` is covered by plan `p` when `p`'s uncensored latency is
/// within `(1 + epsilon)` of the fastest uncensored latency seen for `i`.
/// Censored measurements never cover.
pub fn compute_plan_cover(
    table: &LatencyTable,
    bootstrap: &[usize],
    candidates: &[PlanFingerprint],
    epsilon: f64,
    delta: f64,
) -> Result<PlanCover> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("plan cover epsilon must be > 0, got {epsilon}")));
    }
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!("plan cover delta must be in [0, 1), got {delta}")));
    }
    if bootstrap.is_empty() {
        return Err(Error::EmptyWorkload);
    }
    let mut plans: Vec<PlanFingerprint> = candidates.to_vec();
    plans.sort();
    plans.dedup();
    let mut sets = vec![BTreeSet::new(); plans.len()];
    for (pos, &inst) in bootstrap.iter().enumerate() {
        let Some((_, fastest)) = table.best(inst) else {
            continue;
        };
        for (k, fp) in plans.iter().enumerate() {
            if let Some(l) = table.latency(inst, fp) {
                if !l.censored && l.ms <= (1.0 + epsilon) * fastest {
                    sets[k].insert(pos);
                }
            }
        }
    }
    let n = bootstrap.len();
    let required = required_coverage(n, delta);
    let picked = greedy_cover(&sets, n, required).map_err(|missing| Error::CoverUnreachable {
        target: 1.0 - delta,
        uncovered: missing.into_iter().map(|pos| bootstrap[pos]).collect(),
    })?;
    let mut all = BTreeSet::new();
    let mut covered = BTreeMap::new();
    for &k in &picked {
        all.extend(sets[k].iter().copied());
        covered.insert(plans[k].clone(), sets[k].iter().map(|&pos| bootstrap[pos]).collect());
    }
    Ok(PlanCover {
        plans: picked.iter().map(|&k| plans[k].clone()).collect(),
        coverage: all.len() as f64 / n as f64,
        covered,
        bootstrap: bootstrap.to_vec(),
        epsilon,
        delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(v: &[&[usize]]) -> Vec<BTreeSet<usize>> {
        v.iter().map(|s| s.iter().copied().collect()).collect()
    }

    #[test]
    fn greedy_picks_largest_then_lowest_index() {
        let s = sets(&[&[0, 1], &[2], &[1, 2]]);
        assert_eq!(greedy_cover(&s, 3, 3).unwrap(), vec![0, 1]);
        assert_eq!(greedy_cover(&s, 3, required_coverage(3, 0.34)).unwrap(), vec![0]);
    }

    #[test]
    fn unreachable_reports_missing() {
        let s = sets(&[&[0], &[1]]);
        assert_eq!(greedy_cover(&s, 3, 3).unwrap_err(), vec![2]);
    }

    #[test]
    fn required_rounds_up() {
        assert_eq!(required_coverage(100, 0.01), 99);
        assert_eq!(required_coverage(3, 0.0), 3);
        assert_eq!(required_coverage(3, 0.34), 2);
        assert_eq!(required_coverage(12, 0.01), 12);
    }
}
