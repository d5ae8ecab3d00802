//! Fully specified physical plans and their structural fingerprints.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{QueryTemplate, SubPlanKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScanOp {
    SeqScan,
    IndexScan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum JoinOp {
    HashJoin,
    NestedLoop,
    MergeJoin,
}

impl JoinOp {
    pub const ALL: [JoinOp; 3] = [JoinOp::HashJoin, JoinOp::NestedLoop, JoinOp::MergeJoin];
}

impl ScanOp {
    fn tag(self) -> &'static str {
        match self {
            ScanOp::SeqScan => "seq",
            ScanOp::IndexScan => "idx",
        }
    }
}

impl JoinOp {
    fn tag(self) -> &'static str {
        match self {
            JoinOp::HashJoin => "hash",
            JoinOp::NestedLoop => "nl",
            JoinOp::MergeJoin => "merge",
        }
    }
}

/// A plan node. `rows` is the optimizer's estimated output cardinality and
/// takes no part in plan identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum PlanNode {
    Scan {
        table: String,
        op: ScanOp,
        rows: f64,
    },
    Join {
        op: JoinOp,
        rows: f64,
        left: Box<PlanNode>,
        right: Box<PlanNode>,
    },
}

impl PlanNode {
    pub fn scan(table: impl Into<String>, op: ScanOp, rows: f64) -> Self {
        PlanNode::Scan { table: table.into(), op, rows }
    }

    pub fn join(op: JoinOp, rows: f64, left: PlanNode, right: PlanNode) -> Self {
        PlanNode::Join { op, rows, left: Box::new(left), right: Box::new(right) }
    }

    pub fn rows(&self) -> f64 {
        match self {
            PlanNode::Scan { rows, .. } | PlanNode::Join { rows, .. } => *rows,
        }
    }

    /// Sorted table names under this node.
    pub fn table_set(&self) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        self.collect_tables(&mut out);
        out
    }

    fn collect_tables<'a>(&'a self, out: &mut BTreeSet<&'a str>) {
        match self {
            PlanNode::Scan { table, .. } => {
                out.insert(table.as_str());
            }
            PlanNode::Join { left, right, .. } => {
                left.collect_tables(out);
                right.collect_tables(out);
            }
        }
    }

    fn leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            PlanNode::Scan { table, .. } => out.push(table),
            PlanNode::Join { left, right, .. } => {
                left.leaves(out);
                right.leaves(out);
            }
        }
    }

    /// Pre-order canonical form: operator then the sorted table set of the node.
    fn write_canonical(&self, out: &mut String) {
        match self {
            PlanNode::Scan { table, op, .. } => {
                out.push_str(op.tag());
                out.push('[');
                out.push_str(table);
                out.push(']');
            }
            PlanNode::Join { op, left, right, .. } => {
                out.push_str(op.tag());
                out.push('[');
                let tables: Vec<&str> = self.table_set().into_iter().collect();
                out.push_str(&tables.join(","));
                out.push_str("](");
                left.write_canonical(out);
                out.push(';');
                right.write_canonical(out);
                out.push(')');
            }
        }
    }

    fn check_structure(&self) -> Result<()> {
        let mut leaves = Vec::new();
        self.leaves(&mut leaves);
        let mut seen = BTreeSet::new();
        for t in &leaves {
            if !seen.insert(*t) {
                return Err(Error::MalformedPlan(format!("table `{t}` appears in more than one leaf")));
            }
        }
        self.check_rows()
    }

    fn check_rows(&self) -> Result<()> {
        let rows = self.rows();
        if !(rows >= 0.0 && rows.is_finite()) {
            return Err(Error::MalformedPlan(format!("invalid cardinality annotation {rows}")));
        }
        if let PlanNode::Join { left, right, .. } = self {
            left.check_rows()?;
            right.check_rows()?;
        }
        Ok(())
    }
}

/// Fixed-width digest of a plan's operators and join order.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlanFingerprint(String);

impl PlanFingerprint {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Short prefix for human-readable reports.
    pub fn short(&self) -> &str {
        &self.0[..8.min(self.0.len())]
    }
}

impl fmt::Display for PlanFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Structural hash of a plan node; cardinality annotations are ignored.
pub fn plan_fingerprint(root: &PlanNode) -> Result<PlanFingerprint> {
    root.check_structure()?;
    Ok(fingerprint_unchecked(root))
}

pub(crate) fn fingerprint_unchecked(root: &PlanNode) -> PlanFingerprint {
    let mut canonical = String::new();
    root.write_canonical(&mut canonical);
    let digest = Sha256::digest(canonical.as_bytes());
    PlanFingerprint(hex::encode(&digest[..16]))
}

/// A validated plan tree whose leaves are distinct tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanNode", into = "PlanNode")]
pub struct PlanTree {
    root: PlanNode,
    fingerprint: PlanFingerprint,
}

impl TryFrom<PlanNode> for PlanTree {
    type Error = Error;

    fn try_from(root: PlanNode) -> Result<Self> {
        PlanTree::new(root)
    }
}

impl From<PlanTree> for PlanNode {
    fn from(p: PlanTree) -> Self {
        p.root
    }
}

impl PlanTree {
    pub fn new(root: PlanNode) -> Result<Self> {
        let fingerprint = plan_fingerprint(&root)?;
        Ok(PlanTree { root, fingerprint })
    }

    /// Validates the plan against a template: leaves are exactly its tables.
    pub fn for_template(root: PlanNode, template: &QueryTemplate) -> Result<Self> {
        let plan = PlanTree::new(root)?;
        plan.check_template(template)?;
        Ok(plan)
    }

    pub fn check_template(&self, template: &QueryTemplate) -> Result<()> {
        let leaves = self.root.table_set();
        let expected: BTreeSet<&str> = template.tables().iter().map(String::as_str).collect();
        if leaves != expected {
            return Err(Error::MalformedPlan(format!(
                "plan leaves {leaves:?} do not match template tables {expected:?}"
            )));
        }
        Ok(())
    }

    pub fn root(&self) -> &PlanNode {
        &self.root
    }

    pub fn fingerprint(&self) -> &PlanFingerprint {
        &self.fingerprint
    }

    pub fn canonical_string(&self) -> String {
        let mut s = String::new();
        self.root.write_canonical(&mut s);
        s
    }

    /// Join sub-plans of this plan with their estimated cardinalities,
    /// in pre-order.
    pub fn join_subplans(&self) -> Vec<(SubPlanKey, f64)> {
        fn walk(node: &PlanNode, out: &mut Vec<(SubPlanKey, f64)>) {
            if let PlanNode::Join { rows, left, right, .. } = node {
                out.push((SubPlanKey::new(node.table_set()), *rows));
                walk(left, out);
                walk(right, out);
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out
    }

    /// Estimated cardinality of the node covering exactly `key`, if present.
    pub fn estimated_cardinality(&self, key: &SubPlanKey) -> Option<f64> {
        fn find(node: &PlanNode, key: &SubPlanKey) -> Option<f64> {
            let set = node.table_set();
            if set.len() == key.len() && key.tables().iter().all(|t| set.contains(t.as_str())) {
                return Some(node.rows());
            }
            match node {
                PlanNode::Join { left, right, .. } => find(left, key).or_else(|| find(right, key)),
                PlanNode::Scan { .. } => None,
            }
        }
        find(&self.root, key)
    }

    /// Compact single-line rendering, e.g. `hash(nl(seq a, idx b), seq c)`.
    pub fn explain(&self) -> String {
        fn go(n: &PlanNode, out: &mut String) {
            match n {
                PlanNode::Scan { table, op, .. } => {
                    out.push_str(op.tag());
                    out.push(' ');
                    out.push_str(table);
                }
                PlanNode::Join { op, left, right, .. } => {
                    out.push_str(op.tag());
                    out.push('(');
                    go(left, out);
                    out.push_str(", ");
                    go(right, out);
                    out.push(')');
                }
            }
        }
        let mut s = String::new();
        go(&self.root, &mut s);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn two_table_plans() -> Vec<PlanNode> {
        let mut out = Vec::new();
        for (l, r) in [("a", "b"), ("b", "a")] {
            for op in JoinOp::ALL {
                for ls in [ScanOp::SeqScan, ScanOp::IndexScan] {
                    for rs in [ScanOp::SeqScan, ScanOp::IndexScan] {
                        out.push(PlanNode::join(op, 10.0, PlanNode::scan(l, ls, 1.0), PlanNode::scan(r, rs, 2.0)));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_two_table_plans_have_distinct_digests() {
        let plans = two_table_plans();
        let digests: HashSet<PlanFingerprint> =
            plans.iter().map(|p| plan_fingerprint(p).unwrap()).collect();
        assert_eq!(digests.len(), plans.len());
        assert_eq!(plans.len(), 24);
    }

    #[test]
    fn cardinalities_do_not_affect_digest() {
        let a = PlanNode::join(
            JoinOp::HashJoin,
            10.0,
            PlanNode::scan("a", ScanOp::SeqScan, 1.0),
            PlanNode::scan("b", ScanOp::SeqScan, 1.0),
        );
        let b = PlanNode::join(
            JoinOp::HashJoin,
            9999.0,
            PlanNode::scan("a", ScanOp::SeqScan, 3.0),
            PlanNode::scan("b", ScanOp::SeqScan, 7.0),
        );
        assert_eq!(plan_fingerprint(&a).unwrap(), plan_fingerprint(&b).unwrap());
    }

    #[test]
    fn construction_order_does_not_matter() {
        let right = PlanNode::scan("c", ScanOp::IndexScan, 5.0);
        let inner = PlanNode::join(
            JoinOp::MergeJoin,
            4.0,
            PlanNode::scan("a", ScanOp::SeqScan, 1.0),
            PlanNode::scan("b", ScanOp::SeqScan, 2.0),
        );
        let p1 = PlanNode::join(JoinOp::NestedLoop, 3.0, inner.clone(), right.clone());
        let mut p2 = PlanNode::join(JoinOp::NestedLoop, 3.0, PlanNode::scan("x", ScanOp::SeqScan, 0.0), right);
        if let PlanNode::Join { left, .. } = &mut p2 {
            **left = inner;
        }
        assert_eq!(plan_fingerprint(&p1).unwrap(), plan_fingerprint(&p2).unwrap());
        let json = serde_json::to_string(&PlanTree::new(p1.clone()).unwrap()).unwrap();
        let back: PlanTree = serde_json::from_str(&json).unwrap();
        assert_eq!(back.fingerprint(), &plan_fingerprint(&p1).unwrap());
    }

    #[test]
    fn duplicate_leaf_is_structural_error() {
        let p = PlanNode::join(
            JoinOp::HashJoin,
            1.0,
            PlanNode::scan("a", ScanOp::SeqScan, 1.0),
            PlanNode::scan("a", ScanOp::SeqScan, 1.0),
        );
        assert!(matches!(plan_fingerprint(&p), Err(Error::MalformedPlan(_))));
        assert!(PlanTree::new(p).is_err());
    }

    #[test]
    fn join_subplans_and_lookup() {
        let p = PlanTree::new(PlanNode::join(
            JoinOp::HashJoin,
            100.0,
            PlanNode::join(
                JoinOp::NestedLoop,
                40.0,
                PlanNode::scan("a", ScanOp::SeqScan, 1.0),
                PlanNode::scan("b", ScanOp::SeqScan, 1.0),
            ),
            PlanNode::join(
                JoinOp::NestedLoop,
                17.0,
                PlanNode::scan("c", ScanOp::SeqScan, 1.0),
                PlanNode::scan("d", ScanOp::SeqScan, 1.0),
            ),
        ))
        .unwrap();
        let subs = p.join_subplans();
        assert_eq!(subs.len(), 3);
        assert_eq!(p.estimated_cardinality(&SubPlanKey::new(["b", "a"])), Some(40.0));
        assert_eq!(p.estimated_cardinality(&SubPlanKey::new(["c", "d"])), Some(17.0));
        assert_eq!(p.estimated_cardinality(&SubPlanKey::new(["a", "c"])), None);
        assert_eq!(p.explain(), "hash(nl(seq a, seq b), nl(seq c, seq d))");
    }
}
