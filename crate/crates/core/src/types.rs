//! Query templates, instances and workloads.
//!
//! A template is a fixed join query over a set of tables with `m` parameter
//! slots; an instance binds every slot to a typed value. Templates validate
//! their invariants on construction and on deserialization, so any
//! `QueryTemplate` in hand is connected and has a dense slot numbering.

use std::collections::BTreeSet;
use std::fmt;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Int,
    Float,
    String,
    Date,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    String(String),
    Date(NaiveDate),
}

impl ParamValue {
    pub fn param_type(&self) -> ParamType {
        match self {
            ParamValue::Int(_) => ParamType::Int,
            ParamValue::Float(_) => ParamType::Float,
            ParamValue::String(_) => ParamType::String,
            ParamValue::Date(_) => ParamType::Date,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(v) => write!(f, "{v}"),
            ParamValue::Float(v) => write!(f, "{v}"),
            ParamValue::String(v) => write!(f, "'{v}'"),
            ParamValue::Date(v) => write!(f, "DATE '{v}'"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmpOp {
    /// `column = $slot`
    Eq,
    /// `column <= $slot`
    Le,
    /// `column >= $slot`
    Ge,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinEdge {
    pub left: String,
    pub left_column: String,
    pub right: String,
    pub right_column: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub table: String,
    pub column: String,
    pub op: CmpOp,
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub ty: ParamType,
    pub table: String,
    pub column: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct RawTemplate {
    template_id: String,
    tables: Vec<String>,
    join_graph: Vec<JoinEdge>,
    predicates: Vec<Predicate>,
    param_specs: Vec<ParamSpec>,
}

/// A parameterized join query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTemplate", into = "RawTemplate")]
pub struct QueryTemplate {
    template_id: String,
    tables: Vec<String>,
    join_graph: Vec<JoinEdge>,
    predicates: Vec<Predicate>,
    param_specs: Vec<ParamSpec>,
}

impl TryFrom<RawTemplate> for QueryTemplate {
    type Error = Error;

    fn try_from(raw: RawTemplate) -> Result<Self> {
        QueryTemplate::new(
            raw.template_id,
            raw.tables,
            raw.join_graph,
            raw.predicates,
            raw.param_specs,
        )
    }
}

impl From<QueryTemplate> for RawTemplate {
    fn from(t: QueryTemplate) -> Self {
        RawTemplate {
            template_id: t.template_id,
            tables: t.tables,
            join_graph: t.join_graph,
            predicates: t.predicates,
            param_specs: t.param_specs,
        }
    }
}

impl QueryTemplate {
    pub fn new(
        template_id: impl Into<String>,
        tables: Vec<String>,
        join_graph: Vec<JoinEdge>,
        predicates: Vec<Predicate>,
        param_specs: Vec<ParamSpec>,
    ) -> Result<Self> {
        let t = QueryTemplate {
            template_id: template_id.into(),
            tables,
            join_graph,
            predicates,
            param_specs,
        };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTemplate(m));
        if self.tables.is_empty() {
            return bad("template has no tables".into());
        }
        if self.tables.len() > 16 {
            return bad(format!("{} tables exceed the supported maximum of 16", self.tables.len()));
        }
        let unique: BTreeSet<&String> = self.tables.iter().collect();
        if unique.len() != self.tables.len() {
            return bad("duplicate table name".into());
        }
        for e in &self.join_graph {
            for t in [&e.left, &e.right] {
                if !unique.contains(t) {
                    return bad(format!("join edge references unknown table `{t}`"));
                }
            }
            if e.left == e.right {
                return bad(format!("self-join edge on `{}`", e.left));
            }
        }
        let full = self.full_mask();
        if !self.is_connected(full) {
            return Err(Error::DisconnectedJoinGraph(format!(
                "tables {:?} do not form one connected component",
                self.tables
            )));
        }
        let m = self.param_specs.len();
        if m == 0 {
            return bad("template must have at least one parameter".into());
        }
        let mut seen = vec![false; m];
        for p in &self.predicates {
            if !unique.contains(&p.table) {
                return bad(format!("predicate on unknown table `{}`", p.table));
            }
            if p.slot >= m {
                return bad(format!("parameter slot {} out of range [0, {m})", p.slot));
            }
            if seen[p.slot] {
                return bad(format!("parameter slot {} used twice", p.slot));
            }
            seen[p.slot] = true;
            let spec = &self.param_specs[p.slot];
            if spec.table != p.table || spec.column != p.column {
                return bad(format!(
                    "slot {} is bound to {}.{} but its predicate is on {}.{}",
                    p.slot, spec.table, spec.column, p.table, p.column
                ));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return bad(format!("parameter slot {missing} has no predicate"));
        }
        Ok(())
    }

    pub fn template_id(&self) -> &str {
        &self.template_id
    }

    pub fn tables(&self) -> &[String] {
        &self.tables
    }

    pub fn join_graph(&self) -> &[JoinEdge] {
        &self.join_graph
    }

    pub fn predicates(&self) -> &[Predicate] {
        &self.predicates
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.param_specs
    }

    pub fn num_params(&self) -> usize {
        self.param_specs.len()
    }

    pub fn table_index(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t == name)
    }

    pub fn full_mask(&self) -> u32 {
        (1u32 << self.tables.len()) - 1
    }

    /// Join edges as pairs of table indices.
    pub fn edge_indices(&self) -> Vec<(usize, usize)> {
        self.join_graph
            .iter()
            .map(|e| {
                (
                    self.table_index(&e.left).expect("validated"),
                    self.table_index(&e.right).expect("validated"),
                )
            })
            .collect()
    }

    /// Whether the tables in `mask` induce a connected join subgraph.
    pub fn is_connected(&self, mask: u32) -> bool {
        if mask == 0 {
            return false;
        }
        let edges = self.edge_indices_unchecked();
        let start = mask.trailing_zeros();
        let mut reached = 1u32 << start;
        loop {
            let mut grown = reached;
            for &(a, b) in &edges {
                let (ba, bb) = (1u32 << a, 1u32 << b);
                if mask & ba != 0 && mask & bb != 0 && (reached & (ba | bb)) != 0 {
                    grown |= ba | bb;
                }
            }
            if grown == reached {
                break;
            }
            reached = grown;
        }
        reached == mask
    }

    fn edge_indices_unchecked(&self) -> Vec<(usize, usize)> {
        self.join_graph
            .iter()
            .filter_map(|e| Some((self.table_index(&e.left)?, self.table_index(&e.right)?)))
            .collect()
    }

    /// Bitmask of the tables named in `key`.
    pub fn mask_of(&self, key: &SubPlanKey) -> Result<u32> {
        key.tables().iter().try_fold(0u32, |acc, t| {
            self.table_index(t)
                .map(|i| acc | (1 << i))
                .ok_or_else(|| Error::UnknownTable(t.clone()))
        })
    }

    pub fn key_of(&self, mask: u32) -> SubPlanKey {
        SubPlanKey::new(
            (0..self.tables.len())
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| self.tables[i].clone()),
        )
    }
}

/// One binding of a template's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryInstance {
    pub template_id: String,
    pub bindings: Vec<ParamValue>,
}

impl QueryInstance {
    pub fn new(template_id: impl Into<String>, bindings: Vec<ParamValue>) -> Self {
        QueryInstance { template_id: template_id.into(), bindings }
    }

    pub fn check(&self, template: &QueryTemplate) -> Result<()> {
        if self.template_id != template.template_id() {
            return Err(Error::InvalidInstance(format!(
                "instance of `{}` used with template `{}`",
                self.template_id,
                template.template_id()
            )));
        }
        if self.bindings.len() != template.num_params() {
            return Err(Error::InvalidInstance(format!(
                "{} bindings for {} parameters",
                self.bindings.len(),
                template.num_params()
            )));
        }
        for (i, (v, spec)) in self.bindings.iter().zip(template.param_specs()).enumerate() {
            if v.param_type() != spec.ty {
                return Err(Error::InvalidInstance(format!(
                    "binding {i} is {:?}, parameter expects {:?}",
                    v.param_type(),
                    spec.ty
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub template_id: String,
    pub instances: Vec<QueryInstance>,
}

impl Workload {
    pub fn new(template_id: impl Into<String>, instances: Vec<QueryInstance>) -> Result<Self> {
        let template_id = template_id.into();
        if let Some(bad) = instances.iter().find(|q| q.template_id != template_id) {
            return Err(Error::InvalidInstance(format!(
                "workload for `{template_id}` contains an instance of `{}`",
                bad.template_id
            )));
        }
        Ok(Workload { template_id, instances })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Workload {
        Workload {
            template_id: self.template_id.clone(),
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
        }
    }
}

/// Canonical identity of a sub-plan: the sorted set of tables it joins.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubPlanKey(Vec<String>);

impl SubPlanKey {
    pub fn new<I, S>(tables: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = tables.into_iter().map(Into::into).collect();
        SubPlanKey(set.into_iter().collect())
    }

    pub fn tables(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_join(&self) -> bool {
        self.0.len() >= 2
    }
}

impl fmt::Display for SubPlanKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.0.join(","))
    }
}

/// Deterministic train/test split of `n` positions.
///
/// Returns the train and test index lists, each in ascending order.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    if n == 0 {
        return Err(Error::EmptyWorkload);
    }
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = n_train.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train: Vec<usize> = order[..n_train].to_vec();
    let mut test: Vec<usize> = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    if train.is_empty() || test.is_empty() {
        log::warn!(
            "degenerate split of {n} instances at fraction {train_fraction}: {} train / {} test",
            train.len(),
            test.len()
        );
    }
    Ok((train, test))
}

pub fn split_workload(w: &Workload, train_fraction: f64, seed: u64) -> Result<(Workload, Workload)> {
    let (train, test) = split_indices(w.len(), train_fraction, seed)?;
    Ok((w.subset(&train), w.subset(&test)))
}
