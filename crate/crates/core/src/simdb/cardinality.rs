//! True and estimated sub-plan cardinalities.

use serde::{Deserialize, Serialize};

use super::schema::Schema;
use crate::error::{Error, Result};
use crate::rowcount::RowCountMap;
use crate::types::{QueryInstance, QueryTemplate, SubPlanKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CardinalityMode {
    True,
    Estimated,
}

#[derive(Clone, Debug)]
struct BoundEdge {
    a: usize,
    b: usize,
    /// `matrix[za][zb]`: match probability given the two rows' segments.
    matrix: Vec<Vec<f64>>,
    estimated_selectivity: f64,
}

/// Instance-independent part of a template's data model: base table sizes
/// and per-edge segment match matrices.
#[derive(Clone, Debug)]
pub struct JoinModel {
    rows: Vec<f64>,
    edges: Vec<BoundEdge>,
}

impl JoinModel {
    pub fn new(schema: &Schema, template: &QueryTemplate) -> Result<Self> {
        let mut rows = Vec::new();
        for name in template.tables() {
            rows.push(schema.table(name)?.row_count as f64);
        }
        let mut edges = Vec::new();
        for (e, (a, b)) in template.join_graph().iter().zip(template.edge_indices()) {
            let matrix = schema.segment_join_matrix(&e.left, &e.left_column, &e.right, &e.right_column)?;
            let wa = &schema.table(&e.left)?.segments;
            let wb = &schema.table(&e.right)?.segments;
            let mut sel = 0.0;
            for (za, row) in matrix.iter().enumerate() {
                for (zb, v) in row.iter().enumerate() {
                    sel += wa[za] * wb[zb] * v;
                }
            }
            edges.push(BoundEdge { a, b, matrix, estimated_selectivity: sel });
        }
        Ok(JoinModel { rows, edges })
    }

    /// Applies an instance's predicates.
    pub fn bind<'a>(&'a self, schema: &Schema, template: &QueryTemplate, instance: &QueryInstance) -> Result<BoundQuery<'a>> {
        instance.check(template)?;
        let mut mass = Vec::new();
        let mut estimated_selectivity = Vec::new();
        for name in template.tables() {
            let t = schema.table(name)?;
            let mut m = t.segments.clone();
            let mut est = 1.0;
            for p in template.predicates().iter().filter(|p| &p.table == name) {
                let col = schema.column(name, &p.column)?;
                let per = col.segment_selectivity(p.op, &instance.bindings[p.slot]);
                for (acc, s) in m.iter_mut().zip(&per) {
                    *acc *= s;
                }
                est *= t.segments.iter().zip(&per).map(|(w, s)| w * s).sum::<f64>();
            }
            mass.push(m);
            estimated_selectivity.push(est);
        }
        Ok(BoundQuery { rows: &self.rows, mass, estimated_selectivity, edges: &self.edges })
    }
}

/// A template instance bound against a schema: per-table filtered segment
/// masses and per-edge segment match matrices.
#[derive(Clone, Debug)]
pub struct BoundQuery<'a> {
    rows: &'a [f64],
    /// `mass[t][z] = P(segment z) * P(predicates on t hold | z)`.
    mass: Vec<Vec<f64>>,
    estimated_selectivity: Vec<f64>,
    edges: &'a [BoundEdge],
}

impl BoundQuery<'_> {
    pub fn num_tables(&self) -> usize {
        self.rows.len()
    }

    fn edges_in(&self, mask: u32) -> impl Iterator<Item = &BoundEdge> {
        self.edges.iter().filter(move |e| mask & (1 << e.a) != 0 && mask & (1 << e.b) != 0)
    }

    /// Expected output size of the tables in `mask` joined along every
    /// template edge they contain, before rounding.
    pub fn true_rows_exact(&self, mask: u32) -> f64 {
        let tables: Vec<usize> = (0..self.num_tables()).filter(|i| mask & (1 << i) != 0).collect();
        let scale: f64 = tables.iter().map(|&t| self.rows[t]).product();
        let n_edges = self.edges_in(mask).count();
        let prob = if n_edges + 1 == tables.len() && self.connected(mask) {
            self.tree_mass(mask, tables[0])
        } else {
            self.enumerated_mass(&tables, mask)
        };
        scale * prob
    }

    /// Exact cardinality, rounded to whole rows.
    pub fn true_rows(&self, mask: u32) -> f64 {
        self.true_rows_exact(mask).round()
    }

    /// Independence estimate: base rows times marginal predicate and edge
    /// selectivities, clamped to at least one row.
    pub fn estimated_rows(&self, mask: u32) -> f64 {
        let mut x = 1.0;
        for t in (0..self.num_tables()).filter(|i| mask & (1 << i) != 0) {
            x *= self.rows[t] * self.estimated_selectivity[t];
        }
        for e in self.edges_in(mask) {
            x *= e.estimated_selectivity;
        }
        x.round().max(1.0)
    }

    fn connected(&self, mask: u32) -> bool {
        let start = mask.trailing_zeros();
        let mut reached = 1u32 << start;
        loop {
            let mut grown = reached;
            for e in self.edges_in(mask) {
                if reached & ((1 << e.a) | (1 << e.b)) != 0 {
                    grown |= (1 << e.a) | (1 << e.b);
                }
            }
            if grown == reached {
                return reached == mask;
            }
            reached = grown;
        }
    }

    /// Sum-product over segment assignments on a tree, by messages towards
    /// `root`.
    fn tree_mass(&self, mask: u32, root: usize) -> f64 {
        let belief = self.subtree(mask, root, usize::MAX);
        belief.iter().sum()
    }

    /// Unnormalised segment belief of `node` including its subtree.
    fn subtree(&self, mask: u32, node: usize, parent: usize) -> Vec<f64> {
        let mut belief = self.mass[node].clone();
        for e in self.edges_in(mask) {
            let (child, forward) = if e.a == node && e.b != parent {
                (e.b, true)
            } else if e.b == node && e.a != parent {
                (e.a, false)
            } else {
                continue;
            };
            let cb = self.subtree(mask, child, node);
            for (zn, acc) in belief.iter_mut().enumerate() {
                let msg: f64 = cb
                    .iter()
                    .enumerate()
                    .map(|(zc, v)| v * if forward { e.matrix[zn][zc] } else { e.matrix[zc][zn] })
                    .sum();
                *acc *= msg;
            }
        }
        belief
    }

    fn enumerated_mass(&self, tables: &[usize], mask: u32) -> f64 {
        let edges: Vec<&BoundEdge> = self.edges_in(mask).collect();
        let mut z = vec![0usize; self.num_tables()];
        let mut total = 0.0;
        loop {
            let mut p: f64 = tables.iter().map(|&t| self.mass[t][z[t]]).product();
            for e in &edges {
                p *= e.matrix[z[e.a]][z[e.b]];
            }
            total += p;
            let mut i = 0;
            loop {
                if i == tables.len() {
                    return total;
                }
                let t = tables[i];
                z[t] += 1;
                if z[t] < self.mass[t].len() {
                    break;
                }
                z[t] = 0;
                i += 1;
            }
        }
    }
}

/// Cardinalities of one template's sub-plans in either mode.
pub struct CardinalityOracle<'a> {
    schema: &'a Schema,
    template: &'a QueryTemplate,
    mode: CardinalityMode,
}

impl<'a> CardinalityOracle<'a> {
    pub fn new(schema: &'a Schema, template: &'a QueryTemplate, mode: CardinalityMode) -> Self {
        CardinalityOracle { schema, template, mode }
    }

    pub fn mode(&self) -> CardinalityMode {
        self.mode
    }

    /// Row count of `sub`. In estimated mode, join overrides are returned
    /// verbatim; overrides are ignored in true mode.
    pub fn cardinality(&self, instance: &QueryInstance, sub: &SubPlanKey, overrides: &RowCountMap) -> Result<f64> {
        if sub.is_empty() {
            return Err(Error::InvalidArgument("empty sub-plan".into()));
        }
        let mask = self.template.mask_of(sub)?;
        if self.mode == CardinalityMode::Estimated {
            if let Some(r) = overrides.get(sub) {
                return Ok(r);
            }
        }
        let model = JoinModel::new(self.schema, self.template)?;
        let q = model.bind(self.schema, self.template, instance)?;
        Ok(match self.mode {
            CardinalityMode::True => q.true_rows(mask),
            CardinalityMode::Estimated => q.estimated_rows(mask),
        })
    }
}

pub fn true_cardinality(schema: &Schema, template: &QueryTemplate, instance: &QueryInstance, sub: &SubPlanKey) -> Result<f64> {
    CardinalityOracle::new(schema, template, CardinalityMode::True).cardinality(instance, sub, &RowCountMap::new())
}

pub fn estimate_cardinality(
    schema: &Schema,
    template: &QueryTemplate,
    instance: &QueryInstance,
    sub: &SubPlanKey,
    overrides: &RowCountMap,
) -> Result<f64> {
    CardinalityOracle::new(schema, template, CardinalityMode::Estimated).cardinality(instance, sub, overrides)
}
