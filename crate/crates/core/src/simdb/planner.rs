//! Bushy dynamic-programming join planner over connected table subsets.

use super::cost::{CostModel, Distortion};
use super::schema::Schema;
use crate::error::{Error, Result};
use crate::plan::{fingerprint_unchecked, JoinOp, PlanNode, PlanTree, ScanOp};
use crate::types::QueryTemplate;

const TIE: f64 = 1e-12;

/// Plans one template. Row counts come from the caller so the same search
/// serves estimated, overridden and true cardinalities.
#[derive(Clone, Debug)]
pub struct Planner {
    template: QueryTemplate,
    table_rows: Vec<f64>,
    scans: Vec<Vec<ScanOp>>,
    cost: CostModel,
}

impl Planner {
    pub fn new(schema: &Schema, template: &QueryTemplate, cost: &CostModel) -> Result<Self> {
        if !template.is_connected(template.full_mask()) {
            return Err(Error::DisconnectedJoinGraph(template.template_id().to_string()));
        }
        let mut table_rows = Vec::new();
        let mut scans = Vec::new();
        for t in template.tables() {
            table_rows.push(schema.table(t)?.row_count as f64);
            let indexed = template.predicates().iter().any(|p| &p.table == t && schema.has_index(t, &p.column));
            scans.push(if indexed { vec![ScanOp::SeqScan, ScanOp::IndexScan] } else { vec![ScanOp::SeqScan] });
        }
        Ok(Planner { template: template.clone(), table_rows, scans, cost: cost.clone() })
    }

    pub fn template(&self) -> &QueryTemplate {
        &self.template
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    /// Scan operators available for table `t` (index scans need an index on
    /// a predicated column).
    pub fn scan_ops(&self, t: usize) -> &[ScanOp] {
        &self.scans[t]
    }

    /// Cheapest plan under `rows`, which maps a table bitmask to its row
    /// count. Exact cost ties go to the smaller sub-plan fingerprint.
    pub fn best_plan(&self, rows: &dyn Fn(u32) -> f64) -> Result<PlanTree> {
        let n = self.template.tables().len();
        let full = self.template.full_mask();
        let mut card = vec![0.0; 1 << n];
        let mut best: Vec<Option<(f64, PlanNode)>> = vec![None; 1 << n];
        for mask in 1..=full {
            if self.template.is_connected(mask) {
                card[mask as usize] = rows(mask);
            }
        }
        for t in 0..n {
            let m = 1usize << t;
            for &op in &self.scans[t] {
                let c = self.cost.scan_cost(op, self.table_rows[t], card[m]);
                let node = PlanNode::scan(self.template.tables()[t].clone(), op, card[m]);
                consider(&mut best[m], c, || node.clone());
            }
        }
        for mask in 1..=full {
            if mask.count_ones() < 2 || !self.template.is_connected(mask) {
                continue;
            }
            let out = card[mask as usize];
            let (done, rest) = best.split_at_mut(mask as usize);
            let slot = &mut rest[0];
            let mut sub = (mask - 1) & mask;
            while sub > 0 {
                let other = mask ^ sub;
                if let (Some((cl, l)), Some((cr, r))) = (&done[sub as usize], &done[other as usize]) {
                    let (lr, rr) = (card[sub as usize], card[other as usize]);
                    for op in JoinOp::ALL {
                        let c = cl + cr + self.cost.join_cost(op, lr, rr, out);
                        consider(slot, c, || PlanNode::join(op, out, l.clone(), r.clone()));
                    }
                }
                sub = (sub - 1) & mask;
            }
        }
        let (_, root) = best[full as usize].take().ok_or_else(|| {
            Error::DisconnectedJoinGraph(self.template.template_id().to_string())
        })?;
        PlanTree::new(root)
    }

    /// Cost of `plan` with every node's output taken from `rows`. With
    /// `distortion` the hidden execution multipliers apply.
    pub fn plan_cost(&self, plan: &PlanNode, rows: &dyn Fn(u32) -> f64, distortion: Option<&Distortion>) -> Result<f64> {
        Ok(self.node_cost(plan, rows, distortion)?.0)
    }

    fn node_cost(&self, node: &PlanNode, rows: &dyn Fn(u32) -> f64, d: Option<&Distortion>) -> Result<(f64, u32)> {
        match node {
            PlanNode::Scan { table, op, .. } => {
                let t = self.template.table_index(table).ok_or_else(|| Error::UnknownTable(table.clone()))?;
                if !self.scans[t].contains(op) {
                    return Err(Error::MalformedPlan(format!("no index supports an index scan on `{table}`")));
                }
                let mask = 1u32 << t;
                let c = self.cost.scan_cost(*op, self.table_rows[t], rows(mask));
                Ok((c * d.map_or(1.0, |d| d.scan(*op)), mask))
            }
            PlanNode::Join { op, left, right, .. } => {
                let (cl, ml) = self.node_cost(left, rows, d)?;
                let (cr, mr) = self.node_cost(right, rows, d)?;
                if ml & mr != 0 {
                    return Err(Error::MalformedPlan("a table appears on both sides of a join".into()));
                }
                let mask = ml | mr;
                let c = self.cost.join_cost(*op, rows(ml), rows(mr), rows(mask));
                Ok((cl + cr + c * d.map_or(1.0, |d| d.join(*op)), mask))
            }
        }
    }
}

fn consider(slot: &mut Option<(f64, PlanNode)>, cost: f64, make: impl FnOnce() -> PlanNode) {
    match slot {
        None => *slot = Some((cost, make())),
        Some((best, node)) => {
            let scale = best.abs().max(cost.abs()).max(1.0);
            if cost < *best - TIE * scale {
                *slot = Some((cost, make()));
            } else if (cost - *best).abs() <= TIE * scale {
                let cand = make();
                if fingerprint_unchecked(&cand) < fingerprint_unchecked(node) {
                    *slot = Some((cost, cand));
                }
            }
        }
    }
}
