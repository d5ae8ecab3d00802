//! Synthetic schema and its generative data model.
//!
//! Every table is a mixture of latent segments. Conditioned on its segment a
//! row draws each column independently from that segment's distribution, so
//! columns of one table (predicate columns and join keys alike) are
//! correlated through the segment. The optimizer's estimator only sees the
//! marginals and multiplies them, which is exact when every column is
//! segment-independent and wrong otherwise.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{self, FORMAT_VERSION};
use crate::types::{CmpOp, JoinEdge, ParamSpec, ParamType, ParamValue, Predicate, QueryTemplate};

const TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub kind: ParamType,
    /// Zipf exponent the distributions were drawn with (informational).
    pub skew: f64,
    /// `distribution[segment][value]`; each row sums to one.
    pub distribution: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub row_count: u64,
    /// Segment weights; sum to one.
    pub segments: Vec<f64>,
    pub columns: Vec<ColumnDef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinDef {
    pub left: String,
    pub left_column: String,
    pub right: String,
    pub right_column: String,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IndexDef {
    pub table: String,
    pub column: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub tables: Vec<TableDef>,
    pub joins: Vec<JoinDef>,
    pub indexes: Vec<IndexDef>,
}

fn date_epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date")
}

impl ColumnDef {
    pub fn domain_size(&self) -> usize {
        self.distribution.first().map_or(0, Vec::len)
    }

    /// Typed value of domain position `idx`.
    pub fn value_at(&self, idx: usize) -> ParamValue {
        match self.kind {
            ParamType::Int => ParamValue::Int(idx as i64),
            ParamType::Float => ParamValue::Float(idx as f64 * 0.25),
            ParamType::String => ParamValue::String(format!("s{idx:04}")),
            ParamType::Date => ParamValue::Date(date_epoch() + chrono::Days::new(idx as u64)),
        }
    }

    fn compare(&self, idx: usize, v: &ParamValue) -> Option<Ordering> {
        match (self.value_at(idx), v) {
            (ParamValue::Int(a), ParamValue::Int(b)) => Some(a.cmp(b)),
            (ParamValue::Float(a), ParamValue::Float(b)) => a.partial_cmp(b),
            (ParamValue::String(a), ParamValue::String(b)) => Some(a.as_str().cmp(b.as_str())),
            (ParamValue::Date(a), ParamValue::Date(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }

    /// Whether domain position `idx` satisfies `column op v`.
    pub fn satisfies(&self, idx: usize, op: CmpOp, v: &ParamValue) -> bool {
        match (op, self.compare(idx, v)) {
            (CmpOp::Eq, Some(Ordering::Equal)) => true,
            (CmpOp::Le, Some(Ordering::Less | Ordering::Equal)) => true,
            (CmpOp::Ge, Some(Ordering::Greater | Ordering::Equal)) => true,
            _ => false,
        }
    }

    /// Per-segment probability that a row satisfies the predicate.
    pub fn segment_selectivity(&self, op: CmpOp, v: &ParamValue) -> Vec<f64> {
        let hits: Vec<usize> = (0..self.domain_size()).filter(|&i| self.satisfies(i, op, v)).collect();
        self.distribution.iter().map(|d| hits.iter().map(|&i| d[i]).sum()).collect()
    }

    pub fn marginal(&self, segments: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.domain_size()];
        for (w, d) in segments.iter().zip(&self.distribution) {
            for (acc, p) in m.iter_mut().zip(d) {
                *acc += w * p;
            }
        }
        m
    }
}

impl TableDef {
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// Marginal probability that a row satisfies `column op v`.
    pub fn selectivity(&self, column: &str, op: CmpOp, v: &ParamValue) -> Result<f64> {
        let col = self
            .column(column)
            .ok_or_else(|| Error::InvalidSchema(format!("no column {}.{column}", self.name)))?;
        let per = col.segment_selectivity(op, v);
        Ok(self.segments.iter().zip(per).map(|(w, s)| w * s).sum())
    }
}

impl Schema {
    pub fn table(&self, name: &str) -> Result<&TableDef> {
        self.tables.iter().find(|t| t.name == name).ok_or_else(|| Error::UnknownTable(name.to_string()))
    }

    pub fn column(&self, table: &str, column: &str) -> Result<&ColumnDef> {
        self.table(table)?
            .column(column)
            .ok_or_else(|| Error::InvalidSchema(format!("no column {table}.{column}")))
    }

    pub fn has_index(&self, table: &str, column: &str) -> bool {
        self.indexes.iter().any(|i| i.table == table && i.column == column)
    }

    /// `M[za][zb] = P(key match | segment za of left, segment zb of right)`.
    pub fn segment_join_matrix(&self, left: &str, left_col: &str, right: &str, right_col: &str) -> Result<Vec<Vec<f64>>> {
        let a = self.column(left, left_col)?;
        let b = self.column(right, right_col)?;
        if a.domain_size() != b.domain_size() {
            return Err(Error::InvalidSchema(format!(
                "join key domains differ: {left}.{left_col} has {} values, {right}.{right_col} has {}",
                a.domain_size(),
                b.domain_size()
            )));
        }
        Ok(a.distribution
            .iter()
            .map(|da| b.distribution.iter().map(|db| da.iter().zip(db).map(|(x, y)| x * y).sum()).collect())
            .collect())
    }

    /// True selectivity of a join edge over the unfiltered tables.
    pub fn join_selectivity(&self, join: &JoinDef) -> Result<f64> {
        let m = self.segment_join_matrix(&join.left, &join.left_column, &join.right, &join.right_column)?;
        let wa = &self.table(&join.left)?.segments;
        let wb = &self.table(&join.right)?.segments;
        let mut s = 0.0;
        for (za, row) in m.iter().enumerate() {
            for (zb, v) in row.iter().enumerate() {
                s += wa[za] * wb[zb] * v;
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSchema(m));
        let mut names = BTreeSet::new();
        for t in &self.tables {
            if !names.insert(t.name.as_str()) {
                return bad(format!("duplicate table `{}`", t.name));
            }
            if t.row_count < 1 {
                return bad(format!("table `{}` has no rows", t.name));
            }
            if t.segments.is_empty() || t.segments.iter().any(|w| *w < 0.0) {
                return bad(format!("table `{}` has invalid segment weights", t.name));
            }
            if (t.segments.iter().sum::<f64>() - 1.0).abs() > TOL {
                return bad(format!("segment weights of `{}` do not sum to 1", t.name));
            }
            for c in &t.columns {
                if c.distribution.len() != t.segments.len() {
                    return bad(format!("{}.{} needs one distribution per segment", t.name, c.name));
                }
                let d = c.domain_size();
                if d == 0 {
                    return bad(format!("{}.{} has an empty domain", t.name, c.name));
                }
                for dist in &c.distribution {
                    if dist.len() != d || dist.iter().any(|p| *p < 0.0) || (dist.iter().sum::<f64>() - 1.0).abs() > TOL {
                        return bad(format!("{}.{} has a distribution that is not a probability vector", t.name, c.name));
                    }
                }
            }
        }
        for j in &self.joins {
            let s = self.join_selectivity(j)?;
            if !(s > 0.0 && s <= 1.0 + TOL) {
                return bad(format!("join {}.{} = {}.{} has selectivity {s}", j.left, j.left_column, j.right, j.right_column));
            }
        }
        for i in &self.indexes {
            self.column(&i.table, &i.column)?;
        }
        Ok(())
    }

    /// Random schema with `n_tables` tables joined along a random tree.
    ///
    /// `skew` is the Zipf exponent of every per-segment distribution; at zero
    /// all columns are uniform and independent of the segment, so estimates
    /// are exact.
    pub fn generate(seed: u64, n_tables: usize, skew: f64) -> Result<Schema> {
        if !(2..=8).contains(&n_tables) {
            return Err(Error::InvalidArgument(format!("n_tables must be in [2, 8], got {n_tables}")));
        }
        if !(skew >= 0.0 && skew.is_finite()) {
            return Err(Error::InvalidArgument(format!("skew must be >= 0, got {skew}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        const SEGMENTS: usize = 3;
        let kinds = [ParamType::Int, ParamType::Float, ParamType::String, ParamType::Date];
        let mut tables: Vec<TableDef> = (0..n_tables)
            .map(|i| {
                let row_count = 10f64.powf(rng.random_range(2.5..5.5)).round() as u64;
                let raw: Vec<f64> = (0..SEGMENTS).map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let segments = raw.iter().map(|w| w / total).collect();
                let mut columns = Vec::new();
                for name in ["p", "q"] {
                    let kind = kinds[rng.random_range(0..kinds.len())];
                    let domain = rng.random_range(10..=60);
                    columns.push(ColumnDef {
                        name: name.into(),
                        kind,
                        skew,
                        distribution: (0..SEGMENTS).map(|_| zipf_permuted(domain, skew, &mut rng)).collect(),
                    });
                }
                TableDef { name: format!("t{i}"), row_count, segments, columns }
            })
            .collect();
        let mut joins = Vec::new();
        for child in 1..n_tables {
            let parent = rng.random_range(0..child);
            let key = format!("k{}", joins.len());
            let smaller = tables[parent].row_count.min(tables[child].row_count) as f64;
            let domain = ((smaller * rng.random_range(0.2..1.0)) as usize).clamp(20, 5000);
            // Segment z of both sides shares one value ranking, so rows from
            // matching segments collide more often than the marginals imply.
            let orders: Vec<Vec<usize>> = (0..SEGMENTS)
                .map(|_| {
                    let mut o: Vec<usize> = (0..domain).collect();
                    o.shuffle(&mut rng);
                    o
                })
                .collect();
            for t in [parent, child] {
                let distribution = orders.iter().map(|o| zipf_ordered(o, skew)).collect();
                tables[t].columns.push(ColumnDef { name: key.clone(), kind: ParamType::Int, skew, distribution });
            }
            joins.push(JoinDef {
                left: tables[parent].name.clone(),
                left_column: key.clone(),
                right: tables[child].name.clone(),
                right_column: key,
            });
        }
        let indexes = tables
            .iter()
            .filter(|_| rng.random_bool(0.7))
            .map(|t| IndexDef { table: t.name.clone(), column: "p".into() })
            .collect();
        let schema = Schema { tables, joins, indexes };
        schema.validate()?;
        Ok(schema)
    }

    /// Joins every table of the schema with an equality predicate on each
    /// table's `p`.
    pub fn default_template(&self, template_id: &str) -> Result<QueryTemplate> {
        let mut predicates = Vec::new();
        let mut specs = Vec::new();
        for (slot, t) in self.tables.iter().enumerate() {
            let col = t.column("p").ok_or_else(|| Error::InvalidSchema(format!("table `{}` has no column p", t.name)))?;
            predicates.push(Predicate { table: t.name.clone(), column: "p".into(), op: CmpOp::Eq, slot });
            specs.push(ParamSpec { ty: col.kind, table: t.name.clone(), column: "p".into() });
        }
        QueryTemplate::new(
            template_id,
            self.tables.iter().map(|t| t.name.clone()).collect(),
            self.joins
                .iter()
                .map(|j| JoinEdge {
                    left: j.left.clone(),
                    left_column: j.left_column.clone(),
                    right: j.right.clone(),
                    right_column: j.right_column.clone(),
                })
                .collect(),
            predicates,
            specs,
        )
    }

    pub fn to_writer<W: Write>(&self, out: &mut W) -> Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            format_version: u64,
            kind: &'static str,
            joins: &'a [JoinDef],
            indexes: &'a [IndexDef],
        }
        jsonl::write_line(out, &Header { format_version: FORMAT_VERSION, kind: "schema", joins: &self.joins, indexes: &self.indexes })?;
        for t in &self.tables {
            jsonl::write_line(out, t)?;
        }
        Ok(())
    }

    pub fn from_reader<R: std::io::BufRead>(input: R) -> Result<Schema> {
        #[derive(Deserialize)]
        struct Header {
            kind: String,
            joins: Vec<JoinDef>,
            indexes: Vec<IndexDef>,
        }
        let (h, tables): (Header, Vec<TableDef>) = jsonl::read_lines(input)?;
        if h.kind != "schema" {
            return Err(Error::format(1, format!("expected kind `schema`, found `{}`", h.kind)));
        }
        let s = Schema { tables, joins: h.joins, indexes: h.indexes };
        s.validate()?;
        Ok(s)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.to_writer(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Schema> {
        Schema::from_reader(BufReader::new(File::open(path)?))
    }
}

/// Zipf(`skew`) probabilities over `domain` values, assigned to values in a
/// random order.
pub fn zipf_permuted(domain: usize, skew: f64, rng: &mut impl Rng) -> Vec<f64> {
    let mut order: Vec<usize> = (0..domain).collect();
    order.shuffle(rng);
    zipf_ordered(&order, skew)
}

/// Zipf(`skew`) probabilities where `order[r]` is the value of rank `r`.
pub fn zipf_ordered(order: &[usize], skew: f64) -> Vec<f64> {
    let weights: Vec<f64> = (0..order.len()).map(|r| 1.0 / ((r + 1) as f64).powf(skew)).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; order.len()];
    for (rank, &v) in order.iter().enumerate() {
        out[v] = weights[rank] / total;
    }
    out
}

/// Distribution that puts all mass on one value.
pub fn point_mass(domain: usize, value: usize) -> Vec<f64> {
    let mut d = vec![0.0; domain];
    d[value] = 1.0;
    d
}

pub fn uniform(domain: usize) -> Vec<f64> {
    vec![1.0 / domain as f64; domain]
}
