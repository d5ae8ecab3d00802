//! Preset simulator scenarios.
//!
//! Each preset fixes a schema, a template, a cost model and a way of drawing
//! parameter bindings. The hand-built presets plant a specific estimator
//! failure; `generated` draws everything at random from a seed.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cost::{CostModel, Distortion};
use super::schema::{point_mass, uniform, ColumnDef, IndexDef, JoinDef, Schema, TableDef};
use super::SimDb;
use crate::error::{Error, Result};
use crate::types::{CmpOp, JoinEdge, ParamSpec, ParamType, Predicate, QueryInstance, QueryTemplate, Workload};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Random schema from `Schema::generate`.
    Generated,
    /// One join whose estimate is off by more than 100x.
    Adversarial,
    /// Two parameter clusters whose optimal plans are swapped.
    ParameterSensitive,
    /// A small fraction of instances dominates total default latency.
    HeavyTailed,
    /// Hidden operator distortions make exact-cardinality plans suboptimal.
    Distorted,
    /// A numeric parameter whose top range behaves unlike the rest.
    Ood,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Generated,
        ScenarioKind::Adversarial,
        ScenarioKind::ParameterSensitive,
        ScenarioKind::HeavyTailed,
        ScenarioKind::Distorted,
        ScenarioKind::Ood,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Generated => "generated",
            ScenarioKind::Adversarial => "adversarial",
            ScenarioKind::ParameterSensitive => "parameter_sensitive",
            ScenarioKind::HeavyTailed => "heavy_tailed",
            ScenarioKind::Distorted => "distorted",
            ScenarioKind::Ood => "ood",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

/// Knobs of a scenario; hand-built presets ignore `n_tables` and `skew`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub kind: ScenarioKind,
    pub n_tables: usize,
    pub skew: f64,
    pub noise_level: f64,
    /// Replaces the preset's distortion factors when set.
    pub distortion: Option<Distortion>,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        ScenarioParams { kind: ScenarioKind::Generated, n_tables: 4, skew: 1.0, noise_level: 0.02, distortion: None }
    }
}

impl ScenarioParams {
    pub fn of(kind: ScenarioKind) -> Self {
        ScenarioParams { kind, ..Default::default() }
    }
}

/// A mixture component of the binding distribution: per slot, a
/// distribution over the bound column's domain positions.
#[derive(Clone, Debug, PartialEq)]
struct Cluster {
    weight: f64,
    slots: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub schema: Schema,
    pub template: QueryTemplate,
    pub cost: CostModel,
    pub noise_level: f64,
    clusters: Vec<Cluster>,
}

impl Scenario {
    pub fn build(params: &ScenarioParams, seed: u64) -> Result<Scenario> {
        if !(0.0..1.0).contains(&params.noise_level) {
            return Err(Error::InvalidArgument(format!("noise level must be in [0, 1), got {}", params.noise_level)));
        }
        let mut s = match params.kind {
            ScenarioKind::Generated => generated(seed, params.n_tables, params.skew)?,
            ScenarioKind::Adversarial => adversarial()?,
            ScenarioKind::ParameterSensitive => parameter_sensitive()?,
            ScenarioKind::HeavyTailed => heavy_tailed()?,
            ScenarioKind::Distorted => distorted()?,
            ScenarioKind::Ood => ood()?,
        };
        s.noise_level = params.noise_level;
        if let Some(d) = &params.distortion {
            s.cost.distortion = d.clone();
        }
        s.cost.validate()?;
        Ok(s)
    }

    pub fn simdb(&self) -> Result<SimDb> {
        SimDb::new(self.schema.clone(), self.template.clone(), self.cost.clone(), self.noise_level)
    }

    /// `n` bindings drawn from the scenario's parameter distribution.
    pub fn workload(&self, n: usize, seed: u64) -> Result<Workload> {
        if n == 0 {
            return Err(Error::EmptyWorkload);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pick = WeightedIndex::new(self.clusters.iter().map(|c| c.weight))
            .map_err(|e| Error::InvalidArgument(format!("bad cluster weights: {e}")))?;
        let specs = self.template.param_specs();
        let mut instances = Vec::with_capacity(n);
        for _ in 0..n {
            let c = &self.clusters[pick.sample(&mut rng)];
            let mut bindings = Vec::with_capacity(specs.len());
            for (spec, dist) in specs.iter().zip(&c.slots) {
                let col = self.schema.column(&spec.table, &spec.column)?;
                let idx = sample(dist, &mut rng);
                bindings.push(col.value_at(idx));
            }
            instances.push(QueryInstance::new(self.template.template_id(), bindings));
        }
        Workload::new(self.template.template_id(), instances)
    }
}

fn sample(dist: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn generated(seed: u64, n_tables: usize, skew: f64) -> Result<Scenario> {
    let schema = Schema::generate(seed, n_tables, skew)?;
    let template = schema.default_template("generated")?;
    let mut slots = Vec::new();
    for spec in template.param_specs() {
        let t = schema.table(&spec.table)?;
        let col = t.column(&spec.column).expect("template built from schema");
        slots.push(col.marginal(&t.segments));
    }
    Ok(Scenario {
        kind: ScenarioKind::Generated,
        schema,
        template,
        cost: CostModel::default(),
        noise_level: 0.02,
        clusters: vec![Cluster { weight: 1.0, slots }],
    })
}

// Building blocks for the hand-made presets.

fn col(name: &str, kind: ParamType, distribution: Vec<Vec<f64>>) -> ColumnDef {
    ColumnDef { name: name.into(), kind, skew: 0.0, distribution }
}

fn table(name: &str, row_count: u64, segments: Vec<f64>, columns: Vec<ColumnDef>) -> TableDef {
    TableDef { name: name.into(), row_count, segments, columns }
}

fn join(left: &str, right: &str, key: &str) -> JoinDef {
    JoinDef { left: left.into(), left_column: key.into(), right: right.into(), right_column: key.into() }
}

/// Uniform over positions `lo..hi` of a domain of size `n`.
fn range(n: usize, lo: usize, hi: usize) -> Vec<f64> {
    let mut d = vec![0.0; n];
    for p in &mut d[lo..hi] {
        *p = 1.0 / (hi - lo) as f64;
    }
    d
}

/// Mass `hot` on position `key`, the rest spread uniformly.
fn hot(n: usize, key: usize, hot: f64) -> Vec<f64> {
    let mut d = vec![(1.0 - hot) / n as f64; n];
    d[key] += hot;
    d
}

fn mix(parts: &[(f64, Vec<f64>)]) -> Vec<f64> {
    let n = parts[0].1.len();
    let mut d = vec![0.0; n];
    for (w, p) in parts {
        for (acc, v) in d.iter_mut().zip(p) {
            *acc += w * v;
        }
    }
    d
}

struct Slot<'a> {
    table: &'a str,
    column: &'a str,
    op: CmpOp,
}

fn template(schema: &Schema, id: &str, slots: &[Slot<'_>]) -> Result<QueryTemplate> {
    let mut predicates = Vec::new();
    let mut specs = Vec::new();
    for (i, s) in slots.iter().enumerate() {
        let c = schema.column(s.table, s.column)?;
        predicates.push(Predicate { table: s.table.into(), column: s.column.into(), op: s.op, slot: i });
        specs.push(ParamSpec { ty: c.kind, table: s.table.into(), column: s.column.into() });
    }
    QueryTemplate::new(
        id,
        schema.tables.iter().map(|t| t.name.clone()).collect(),
        schema
            .joins
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

fn finish(kind: ScenarioKind, schema: Schema, template: QueryTemplate, cost: CostModel, clusters: Vec<Cluster>) -> Result<Scenario> {
    schema.validate()?;
    for c in &clusters {
        if c.slots.len() != template.num_params() {
            return Err(Error::InvalidArgument("cluster does not cover every slot".into()));
        }
    }
    Ok(Scenario { kind, schema, template, cost, noise_level: 0.02, clusters })
}

/// Chain `a - b - c - d`. Rows of `a` and `b` selected by the parameters
/// come from a small segment whose join keys all collide on one value, so
/// the independence estimate of `a ⋈ b` is low by about 140x.
fn adversarial() -> Result<Scenario> {
    const K: usize = 500;
    let seg = vec![0.05, 0.95];
    let pair = |name: &str, rows: u64, extra: Vec<ColumnDef>| {
        let mut cols = vec![
            col("p", ParamType::Int, vec![range(20, 0, 10), range(20, 10, 20)]),
            col("k0", ParamType::Int, vec![point_mass(K, 0), uniform(K)]),
        ];
        cols.extend(extra);
        table(name, rows, seg.clone(), cols)
    };
    let a = pair("a", 40_000, vec![]);
    let b = pair("b", 40_000, vec![col("k1", ParamType::Int, vec![uniform(1000), uniform(1000)])]);
    let c = table(
        "c",
        20_000,
        vec![1.0],
        vec![
            col("k1", ParamType::Int, vec![uniform(1000)]),
            col("k2", ParamType::Int, vec![uniform(1000)]),
            col("p", ParamType::Int, vec![uniform(10)]),
        ],
    );
    let d = table(
        "d",
        50_000,
        vec![1.0],
        vec![col("k2", ParamType::Int, vec![uniform(1000)]), col("p", ParamType::Int, vec![uniform(50)])],
    );
    let schema = Schema {
        tables: vec![a, b, c, d],
        joins: vec![join("a", "b", "k0"), join("b", "c", "k1"), join("c", "d", "k2")],
        indexes: vec![IndexDef { table: "c".into(), column: "p".into() }],
    };
    let t = template(
        &schema,
        "adversarial",
        &[
            Slot { table: "a", column: "p", op: CmpOp::Eq },
            Slot { table: "b", column: "p", op: CmpOp::Eq },
            Slot { table: "c", column: "p", op: CmpOp::Eq },
            Slot { table: "d", column: "p", op: CmpOp::Eq },
        ],
    )?;
    let clusters = vec![Cluster {
        weight: 1.0,
        slots: vec![range(20, 0, 10), range(20, 0, 10), uniform(10), uniform(50)],
    }];
    finish(ScenarioKind::Adversarial, schema, t, CostModel::default(), clusters)
}

/// Chain `a - b - c` whose middle table mixes segments; each segment
/// `(weight, values of x, k0 distribution, k1 distribution)` decides which
/// neighbour `b`'s selected rows collide with.
fn chain(id: &str, x_kind: ParamType, x_domain: usize, segments: Vec<(f64, Vec<f64>, Vec<f64>, Vec<f64>)>) -> Result<(Schema, QueryTemplate)> {
    let a = table(
        "a",
        30_000,
        vec![1.0],
        vec![col("k0", ParamType::Int, vec![hot(CHAIN_KEYS, 0, 0.5)]), col("s", ParamType::String, vec![uniform(120)])],
    );
    let mut weights = Vec::new();
    let (mut xs, mut k0, mut k1) = (Vec::new(), Vec::new(), Vec::new());
    for (w, x, d0, d1) in segments {
        assert_eq!(x.len(), x_domain);
        weights.push(w);
        xs.push(x);
        k0.push(d0);
        k1.push(d1);
    }
    let b = table(
        "b",
        30_000,
        weights,
        vec![col("x", x_kind, xs), col("k0", ParamType::Int, k0), col("k1", ParamType::Int, k1)],
    );
    let c = table(
        "c",
        30_000,
        vec![1.0],
        vec![col("k1", ParamType::Int, vec![hot(CHAIN_KEYS, 0, 0.5)]), col("d", ParamType::Date, vec![uniform(150)])],
    );
    let index = |t: &str, c: &str| IndexDef { table: t.into(), column: c.into() };
    let schema = Schema {
        tables: vec![a, b, c],
        joins: vec![join("a", "b", "k0"), join("b", "c", "k1")],
        indexes: vec![index("a", "s"), index("b", "x"), index("c", "d")],
    };
    let t = template(
        &schema,
        id,
        &[
            Slot { table: "b", column: "x", op: CmpOp::Eq },
            Slot { table: "a", column: "s", op: CmpOp::Eq },
            Slot { table: "c", column: "d", op: CmpOp::Eq },
        ],
    )?;
    Ok((schema, t))
}

const CHAIN_KEYS: usize = 2000;

/// Two equally likely clusters chosen by `b.x`: low values make `a ⋈ b`
/// explode, high values `b ⋈ c`.
fn parameter_sensitive() -> Result<Scenario> {
    let k = CHAIN_KEYS;
    let (schema, t) = chain(
        "parameter_sensitive",
        ParamType::Int,
        40,
        vec![
            (0.5, range(40, 0, 20), point_mass(k, 0), uniform(k)),
            (0.5, range(40, 20, 40), uniform(k), point_mass(k, 0)),
        ],
    )?;
    let x = mix(&[(0.5, range(40, 0, 16)), (0.5, range(40, 24, 40))]);
    let clusters = vec![Cluster { weight: 1.0, slots: vec![x, uniform(120), uniform(150)] }];
    finish(ScenarioKind::ParameterSensitive, schema, t, CostModel::default(), clusters)
}

/// Most bindings select one of two mildly skewed segments where plans differ
/// little; one binding in ten hits a segment where the default plan builds a
/// huge intermediate result.
fn heavy_tailed() -> Result<Scenario> {
    let k = CHAIN_KEYS;
    let (h, tw) = (0.05, 0.02);
    let (schema, t) = chain(
        "heavy_tailed",
        ParamType::Int,
        40,
        vec![
            ((1.0 - tw) / 2.0, range(40, 0, 18), hot(k, 0, h), uniform(k)),
            ((1.0 - tw) / 2.0, range(40, 18, 36), uniform(k), hot(k, 0, h)),
            (tw, range(40, 36, 40), uniform(k), point_mass(k, 0)),
        ],
    )?;
    let x = mix(&[(0.9, range(40, 0, 36)), (0.1, range(40, 36, 40))]);
    let clusters = vec![Cluster { weight: 1.0, slots: vec![x, uniform(120), uniform(150)] }];
    finish(ScenarioKind::HeavyTailed, schema, t, CostModel::default(), clusters)
}

/// Star around `f` with hidden distortion: hash joins run three times
/// slower than the planner believes, nested loops twice as fast.
fn distorted() -> Result<Scenario> {
    let f = table(
        "f",
        100_000,
        vec![1.0],
        vec![
            col("k0", ParamType::Int, vec![uniform(1000)]),
            col("k1", ParamType::Int, vec![uniform(500)]),
            col("k2", ParamType::Int, vec![uniform(200)]),
        ],
    );
    let dim = |name: &str, key: &str, keys: usize, rows: u64| {
        table(
            name,
            rows,
            vec![1.0],
            vec![col(key, ParamType::Int, vec![uniform(keys)]), col("p", ParamType::Int, vec![uniform(50)])],
        )
    };
    let schema = Schema {
        tables: vec![f, dim("d0", "k0", 1000, 1000), dim("d1", "k1", 500, 500), dim("d2", "k2", 200, 200)],
        joins: vec![join("f", "d0", "k0"), join("f", "d1", "k1"), join("f", "d2", "k2")],
        indexes: vec![IndexDef { table: "d0".into(), column: "p".into() }],
    };
    let t = template(
        &schema,
        "distorted",
        &[
            Slot { table: "d0", column: "p", op: CmpOp::Le },
            Slot { table: "d1", column: "p", op: CmpOp::Le },
            Slot { table: "d2", column: "p", op: CmpOp::Le },
        ],
    )?;
    let mut cost = CostModel::default();
    cost.distortion = Distortion { seq_scan: 1.0, index_scan: 1.0, hash_join: 3.0, nested_loop: 0.5, merge_join: 1.0 };
    let clusters = vec![Cluster { weight: 1.0, slots: vec![uniform(50), uniform(50), uniform(50)] }];
    finish(ScenarioKind::Distorted, schema, t, cost, clusters)
}

/// Chain driven by a float parameter `b.v` with three regimes: `[0, 2.5)`
/// and `[2.5, 5)` behave like the two parameter-sensitive clusters, and the
/// top fifth of the range, `[10, 12.5)`, collides like the first cluster
/// while sitting next to the second.
fn ood() -> Result<Scenario> {
    const N: usize = 50;
    let k = CHAIN_KEYS;
    let (schema, t) = chain(
        "ood",
        ParamType::Float,
        N,
        vec![
            (0.4, range(N, 0, 10), point_mass(k, 0), uniform(k)),
            (0.4, range(N, 10, 20), uniform(k), point_mass(k, 0)),
            (0.2, range(N, 40, N), point_mass(k, 0), uniform(k)),
        ],
    )?;
    let v = mix(&[(0.4, range(N, 0, 10)), (0.4, range(N, 10, 20)), (0.2, range(N, 40, N))]);
    let clusters = vec![Cluster { weight: 1.0, slots: vec![v, uniform(120), uniform(150)] }];
    finish(ScenarioKind::Ood, schema, t, CostModel::default(), clusters)
}
