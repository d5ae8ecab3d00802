use std::fmt::Write as _;

use pqo::eval::{ExactComparison, MetricsReport, SharingReport};
use pqo::Provenance;
use serde::{Deserialize, Serialize};

pub const SWEEP: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 0.9, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub s_model: f64,
    pub p_reg: f64,
    pub regressions: usize,
    pub fallbacks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub slot: usize,
    pub instances: usize,
    pub mean_confidence_test: f64,
    pub mean_confidence_holdout: f64,
    /// Regression frequency on the held-out slice at threshold 0.
    pub p_reg_without_fallback: f64,
    /// Same, at the model's threshold.
    pub p_reg_with_fallback: f64,
}

/// Totals of the noiseless default, exact-cardinality and best-candidate
/// latencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactSummary {
    pub total_default_ms: f64,
    pub total_exact_ms: f64,
    pub total_best_rce_ms: f64,
    /// Instances whose best candidate is strictly faster than the
    /// exact-cardinality plan.
    pub rce_beats_exact: usize,
}

impl From<&ExactComparison> for ExactSummary {
    fn from(c: &ExactComparison) -> Self {
        ExactSummary {
            total_default_ms: c.total_default_ms,
            total_exact_ms: c.total_exact_ms,
            total_best_rce_ms: c.total_best_rce_ms,
            rce_beats_exact: c.rows.iter().filter(|r| r.best_rce_ms < r.exact_ms).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatorAnalysis {
    pub exact: ExactSummary,
    pub sharing: SharingReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub format_version: u64,
    pub kind: String,
    pub provenance: Provenance,
    pub template_id: String,
    pub threshold: f64,
    pub train_instances: usize,
    pub test: MetricsReport,
    /// Geometric mean of per-instance speedups on the test split.
    pub geometric_mean_speedup: f64,
    pub sweep: Vec<SweepPoint>,
    pub holdout: Option<HoldoutReport>,
    pub simulator: Option<SimulatorAnalysis>,
}

impl EvaluationReport {
    pub fn to_text(&self) -> String {
        let t = &self.test;
        let mut s = String::new();
        let _ = writeln!(s, "template              {}", self.template_id);
        let _ = writeln!(s, "config digest         {}", self.provenance.config_digest);
        let _ = writeln!(s, "train / test          {} / {}", self.train_instances, t.instances);
        let _ = writeln!(s, "threshold             {:.2}", self.threshold);
        let _ = writeln!(s, "S_opt                 {:.4}", t.s_opt);
        let _ = writeln!(s, "S_model               {:.4}", t.s_model);
        let _ = writeln!(s, "capture               {:.4}", t.capture);
        let _ = writeln!(s, "p99 speedup           {:.4}", t.p99_speedup);
        let _ = writeln!(s, "geo-mean speedup      {:.4}", self.geometric_mean_speedup);
        let _ = writeln!(s, "P_reg                 {:.4}", t.p_reg);
        let _ = writeln!(s, "fallbacks             {}", t.fallbacks);
        let _ = writeln!(s, "plan cover size       {}", t.plan_cover_size);
        let _ = writeln!(s, "single-best ratio     {:.4}", t.single_best_plan_ratio);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:>9} {:>9} {:>7} {:>11} {:>9}", "threshold", "S_model", "P_reg", "regressions", "fallbacks");
        for p in &self.sweep {
            let _ = writeln!(
                s,
                "{:>9.2} {:>9.4} {:>7.4} {:>11} {:>9}",
                p.threshold, p.s_model, p.p_reg, p.regressions, p.fallbacks
            );
        }
        if let Some(h) = &self.holdout {
            let _ = writeln!(s);
            let _ = writeln!(s, "held-out slice        slot {}, {} instances", h.slot, h.instances);
            let _ = writeln!(s, "mean confidence       test {:.4}, held-out {:.4}", h.mean_confidence_test, h.mean_confidence_holdout);
            let _ = writeln!(s, "held-out P_reg        {:.4} without fallback, {:.4} with", h.p_reg_without_fallback, h.p_reg_with_fallback);
        }
        if let Some(a) = &self.simulator {
            let _ = writeln!(s);
            let e = &a.exact;
            let _ = writeln!(
                s,
                "noiseless totals      default {:.1} ms, exact-cardinality {:.1} ms, best candidate {:.1} ms",
                e.total_default_ms, e.total_exact_ms, e.total_best_rce_ms
            );
            let _ = writeln!(s, "candidate beats exact {} instances", e.rce_beats_exact);
            let _ = writeln!(
                s,
                "plan sharing          S_opt all {:.4}, own {:.4}, shared {:.3}",
                a.sharing.s_opt_all, a.sharing.s_opt_instance, a.sharing.shared_fraction
            );
        }
        s
    }

    /// Per-instance outcomes of the test split.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("instance,plan,confidence,default_ms,chosen_ms,oracle_ms,speedup,improvement_ms,regression\n");
        for o in &self.test.per_instance {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                o.instance,
                o.plan.as_ref().map_or("FALLBACK".to_string(), |p| p.to_string()),
                o.confidence,
                o.default_ms,
                o.chosen_ms,
                o.oracle_ms,
                o.speedup,
                o.default_ms - o.chosen_ms,
                o.regression
            );
        }
        s
    }
}
