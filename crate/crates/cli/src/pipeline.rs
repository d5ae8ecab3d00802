use std::fs;
use std::path::Path;

use log::info;
use pqo::collect::{collect_training_data, PlanCover};
use pqo::eval::{exact_cardinality_comparison, geometric_mean, metrics_report, plan_sharing, regression_frequency};
use pqo::jsonl::FORMAT_VERSION;
use pqo::learn::{ModelArtifact, PlanChoice};
use pqo::rce::{workload_candidate_generation, CandidateSet};
use pqo::simdb::{Scenario, Schema};
use pqo::{split_indices, Error, ExecutionDataset, LatencyTable, ParamValue, Provenance, Workload};
use serde::Serialize;

use crate::config::{Holdout, PipelineConfig};
use crate::report::{EvaluationReport, HoldoutReport, SimulatorAnalysis, SweepPoint, SWEEP};
use crate::workload_file::WorkloadFile;
use crate::{PipelineError, Stage, StageExt};

fn provenance(cfg: &PipelineConfig) -> Provenance {
    Provenance { seed: cfg.seed, config_digest: cfg.digest() }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> pqo::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> pqo::Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn ensure_dir(cfg: &PipelineConfig, stage: Stage) -> Result<(), PipelineError> {
    fs::create_dir_all(&cfg.output_dir).map_err(Error::from).stage(stage)
}

/// Builds the scenario and writes the schema and the workload.
pub fn gen(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let st = Stage::Gen;
    ensure_dir(cfg, st)?;
    let s = Scenario::build(&cfg.scenario, cfg.seed).stage(st)?;
    let workload = s.workload(cfg.instances, cfg.seed).stage(st)?;
    s.schema.write(cfg.path(&cfg.files.schema)).stage(st)?;
    let wf = WorkloadFile {
        scenario: s.kind,
        template: s.template.clone(),
        cost_model: s.cost.clone(),
        noise_level: s.noise_level,
        provenance: provenance(cfg),
        workload,
    };
    wf.write(cfg.path(&cfg.files.workload)).stage(st)?;
    info!("gen: {} instances of `{}`", cfg.instances, s.template.template_id());
    Ok(())
}

fn load_simulation(cfg: &PipelineConfig, st: Stage) -> Result<(Schema, WorkloadFile), PipelineError> {
    let schema = Schema::read(cfg.path(&cfg.files.schema)).stage(st)?;
    let wf = WorkloadFile::read(cfg.path(&cfg.files.workload)).stage(st)?;
    Ok((schema, wf))
}

/// Runs row count evolution over the workload.
pub fn candidates(cfg: &PipelineConfig) -> Result<CandidateSet, PipelineError> {
    let st = Stage::Candidates;
    let (schema, wf) = load_simulation(cfg, st)?;
    let db = wf.simdb(&schema).stage(st)?;
    let mut set = workload_candidate_generation(&wf.workload, &db, &cfg.rce_params()).stage(st)?;
    set.provenance = provenance(cfg);
    set.write(cfg.path(&cfg.files.candidates)).stage(st)?;
    info!("candidates: {} distinct plans", set.len());
    Ok(set)
}

/// Executes candidates under adaptive timeouts and writes the dataset,
/// the plan cover and the collection report.
pub fn collect(cfg: &PipelineConfig) -> Result<PlanCover, PipelineError> {
    let st = Stage::Collect;
    let (schema, wf) = load_simulation(cfg, st)?;
    let db = wf.simdb(&schema).stage(st)?;
    let set = CandidateSet::read(cfg.path(&cfg.files.candidates)).stage(st)?;
    let c = collect_training_data(&wf.workload, &set.plans(), &db, &cfg.collection_policy(), provenance(cfg)).stage(st)?;
    c.dataset.write(cfg.path(&cfg.files.dataset)).stage(st)?;
    write_json(&cfg.path(&cfg.files.cover), &c.cover).stage(st)?;
    write_json(&cfg.path(&cfg.files.collect_report), &c.report).stage(st)?;
    for d in &c.report.diagnostics {
        log::warn!("collect: {d}");
    }
    info!(
        "collect: {} plan runs, cover of {} plans, {} censored records",
        c.report.runs_total, c.report.cover_size, c.report.censored_records
    );
    Ok(c.cover)
}

/// Numeric position of a binding, dates as days since 1970-01-01.
fn numeric(v: &ParamValue) -> Option<f64> {
    match v {
        ParamValue::Int(x) => Some(*x as f64),
        ParamValue::Float(x) => Some(*x),
        ParamValue::Date(d) => {
            let epoch = chrono::NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date");
            Some((*d - epoch).num_days() as f64)
        }
        ParamValue::String(_) => None,
    }
}

/// Instances in the top `fraction` of slot `h.slot`'s observed range.
pub fn holdout_indices(w: &Workload, h: &Holdout) -> pqo::Result<Vec<usize>> {
    let values = w
        .instances
        .iter()
        .map(|q| {
            q.bindings.get(h.slot).and_then(numeric).ok_or_else(|| {
                Error::InvalidArgument(format!("holdout slot {} is missing or not numeric", h.slot))
            })
        })
        .collect::<pqo::Result<Vec<f64>>>()?;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = hi - h.fraction * (hi - lo);
    Ok((0..values.len()).filter(|&i| values[i] >= cut && hi > lo).collect())
}

/// Train and test indices, and the held-out slice when configured.
pub fn splits(cfg: &PipelineConfig, ds: &ExecutionDataset) -> pqo::Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (mut train, mut test) = split_indices(ds.num_instances(), cfg.train_fraction, cfg.seed)?;
    let held = match &cfg.holdout {
        Some(h) => holdout_indices(&ds.workload(), h)?,
        None => Vec::new(),
    };
    if !held.is_empty() {
        train.retain(|i| held.binary_search(i).is_err());
        test.retain(|i| held.binary_search(i).is_err());
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("train or test split is empty".into()));
    }
    Ok((train, test, held))
}

/// Trains the model from the dataset and plan cover alone.
pub fn train(cfg: &PipelineConfig) -> Result<ModelArtifact, PipelineError> {
    let st = Stage::Train;
    let ds = ExecutionDataset::read(cfg.path(&cfg.files.dataset)).stage(st)?;
    let cover: PlanCover = read_json(&cfg.path(&cfg.files.cover)).stage(st)?;
    let schema_path = cfg.path(&cfg.files.schema);
    let schema = match cfg.model.feature_mode {
        pqo::learn::FeatureMode::Selectivity => Some(Schema::read(&schema_path).stage(st)?),
        pqo::learn::FeatureMode::Values => None,
    };
    let (tr, _, _) = splits(cfg, &ds).stage(st)?;
    let (mut model, report) = pqo::learn::train_model(&ds, &cover.plans, &tr, &cfg.model, cfg.seed, schema.as_ref()).stage(st)?;
    model.provenance = provenance(cfg);
    model.write(cfg.path(&cfg.files.model)).stage(st)?;
    write_json(&cfg.path(&cfg.files.train_report), &report).stage(st)?;
    info!(
        "train: {} examples, {} heads, loss {:.4} -> {:.4}",
        report.examples,
        report.heads,
        report.losses[0],
        report.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(model)
}

fn choices(model: &ModelArtifact, ds: &ExecutionDataset, idx: &[usize], threshold: f64) -> pqo::Result<Vec<PlanChoice>> {
    idx.iter().map(|&i| model.predict_with_threshold(&ds.instances[i], threshold)).collect()
}

fn mean_confidence(c: &[PlanChoice]) -> f64 {
    c.iter().map(|c| c.confidence).sum::<f64>() / c.len().max(1) as f64
}

/// Scores the model on the test split and writes JSON, text and CSV
/// reports.
pub fn evaluate(cfg: &PipelineConfig) -> Result<EvaluationReport, PipelineError> {
    let st = Stage::Evaluate;
    let ds = ExecutionDataset::read(cfg.path(&cfg.files.dataset)).stage(st)?;
    let cover: PlanCover = read_json(&cfg.path(&cfg.files.cover)).stage(st)?;
    let model = ModelArtifact::read(cfg.path(&cfg.files.model)).stage(st)?;
    let table = LatencyTable::from_dataset(&ds).stage(st)?;
    let (train_idx, test, held) = splits(cfg, &ds).stage(st)?;
    let threshold = model.threshold;

    let chosen = choices(&model, &ds, &test, threshold).stage(st)?;
    let metrics = metrics_report(&table, &cover.plans, &chosen, &test).stage(st)?;
    let speedups: Vec<f64> = metrics.per_instance.iter().map(|o| o.speedup).collect();
    let mut sweep = Vec::new();
    for t in SWEEP {
        let c = choices(&model, &ds, &test, t).stage(st)?;
        let p_reg = regression_frequency(&table, &c, &test, 0.10).stage(st)?;
        sweep.push(SweepPoint {
            threshold: t,
            s_model: pqo::eval::model_speedup(&table, &c, &test).stage(st)?,
            p_reg,
            regressions: (p_reg * test.len() as f64).round() as usize,
            fallbacks: c.iter().filter(|c| c.fallback()).count(),
        });
    }
    let holdout = match &cfg.holdout {
        Some(h) if !held.is_empty() => {
            let open = choices(&model, &ds, &held, 0.0).stage(st)?;
            let guarded = choices(&model, &ds, &held, threshold).stage(st)?;
            Some(HoldoutReport {
                slot: h.slot,
                instances: held.len(),
                mean_confidence_test: mean_confidence(&chosen),
                mean_confidence_holdout: mean_confidence(&open),
                p_reg_without_fallback: regression_frequency(&table, &open, &held, 0.10).stage(st)?,
                p_reg_with_fallback: regression_frequency(&table, &guarded, &held, 0.10).stage(st)?,
            })
        }
        _ => None,
    };
    let simulator = simulator_analysis(cfg).stage(st)?;

    let report = EvaluationReport {
        format_version: FORMAT_VERSION,
        kind: "metrics".into(),
        provenance: provenance(cfg),
        template_id: ds.template.template_id().to_string(),
        threshold,
        train_instances: train_idx.len(),
        geometric_mean_speedup: geometric_mean(&speedups).unwrap_or(f64::NAN),
        test: metrics,
        sweep,
        holdout,
        simulator,
    };
    write_json(&cfg.path(&cfg.files.metrics), &report).stage(st)?;
    fs::write(cfg.path(&cfg.files.metrics_text), report.to_text()).map_err(Error::from).stage(st)?;
    fs::write(cfg.path(&cfg.files.per_instance_csv), report.to_csv()).map_err(Error::from).stage(st)?;
    info!("evaluate: S_opt {:.3}, S_model {:.3}, P_reg {:.4}", report.test.s_opt, report.test.s_model, report.test.p_reg);
    Ok(report)
}

/// Noiseless comparisons, available when the simulator files are present.
fn simulator_analysis(cfg: &PipelineConfig) -> pqo::Result<Option<SimulatorAnalysis>> {
    let paths = [&cfg.files.schema, &cfg.files.workload, &cfg.files.candidates].map(|f| cfg.path(f));
    if !paths.iter().all(|p| p.exists()) {
        return Ok(None);
    }
    let schema = Schema::read(&paths[0])?;
    let wf = WorkloadFile::read(&paths[1])?;
    let set = CandidateSet::read(&paths[2])?;
    let db = wf.simdb(&schema)?;
    let exact = exact_cardinality_comparison(&db, &wf.workload, &set)?;
    let sharing = plan_sharing(&db, &wf.workload, &set)?;
    Ok(Some(SimulatorAnalysis { exact: (&exact).into(), sharing }))
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub candidates: usize,
    pub cover: PlanCover,
    pub report: EvaluationReport,
}

/// All stages in order.
pub fn run(cfg: &PipelineConfig) -> Result<RunSummary, PipelineError> {
    gen(cfg)?;
    let set = candidates(cfg)?;
    let cover = collect(cfg)?;
    train(cfg)?;
    let report = evaluate(cfg)?;
    Ok(RunSummary { candidates: set.len(), cover, report })
}

/// Predictions for every instance of a workload file.
pub fn predict(model: &Path, workload: &Path, threshold: Option<f64>) -> Result<Vec<PlanChoice>, PipelineError> {
    let st = Stage::Predict;
    let model = ModelArtifact::read(model).stage(st)?;
    let wf = WorkloadFile::read(workload).stage(st)?;
    let t = threshold.unwrap_or(model.threshold);
    if !(0.0..=1.0).contains(&t) {
        return Err(PipelineError::Config(format!("threshold must be in [0, 1], got {t}")));
    }
    wf.workload.instances.iter().map(|q| model.predict_with_threshold(q, t)).collect::<pqo::Result<_>>().stage(st)
}
