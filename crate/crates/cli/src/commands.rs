use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use sda_core::dsp::{self, WindowBatch};
use sda_core::eeg_io::{validate_manifest, DatasetManifest, ManifestReport, OverlapPolicy, SeizureEvent, Split};
use sda_core::infer::{self, FusionSelection, ProbabilityTrace, Predictor};
use sda_core::metrics::{self, EventMatchResult, MetricReport, OperatingPointReport};
use sda_core::net::init_params;
use sda_core::synth;
use sda_core::train::{self, EnsembleModel, EnsembleOutcome, GaGroup, ModelCheckpoint};
use sda_core::SdaError;
use serde_json::{json, Value};

use crate::config::{require, ExperimentConfig, TrainMode};

/// One manifest record ready for training or scoring.
pub struct Prepared {
    pub batch: WindowBatch,
    pub truth: Vec<SeizureEvent>,
    pub hours: f64,
}

pub fn load_split(manifest: &DatasetManifest, split: Split, config: &ExperimentConfig) -> Result<Vec<Prepared>> {
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        bail!(SdaError::Dataset(format!("manifest has no `{split}` records")));
    }
    let prepared = entries
        .par_iter()
        .map(|e| {
            let record = manifest.load_entry(e, OverlapPolicy::Merge)?;
            let mut batch = dsp::prepare_record(&record, config.stride_s, config.label_overlap)?;
            // The manifest is the authority on GA.
            batch.ga_weeks = e.ga_weeks;
            Ok(Prepared {
                truth: record.annotations.events().to_vec(),
                hours: record.duration_s() / 3600.0,
                batch,
            })
        })
        .collect::<sda_core::Result<Vec<_>>>()?;
    Ok(prepared)
}

fn batches(data: &[Prepared]) -> Vec<WindowBatch> {
    data.iter().map(|p| p.batch.clone()).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `run.json`: the command, the config hash and the hashed config.
fn write_run_info(dir: &Path, command: &str, config: &ExperimentConfig, extra: Value) -> Result<()> {
    let mut hashed = config.clone();
    hashed.paths = Default::default();
    write_json(
        &dir.join("run.json"),
        &json!({
            "command": command,
            "config_hash": config.hash(),
            "config": hashed,
            "result": extra,
        }),
    )
}

pub fn cmd_synth(config: &ExperimentConfig) -> Result<Value> {
    let out = require(&config.paths.output_dir, "output directory (--out)")?;
    let manifest = synth::generate_cohort(&config.synth, &out)?;
    write_run_info(&out, "synth", config, Value::Null)?;
    Ok(json!({
        "manifest": manifest,
        "n_records": config.synth.n_infants,
        "config_hash": config.hash(),
    }))
}

pub fn cmd_validate(config: &ExperimentConfig, required: &[Split]) -> Result<(ManifestReport, bool)> {
    let path = require(&config.paths.manifest, "manifest (--manifest)")?;
    let manifest = DatasetManifest::load(&path)?;
    let mut report = validate_manifest(&manifest);
    report.require_splits(required);
    let ok = report.is_ok();
    Ok((report, ok))
}

fn group_of(config: &ExperimentConfig) -> Result<GaGroup> {
    match config.group {
        Some(g) => Ok(g),
        None => bail!(SdaError::Config(format!(
            "mode {:?} needs a GA group (--group 1, 2 or 3)",
            config.mode
        ))),
    }
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<Value> {
    let out = require(&config.paths.output_dir, "output directory (--out)")?;
    let manifest = DatasetManifest::load(require(&config.paths.manifest, "manifest (--manifest)")?)?;
    let arch = config.architecture.architecture();
    let hash = config.hash();
    // Checked before any loading so interface errors come back at once.
    let group = match config.mode {
        TrainMode::GaTransfer | TrainMode::GaScratch => Some(group_of(config)?),
        _ => None,
    };
    let pretrained = match config.mode {
        TrainMode::GaTransfer => {
            let p = require(&config.paths.pretrained, "pretrained ensemble (--pretrained)")?;
            Some(EnsembleModel::load(&p)?)
        }
        _ => None,
    };
    let train_data = batches(&load_split(&manifest, Split::Train, config)?);
    create_dir(&out)?;

    if config.mode == TrainMode::Base {
        let val = batches(&load_split(&manifest, Split::Val, config)?);
        let init = init_params(arch, config.train.seed);
        let outcome = train::train_model(&train_data, &val, &config.train, init)?;
        outcome.checkpoint.save(out.join("model.ckpt"))?;
        train::write_training_log(&outcome.log, out.join("training_log.csv"))?;
        let summary = json!({
            "mode": config.mode,
            "model": out.join("model.ckpt"),
            "best_epoch": outcome.checkpoint.meta.epoch,
            "val_auc": outcome.checkpoint.meta.val_auc,
            "config_hash": hash,
        });
        write_run_info(&out, "train", config, json!({"val_auc": outcome.checkpoint.meta.val_auc}))?;
        return Ok(summary);
    }

    let outcome: EnsembleOutcome = match (config.mode, group, &pretrained) {
        (TrainMode::Ensemble, _, _) => train::train_ensemble(&train_data, &config.train, arch, config.val_per_member)?,
        (TrainMode::GaTransfer, Some(g), Some(p)) => {
            train::train_ga_specific(&train_data, &g, p, &config.train, config.val_per_member)?
        }
        (TrainMode::GaScratch, Some(g), _) => {
            train::train_ga_from_scratch(&train_data, &g, arch, &config.train, config.val_per_member)?
        }
        _ => unreachable!("mode prerequisites checked above"),
    };
    let metadata = json!({"config_hash": hash, "mode": config.mode, "group": group});
    let manifest_path = outcome.model.save(&out, metadata)?;
    for (i, log) in outcome.logs.iter().enumerate() {
        train::write_training_log(log, out.join(format!("training_log_member_{i}.csv")))?;
    }
    let val_aucs: Vec<f64> = outcome.model.members.iter().map(|m| m.meta.val_auc).collect();
    write_run_info(&out, "train", config, json!({"member_val_auc": val_aucs}))?;
    Ok(json!({
        "mode": config.mode,
        "ensemble": manifest_path,
        "member_val_auc": val_aucs,
        "config_hash": hash,
    }))
}

/// A single checkpoint or an ensemble manifest (`.json`).
pub enum LoadedModel {
    Single(ModelCheckpoint),
    Ensemble(EnsembleModel),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let model = if path.extension().is_some_and(|e| e == "json") {
            LoadedModel::Ensemble(EnsembleModel::load(path)?)
        } else {
            LoadedModel::Single(ModelCheckpoint::load(path)?)
        };
        Ok(model)
    }
}

impl Predictor for LoadedModel {
    fn predict_windows(&self, windows: &ndarray::ArrayView3<f64>) -> sda_core::Result<Vec<f64>> {
        match self {
            LoadedModel::Single(m) => m.predict_windows(windows),
            LoadedModel::Ensemble(m) => m.predict_windows(windows),
        }
    }
}

/// Smoothed trace for every record.
fn score(model: &LoadedModel, data: &[Prepared], smooth_width: usize) -> Result<Vec<ProbabilityTrace>> {
    let traces = data
        .par_iter()
        .map(|p| {
            let raw = infer::predict_batch(model, &p.batch)?;
            if smooth_width > 1 {
                infer::moving_average(&raw, smooth_width)
            } else {
                Ok(raw)
            }
        })
        .collect::<sda_core::Result<Vec<_>>>()?;
    Ok(traces)
}

/// Writes traces, ROC, detection curve and leave-one-out files with
/// `prefix`, and returns the report.
fn evaluate(
    traces: &[ProbabilityTrace],
    data: &[Prepared],
    config: &ExperimentConfig,
    out: &Path,
    prefix: &str,
) -> Result<MetricReport> {
    let ev = &config.eval;
    let trace_dir = out.join(format!("{prefix}traces"));
    create_dir(&trace_dir)?;
    for t in traces {
        t.write_csv(trace_dir.join(format!("{}.csv", t.record_id)))?;
    }

    let probs: Vec<f64> = traces.iter().flat_map(|t| t.probs.iter().copied()).collect();
    let labels: Vec<u8> = data.iter().flat_map(|p| p.batch.labels.iter().copied()).collect();
    let parts: Vec<(&[f64], &[u8])> = traces
        .iter()
        .zip(data)
        .map(|(t, p)| (t.probs.as_slice(), p.batch.labels.as_slice()))
        .collect();
    let auc = metrics::auc_concat(&parts)?;
    let roc = metrics::roc_curve(&probs, &labels)?;
    metrics::write_roc_csv(&roc, out.join(format!("{prefix}roc.csv")))?;
    let confusion = metrics::confusion(&probs, &labels, ev.threshold)?;

    let mut events = EventMatchResult {
        detected_true_events: 0,
        total_true_events: 0,
        false_detection_events: 0,
        total_hours: 0.0,
    };
    for (t, p) in traces.iter().zip(data) {
        let pred = metrics::binarize_events(t, ev.threshold, t.stride_s);
        let m = metrics::match_events(&pred, &p.truth, p.hours)?;
        events.detected_true_events += m.detected_true_events;
        events.total_true_events += m.total_true_events;
        events.false_detection_events += m.false_detection_events;
        events.total_hours += m.total_hours;
    }

    let mut operating_point = None;
    if events.total_true_events > 0 {
        let records: Vec<(&ProbabilityTrace, &[SeizureEvent], f64)> = traces
            .iter()
            .zip(data)
            .map(|(t, p)| (t, p.truth.as_slice(), p.hours))
            .collect();
        let curve = metrics::detection_curve(&records, &metrics::threshold_grid(ev.detection_grid), ev.averaging)?;
        metrics::write_detection_csv(&curve, out.join(format!("{prefix}detection.csv")))?;
        operating_point = ev.operating_point_fdh.map(|fdh| OperatingPointReport {
            max_fd_per_hour: fdh,
            point: metrics::operating_point(&curve, fdh),
        });
    } else if ev.operating_point_fdh.is_some() {
        log::warn!("no annotated events; skipping the detection curve");
    }

    let leave_one_out = if ev.loo {
        let records: Vec<(&str, &[f64], &[u8])> = traces
            .iter()
            .zip(data)
            .map(|(t, p)| (t.record_id.as_str(), t.probs.as_slice(), p.batch.labels.as_slice()))
            .collect();
        let rows = metrics::leave_one_out(&records)?;
        metrics::write_loo_csv(&rows, out.join(format!("{prefix}loo.csv")))?;
        Some(rows)
    } else {
        None
    };

    let report = MetricReport {
        config_hash: config.hash(),
        record_ids: traces.iter().map(|t| t.record_id.clone()).collect(),
        n_windows: probs.len(),
        auc,
        threshold: ev.threshold,
        confusion,
        sensitivity: metrics::sensitivity(&confusion).ok(),
        specificity: metrics::specificity(&confusion).ok(),
        events_at_threshold: Some(events),
        operating_point,
        leave_one_out,
    };
    report.save_json(out.join(format!("{prefix}report.json")))?;
    Ok(report)
}

pub fn cmd_eval(config: &ExperimentConfig) -> Result<MetricReport> {
    let out = require(&config.paths.output_dir, "output directory (--out)")?;
    let model = LoadedModel::load(&require(&config.paths.model, "model (--model)")?)?;
    let manifest = DatasetManifest::load(require(&config.paths.manifest, "manifest (--manifest)")?)?;
    let data = load_split(&manifest, config.eval.split, config)?;
    create_dir(&out)?;
    let traces = score(&model, &data, config.eval.smooth_width)?;
    let report = evaluate(&traces, &data, config, &out, "")?;
    write_run_info(&out, "eval", config, json!({"auc": report.auc}))?;
    Ok(report)
}

fn labels_of(data: &[Prepared]) -> Vec<Vec<u8>> {
    data.iter().map(|p| p.batch.labels.clone()).collect()
}

fn model_path(p: &Option<PathBuf>, what: &str) -> Result<LoadedModel> {
    LoadedModel::load(&require(p, what)?)
}

pub fn cmd_fuse(config: &ExperimentConfig) -> Result<Value> {
    let out = require(&config.paths.output_dir, "output directory (--out)")?;
    let first = model_path(&config.paths.first, "first classifier (--first)")?;
    let second = model_path(&config.paths.second, "second classifier (--second)")?;
    let manifest = DatasetManifest::load(require(&config.paths.manifest, "manifest (--manifest)")?)?;
    let val = load_split(&manifest, Split::Val, config)?;
    let test = load_split(&manifest, config.eval.split, config)?;
    create_dir(&out)?;

    let (width, after) = match config.eval.smooth_after_fusion {
        false => (config.eval.smooth_width, 1),
        true => (1, config.eval.smooth_width),
    };
    let (val_a, val_b) = (score(&first, &val, width)?, score(&second, &val, width)?);
    let selection: FusionSelection =
        infer::select_fusion_then_smooth(&val_a, &val_b, &labels_of(&val), config.fusion_grid_step, after)?;
    infer::write_sweep_csv(&selection.sweep, out.join("sweep.csv"))?;
    selection.spec.save_json(out.join("fusion_spec.json"))?;

    let (test_a, test_b) = (score(&first, &test, width)?, score(&second, &test, width)?);
    let fused = test_a
        .iter()
        .zip(&test_b)
        .map(|(a, b)| {
            let f = infer::fuse(&[a, b], &selection.spec)?;
            if after > 1 {
                infer::moving_average(&f, after)
            } else {
                Ok(f)
            }
        })
        .collect::<sda_core::Result<Vec<_>>>()?;
    let report = evaluate(&fused, &test, config, &out, "fused_")?;

    let endpoint = |alpha: f64| {
        selection
            .sweep
            .iter()
            .find(|r| r.alpha == alpha)
            .map(|r| r.val_auc)
            .expect("sweep covers both endpoints")
    };
    let summary = json!({
        "spec": selection.spec,
        "val_auc": selection.val_auc,
        "val_auc_first": endpoint(0.0),
        "val_auc_second": endpoint(1.0),
        "test_auc": report.auc,
        "config_hash": config.hash(),
    });
    write_run_info(&out, "fuse", config, summary.clone())?;
    Ok(summary)
}
