//! Probability traces, moving-average smoothing, and two-classifier fusion.

use std::path::Path;

use ndarray::{s, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::dsp::{self, WindowBatch};
use crate::eeg_io::EegRecord;
use crate::error::{Result, SdaError};
use crate::metrics;
use crate::net::{model_forward, Mode, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Raw,
    Smoothed,
    Fused,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Smoothed => "smoothed",
            Stage::Fused => "fused",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTrace {
    pub record_id: String,
    pub stride_s: f64,
    pub start_times_s: Vec<f64>,
    pub probs: Vec<f64>,
    pub stage: Stage,
}

impl ProbabilityTrace {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.start_times_s.len() != self.probs.len() {
            return Err(SdaError::Misaligned(format!(
                "{}: {} timestamps for {} probabilities",
                self.record_id,
                self.start_times_s.len(),
                self.probs.len()
            )));
        }
        if let Some(p) = self.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(SdaError::Shape(format!("{}: probability {p} outside [0, 1]", self.record_id)));
        }
        let regular = self
            .start_times_s
            .windows(2)
            .all(|w| ((w[1] - w[0]) - self.stride_s).abs() < 1e-9);
        if !(self.stride_s > 0.0) || !regular {
            return Err(SdaError::Shape(format!(
                "{}: timestamps are not spaced by the stride",
                self.record_id
            )));
        }
        Ok(())
    }

    /// `time_s,prob,stage` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time_s", "prob", "stage"])?;
        for (t, p) in self.start_times_s.iter().zip(&self.probs) {
            w.serialize((t, p, self.stage.as_str()))?;
        }
        w.flush().map_err(|e| SdaError::io(path, e))
    }
}

/// Anything that maps `(windows, channels, time)` input to one seizure
/// probability per window.
pub trait Predictor {
    fn predict_windows(&self, windows: &ArrayView3<f64>) -> Result<Vec<f64>>;
}

/// Windows per forward pass during inference. Fixed so results do not
/// depend on how many records are scored together.
pub const INFER_CHUNK: usize = 128;

impl Predictor for NetworkParams {
    fn predict_windows(&self, windows: &ArrayView3<f64>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(windows.len_of(ndarray::Axis(0)));
        let n = windows.dim().0;
        for start in (0..n).step_by(INFER_CHUNK) {
            let end = (start + INFER_CHUNK).min(n);
            let chunk = windows.slice(s![start..end, .., ..]);
            out.extend(model_forward(self, &chunk, Mode::Infer)?.seizure_prob);
        }
        Ok(out)
    }
}

/// Raw trace for an already segmented record.
pub fn predict_batch(predictor: &dyn Predictor, batch: &WindowBatch) -> Result<ProbabilityTrace> {
    let probs = predictor.predict_windows(&batch.windows.view())?;
    Ok(ProbabilityTrace {
        record_id: batch.record_id.clone(),
        stride_s: batch.stride_s,
        start_times_s: batch.start_times_s.clone(),
        probs,
        stage: Stage::Raw,
    })
}

/// Segments a 32 Hz record and scores every window.
pub fn predict_trace(predictor: &dyn Predictor, record_32hz: &EegRecord, stride_s: u32) -> Result<ProbabilityTrace> {
    let batch = dsp::segment(record_32hz, stride_s)?;
    predict_batch(predictor, &batch)
}

/// Centered moving mean over `width` windows; the ends average whatever
/// values are available.
pub fn moving_average(trace: &ProbabilityTrace, width: usize) -> Result<ProbabilityTrace> {
    if width % 2 == 0 {
        return Err(SdaError::Config(format!("smoothing width {width} must be odd")));
    }
    let half = width / 2;
    let n = trace.probs.len();
    let probs = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            if width == 1 {
                return trace.probs[i];
            }
            let m = trace.probs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            m.clamp(0.0, 1.0)
        })
        .collect();
    Ok(ProbabilityTrace {
        probs,
        stage: Stage::Smoothed,
        ..trace.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Arithmetic,
    Geometric,
}

impl FusionMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMethod::Arithmetic => "arithmetic",
            FusionMethod::Geometric => "geometric",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    pub method: FusionMethod,
    pub alphas: Vec<f64>,
}

/// Lower clamp for geometric fusion inputs.
pub const GEOMETRIC_FLOOR: f64 = 1e-9;

impl FusionSpec {
    /// Two-classifier spec with weight `alpha` on the second classifier.
    pub fn pair(method: FusionMethod, alpha: f64) -> Self {
        FusionSpec {
            method,
            alphas: vec![1.0 - alpha, alpha],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(SdaError::Config(format!("fusion weights {:?} must be non-negative", self.alphas)));
        }
        let total: f64 = self.alphas.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SdaError::Config(format!("fusion weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Fused value of one timestamp.
    pub fn combine(&self, probs: &[f64]) -> f64 {
        match self.method {
            FusionMethod::Arithmetic => self.alphas.iter().zip(probs).map(|(a, p)| a * p).sum(),
            FusionMethod::Geometric => self
                .alphas
                .iter()
                .zip(probs)
                .map(|(&a, &p)| {
                    // Integer exponents are exact; only fractional ones need
                    // the floor to keep 0^a defined.
                    if a == 0.0 {
                        1.0
                    } else if a == 1.0 {
                        p
                    } else {
                        p.max(GEOMETRIC_FLOOR).powf(a)
                    }
                })
                .product::<f64>()
                .clamp(0.0, 1.0),
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| SdaError::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| SdaError::io(path, e))?;
        let spec: FusionSpec = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

pub fn fuse(traces: &[&ProbabilityTrace], spec: &FusionSpec) -> Result<ProbabilityTrace> {
    spec.validate()?;
    let first = *traces
        .first()
        .ok_or_else(|| SdaError::Misaligned("no traces to fuse".into()))?;
    if traces.len() != spec.alphas.len() {
        return Err(SdaError::Misaligned(format!(
            "{} traces but {} fusion weights",
            traces.len(),
            spec.alphas.len()
        )));
    }
    for t in &traces[1..] {
        if t.record_id != first.record_id || t.stride_s != first.stride_s || t.start_times_s != first.start_times_s {
            return Err(SdaError::Misaligned(format!(
                "trace {} does not line up with {}",
                t.record_id, first.record_id
            )));
        }
    }
    let mut column = vec![0.0; traces.len()];
    let probs = (0..first.len())
        .map(|i| {
            for (c, t) in column.iter_mut().zip(traces) {
                *c = t.probs[i];
            }
            spec.combine(&column)
        })
        .collect();
    Ok(ProbabilityTrace {
        record_id: first.record_id.clone(),
        stride_s: first.stride_s,
        start_times_s: first.start_times_s.clone(),
        probs,
        stage: Stage::Fused,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub method: FusionMethod,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSelection {
    pub spec: FusionSpec,
    pub val_auc: f64,
    pub sweep: Vec<SweepRow>,
}

/// Grid search over the weight of the second classifier, both methods.
/// `first[i]`, `second[i]` and `labels[i]` belong to the same validation
/// record. Ties keep the smaller weight, then arithmetic over geometric.
pub fn select_fusion(
    first: &[ProbabilityTrace],
    second: &[ProbabilityTrace],
    labels: &[Vec<u8>],
    grid_step: f64,
) -> Result<FusionSelection> {
    select_fusion_then_smooth(first, second, labels, grid_step, 1)
}

/// As [`select_fusion`], but every fused candidate is smoothed with a
/// moving average of `width` before scoring.
pub fn select_fusion_then_smooth(
    first: &[ProbabilityTrace],
    second: &[ProbabilityTrace],
    labels: &[Vec<u8>],
    grid_step: f64,
    width: usize,
) -> Result<FusionSelection> {
    if first.len() != second.len() || first.len() != labels.len() {
        return Err(SdaError::Misaligned("classifier traces and labels cover different records".into()));
    }
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(SdaError::Config(format!("grid step {grid_step} outside (0, 1]")));
    }
    let steps = (1.0 / grid_step).round() as usize;
    if ((steps as f64) * grid_step - 1.0).abs() > 1e-9 {
        return Err(SdaError::Config(format!("grid step {grid_step} does not divide 1")));
    }
    let mut sweep = Vec::with_capacity(2 * (steps + 1));
    let mut best: Option<(FusionSpec, f64)> = None;
    for method in [FusionMethod::Arithmetic, FusionMethod::Geometric] {
        for k in 0..=steps {
            let alpha = k as f64 / steps as f64;
            let spec = FusionSpec::pair(method, alpha);
            let fused: Vec<ProbabilityTrace> = first
                .iter()
                .zip(second)
                .map(|(a, b)| {
                    let f = fuse(&[a, b], &spec)?;
                    if width > 1 {
                        moving_average(&f, width)
                    } else {
                        Ok(f)
                    }
                })
                .collect::<Result<_>>()?;
            let parts: Vec<(&[f64], &[u8])> = fused
                .iter()
                .zip(labels)
                .map(|(t, l)| (t.probs.as_slice(), l.as_slice()))
                .collect();
            let val_auc = metrics::auc_concat(&parts)?;
            sweep.push(SweepRow { alpha, method, val_auc });
            let better = match &best {
                None => true,
                Some((b, auc)) => val_auc > *auc || (val_auc == *auc && alpha < b.alphas[1]),
            };
            if better {
                best = Some((spec, val_auc));
            }
        }
    }
    let (spec, val_auc) = best.expect("grid is never empty");
    Ok(FusionSelection { spec, val_auc, sweep })
}

pub fn write_sweep_csv(sweep: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["alpha", "method", "val_auc"])?;
    for r in sweep {
        w.serialize((r.alpha, r.method.as_str(), r.val_auc))?;
    }
    w.flush().map_err(|e| SdaError::io(path, e))
}
