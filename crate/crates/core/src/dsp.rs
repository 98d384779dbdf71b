//! Preprocessing: anti-alias low-pass, decimation to 32 Hz, 0.5 Hz
//! high-pass, and sliding-window segmentation with weak labels.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::eeg_io::{AnnotationSet, EegRecord};
use crate::error::{Result, SdaError};

pub const TARGET_FS_HZ: f64 = 32.0;
pub const ANTI_ALIAS_CUTOFF_HZ: f64 = 12.8;
pub const HIGHPASS_CUTOFF_HZ: f64 = 0.5;
pub const WINDOW_SAMPLES: usize = 256;
pub const WINDOW_S: f64 = 8.0;
/// Anti-alias filter length at 256 Hz; scaled proportionally for other rates.
pub const LOWPASS_TAPS_AT_256: usize = 129;
pub const HIGHPASS_TAPS: usize = 129;
/// Record edges affected by filter transients; windows touching them are
/// excluded from training.
pub const EDGE_S: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Lowpass,
    Highpass,
}

/// Linear-phase FIR filter (odd length, integer group delay).
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub kind: FilterKind,
    pub cutoff_hz: f64,
    pub design_fs_hz: f64,
}

impl FirFilter {
    pub fn group_delay(&self) -> usize {
        (self.taps.len() - 1) / 2
    }

    /// Magnitude of the frequency response at `freq_hz`.
    pub fn gain_at(&self, freq_hz: f64) -> f64 {
        let w = 2.0 * PI * freq_hz / self.design_fs_hz;
        let (re, im) = self
            .taps
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (n, &h)| {
                let phase = w * n as f64;
                (re + h * phase.cos(), im - h * phase.sin())
            });
        re.hypot(im)
    }

    /// Approximate transition width of the Hamming-windowed design.
    pub fn transition_width_hz(&self) -> f64 {
        3.3 * self.design_fs_hz / self.taps.len() as f64
    }
}

fn hamming(n: usize, len: usize) -> f64 {
    0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos()
}

/// Windowed-sinc (Hamming) design. The low-pass is normalised to unit DC
/// gain; the high-pass is its spectral inversion.
pub fn design_fir(kind: FilterKind, cutoff_hz: f64, fs_hz: f64, n_taps: usize) -> Result<FirFilter> {
    if !(cutoff_hz > 0.0 && cutoff_hz < fs_hz / 2.0) {
        return Err(SdaError::FilterDesign(format!(
            "cutoff {cutoff_hz} Hz outside (0, {}) Hz",
            fs_hz / 2.0
        )));
    }
    if n_taps % 2 == 0 || n_taps < 3 {
        return Err(SdaError::FilterDesign(format!(
            "tap count {n_taps} must be odd and at least 3"
        )));
    }
    let fc = cutoff_hz / fs_hz;
    let mid = (n_taps / 2) as isize;
    let mut taps: Vec<f64> = (0..n_taps)
        .map(|n| {
            let m = (n as isize - mid) as f64;
            let sinc = if m == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * m).sin() / (PI * m)
            };
            sinc * hamming(n, n_taps)
        })
        .collect();
    let dc: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|h| *h /= dc);

    if kind == FilterKind::Highpass {
        taps.iter_mut().for_each(|h| *h = -*h);
        taps[mid as usize] += 1.0;
    }
    Ok(FirFilter {
        taps,
        kind,
        cutoff_hz,
        design_fs_hz: fs_hz,
    })
}

/// Zero-phase filtering by group-delay compensation: output sample `n` is
/// the causal filter output at `n + delay`, with zero padding at both edges.
pub fn filter_signal(filter: &FirFilter, signal: &[f64]) -> Result<Vec<f64>> {
    filter_decimate(filter, signal, 1)
}

/// Same as [`filter_signal`] followed by keeping every `factor`-th sample,
/// without computing the discarded outputs.
pub fn filter_decimate(filter: &FirFilter, signal: &[f64], factor: usize) -> Result<Vec<f64>> {
    let n_taps = filter.taps.len();
    if signal.len() <= n_taps {
        return Err(SdaError::SignalTooShort {
            len: signal.len(),
            required: n_taps,
        });
    }
    let delay = filter.group_delay() as isize;
    let len = signal.len() as isize;
    let out = (0..signal.len())
        .step_by(factor.max(1))
        .map(|n| {
            // y[n] = sum_k h[k] x[n + delay - k]
            let base = n as isize + delay;
            let k_lo = (base - (len - 1)).max(0) as usize;
            let k_hi = (base.min(n_taps as isize - 1)) as usize;
            (k_lo..=k_hi)
                .map(|k| filter.taps[k] * signal[(base - k as isize) as usize])
                .sum()
        })
        .collect();
    Ok(out)
}

/// The filters used by [`resample_to_32hz`] for a given input rate.
pub fn preprocessing_filters(fs_hz: f64) -> Result<(FirFilter, FirFilter, usize)> {
    let factor = decimation_factor(fs_hz)?;
    let lp_taps = (LOWPASS_TAPS_AT_256 - 1) * factor / 8 + 1;
    let lowpass = design_fir(FilterKind::Lowpass, ANTI_ALIAS_CUTOFF_HZ, fs_hz, lp_taps)?;
    let highpass = design_fir(FilterKind::Highpass, HIGHPASS_CUTOFF_HZ, TARGET_FS_HZ, HIGHPASS_TAPS)?;
    Ok((lowpass, highpass, factor))
}

fn decimation_factor(fs_hz: f64) -> Result<usize> {
    let ratio = fs_hz / TARGET_FS_HZ;
    if !(ratio.is_finite() && ratio >= 1.0 && (ratio - ratio.round()).abs() < 1e-9) {
        return Err(SdaError::UnsupportedRate {
            fs_hz,
            reason: format!("decimation factor {ratio} is not an integer"),
        });
    }
    if fs_hz != 256.0 && fs_hz != 1024.0 {
        return Err(SdaError::UnsupportedRate {
            fs_hz,
            reason: "expected 256 or 1024 Hz".into(),
        });
    }
    Ok(ratio.round() as usize)
}

/// Low-pass at 12.8 Hz, keep every `fs/32`-th sample, then high-pass at
/// 0.5 Hz. Channels are processed independently and in parallel.
pub fn resample_to_32hz(record: &EegRecord) -> Result<EegRecord> {
    use rayon::prelude::*;

    let (lowpass, highpass, factor) = preprocessing_filters(record.fs_hz)?;
    let rows: Vec<Vec<f64>> = record.samples.rows().into_iter().map(|r| r.to_vec()).collect();
    let channels: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|x| {
            let decimated = filter_decimate(&lowpass, x, factor)?;
            filter_signal(&highpass, &decimated)
        })
        .collect::<Result<_>>()?;
    let n_out = channels[0].len();
    let flat: Vec<f64> = channels.into_iter().flatten().collect();
    let samples = Array2::from_shape_vec((record.n_channels(), n_out), flat)
        .map_err(|e| SdaError::Shape(e.to_string()))?;
    Ok(EegRecord {
        record_id: record.record_id.clone(),
        ga_weeks: record.ga_weeks,
        fs_hz: TARGET_FS_HZ,
        channel_names: record.channel_names.clone(),
        samples,
        annotations: record.annotations.clone(),
    })
}

/// Segmented 8 s windows from one 32 Hz record.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    /// Windows × channels × 256.
    pub windows: Array3<f64>,
    pub labels: Vec<u8>,
    pub start_times_s: Vec<f64>,
    pub sample_weights: Vec<f64>,
    /// True for windows overlapping the filter-transient zone at either edge.
    pub edge_flags: Vec<bool>,
    pub stride_s: f64,
    pub record_id: String,
    pub ga_weeks: f64,
    /// Length of the source record in seconds.
    pub record_duration_s: f64,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.windows.dim().1
    }

    /// Every `step`-th window, as if segmented with `step` times the stride.
    pub fn every_nth(&self, step: usize) -> WindowBatch {
        let keep: Vec<usize> = (0..self.len()).step_by(step.max(1)).collect();
        let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<f64>>();
        WindowBatch {
            windows: self.windows.select(Axis(0), &keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            start_times_s: pick(&self.start_times_s),
            sample_weights: pick(&self.sample_weights),
            edge_flags: keep.iter().map(|&i| self.edge_flags[i]).collect(),
            stride_s: self.stride_s * step.max(1) as f64,
            record_id: self.record_id.clone(),
            ga_weeks: self.ga_weeks,
            record_duration_s: self.record_duration_s,
        }
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Number of windows `segment` produces for `n_samples` at 32 Hz.
pub fn window_count(n_samples: usize, stride_samples: usize) -> usize {
    if n_samples < WINDOW_SAMPLES {
        0
    } else {
        (n_samples - WINDOW_SAMPLES) / stride_samples + 1
    }
}

/// Slides an 8 s window over a 32 Hz record with a whole-second stride.
/// Labels start at 0 and weights at 1; see [`assign_weak_labels`].
pub fn segment(record: &EegRecord, stride_s: u32) -> Result<WindowBatch> {
    if record.fs_hz != TARGET_FS_HZ {
        return Err(SdaError::UnsupportedRate {
            fs_hz: record.fs_hz,
            reason: "segment expects a 32 Hz record".into(),
        });
    }
    if !(1..=8).contains(&stride_s) {
        return Err(SdaError::Config(format!("stride {stride_s} s outside 1..=8")));
    }
    let n_samples = record.n_samples();
    if n_samples < WINDOW_SAMPLES {
        return Err(SdaError::SignalTooShort {
            len: n_samples,
            required: WINDOW_SAMPLES - 1,
        });
    }
    let stride = stride_s as usize * TARGET_FS_HZ as usize;
    let n_windows = window_count(n_samples, stride);
    let n_ch = record.n_channels();
    let mut windows = Array3::zeros((n_windows, n_ch, WINDOW_SAMPLES));
    for (w, mut win) in windows.axis_iter_mut(Axis(0)).enumerate() {
        let start = w * stride;
        win.assign(&record.samples.slice(ndarray::s![.., start..start + WINDOW_SAMPLES]));
    }
    let duration = record.duration_s();
    let start_times_s: Vec<f64> = (0..n_windows).map(|w| (w * stride_s as usize) as f64).collect();
    let edge_flags = start_times_s
        .iter()
        .map(|&t| t < EDGE_S || t + WINDOW_S > duration - EDGE_S)
        .collect();
    Ok(WindowBatch {
        windows,
        labels: vec![0; n_windows],
        sample_weights: vec![1.0; n_windows],
        start_times_s,
        edge_flags,
        stride_s: f64::from(stride_s),
        record_id: record.record_id.clone(),
        ga_weeks: record.ga_weeks,
        record_duration_s: duration,
    })
}

/// Default fraction of a window that must be seizure for a positive label.
pub const DEFAULT_LABEL_OVERLAP: f64 = 0.5;

/// Label each window 1 iff at least `min_fraction` of its span lies inside
/// annotated seizure time.
pub fn assign_weak_labels(mut batch: WindowBatch, annotations: &AnnotationSet, min_fraction: f64) -> WindowBatch {
    batch.labels = batch
        .start_times_s
        .iter()
        .map(|&t| {
            let covered = annotations.overlap_s(t, t + WINDOW_S);
            u8::from(covered >= min_fraction * WINDOW_S)
        })
        .collect();
    batch
}

/// Resample, segment and label one raw record.
pub fn prepare_record(record: &EegRecord, stride_s: u32, min_fraction: f64) -> Result<WindowBatch> {
    let resampled = if record.fs_hz == TARGET_FS_HZ {
        record.clone()
    } else {
        resample_to_32hz(record)?
    };
    let batch = segment(&resampled, stride_s)?;
    Ok(assign_weak_labels(batch, &record.annotations, min_fraction))
}
