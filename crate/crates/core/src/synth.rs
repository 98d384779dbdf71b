//! Synthetic preterm EEG: tracé discontinu background (bursts separated by
//! low-voltage inter-burst intervals that shorten with gestational age) and
//! focal rhythmic delta seizures. All waveform parameters are made up for
//! pipeline testing; the data has no clinical meaning.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eeg_io::{
    save_annotations, save_record, AnnotationSet, DatasetManifest, EegRecord, ManifestEntry, OverlapPolicy,
    SeizureEvent, Split, MAX_GA_WEEKS, MIN_GA_WEEKS, MIN_SEIZURE_S,
};
use crate::error::{Result, SdaError};

/// Seizures shorter than this count as short.
pub const SHORT_SEIZURE_S: f64 = 60.0;
const LONG_TAIL_MEAN_S: f64 = 90.0;
const MAX_SEIZURE_S: f64 = 300.0;
/// Minimum gap kept between generated seizures so they never merge.
const MIN_GAP_S: f64 = 10.0;
const PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_infants: usize,
    pub ga_range_weeks: (f64, f64),
    pub fs_hz: f64,
    pub n_channels: usize,
    pub record_minutes: f64,
    pub seizure_rate_per_hour: f64,
    pub seed: u64,
    pub short_seizure_fraction: f64,
    pub seizure_freq_band_hz: (f64, f64),
    pub focal_channel_count: usize,
    /// Peak seizure amplitude range before the maturity scaling, µV.
    pub seizure_amplitude_uv: (f64, f64),
    /// The last `n_test_infants` infants form the test split.
    pub n_test_infants: usize,
    /// The `n_val_infants` infants just before the test block form the
    /// validation split.
    pub n_val_infants: usize,
    /// The last `n_control_infants` infants have no seizures; they are
    /// always inside the test split.
    pub n_control_infants: usize,
    /// Added to the infant index in record ids, so cohorts can be combined.
    pub id_offset: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_infants: 16,
            ga_range_weeks: (27.0, 33.0),
            fs_hz: 256.0,
            n_channels: 8,
            record_minutes: 30.0,
            seizure_rate_per_hour: 4.0,
            seed: 0,
            short_seizure_fraction: 0.46,
            seizure_freq_band_hz: (0.5, 3.0),
            focal_channel_count: 2,
            seizure_amplitude_uv: (15.0, 35.0),
            n_test_infants: 4,
            n_val_infants: 0,
            n_control_infants: 1,
            id_offset: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SdaError::Config(m));
        let (lo, hi) = self.ga_range_weeks;
        if !(MIN_GA_WEEKS <= lo && lo <= hi && hi <= MAX_GA_WEEKS) {
            return bad(format!("GA range ({lo}, {hi}) outside [{MIN_GA_WEEKS}, {MAX_GA_WEEKS}]"));
        }
        if !(0.0..=1.0).contains(&self.short_seizure_fraction) {
            return bad(format!("short seizure fraction {} outside [0, 1]", self.short_seizure_fraction));
        }
        if !(self.seizure_rate_per_hour >= 0.0) {
            return bad(format!("seizure rate {} must be non-negative", self.seizure_rate_per_hour));
        }
        let (f_lo, f_hi) = self.seizure_freq_band_hz;
        if !(0.0 < f_lo && f_lo <= f_hi && 3.0 * f_hi < self.fs_hz / 2.0) {
            return bad(format!("seizure band ({f_lo}, {f_hi}) Hz invalid at {} Hz", self.fs_hz));
        }
        if self.n_channels == 0 || self.focal_channel_count == 0 || self.focal_channel_count > self.n_channels {
            return bad(format!(
                "{} focal channels out of {}",
                self.focal_channel_count, self.n_channels
            ));
        }
        if !(self.record_minutes * 60.0 >= 2.0 * MIN_SEIZURE_S) {
            return bad(format!("records of {} min are too short", self.record_minutes));
        }
        let (a_lo, a_hi) = self.seizure_amplitude_uv;
        if !(0.0 < a_lo && a_lo <= a_hi) {
            return bad(format!("seizure amplitude range ({a_lo}, {a_hi}) invalid"));
        }
        if self.n_test_infants > self.n_infants || self.n_control_infants > self.n_test_infants {
            return bad(format!(
                "{} infants cannot hold {} test infants including {} controls",
                self.n_infants, self.n_test_infants, self.n_control_infants
            ));
        }
        if self.n_test_infants + self.n_val_infants > self.n_infants {
            return bad(format!(
                "{} infants cannot hold {} test and {} validation infants",
                self.n_infants, self.n_test_infants, self.n_val_infants
            ));
        }
        Ok(())
    }

    pub fn record_id(&self, idx: usize) -> String {
        format!("inf{:03}", idx + self.id_offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Burst,
    Ibi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSegment {
    pub kind: SegmentKind,
    pub start_s: f64,
    pub end_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundMeta {
    pub mean_ibi_s: f64,
    pub segments: Vec<BackgroundSegment>,
}

impl BackgroundMeta {
    pub fn durations(&self, kind: SegmentKind) -> Vec<f64> {
        self.segments
            .iter()
            .filter(|s| s.kind == kind)
            .map(|s| s.end_s - s.start_s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeizureMeta {
    pub onset_s: f64,
    pub offset_s: f64,
    pub f0_hz: f64,
    pub amplitude_uv: f64,
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecordMeta {
    pub record_id: String,
    pub ga_weeks: f64,
    pub split: Split,
    pub control: bool,
    pub seed: u64,
    pub stream: u64,
    pub background: BackgroundMeta,
    pub seizures: Vec<SeizureMeta>,
    pub dropped_seizures: usize,
}

/// Mean inter-burst interval, shortening linearly with maturation.
pub fn mean_ibi_s(ga_weeks: f64) -> f64 {
    (14.0 - 1.2 * (ga_weeks - 22.0)).max(2.0)
}

/// 0 at 22 weeks, 1 at 34 weeks and above.
fn maturity(ga_weeks: f64) -> f64 {
    ((ga_weeks - 22.0) / 12.0).clamp(0.0, 1.0)
}

pub fn channel_names(n: usize) -> Vec<String> {
    const MONTAGE: [&str; 8] = ["Fp1", "Fp2", "C3", "C4", "T3", "T4", "O1", "O2"];
    if n <= MONTAGE.len() {
        MONTAGE[..n].iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|i| format!("ch{i}")).collect()
    }
}

/// Multichannel tracé discontinu, `(n_channels, duration * fs)` in µV.
pub fn generate_background(
    ga_weeks: f64,
    duration_s: f64,
    fs_hz: f64,
    n_channels: usize,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, BackgroundMeta) {
    let n = (duration_s * fs_hz).round() as usize;
    let mut x = Array2::zeros((n_channels, n));

    // Low-voltage floor: low-passed Gaussian noise, about 5 µV RMS.
    let white = Normal::new(0.0, 22.0).expect("valid sigma");
    for mut row in x.rows_mut() {
        let mut y = 0.0;
        for v in row.iter_mut() {
            y = 0.9 * y + 0.1 * white.sample(rng);
            *v = y;
        }
    }

    let mean_ibi = mean_ibi_s(ga_weeks);
    let mut segments = Vec::new();
    let mut t = 0.0;
    let mut burst = rng.gen_bool(0.5);
    while t < duration_s {
        let len = if burst {
            rng.gen_range(1.0..4.0)
        } else {
            mean_ibi * rng.gen_range(0.5..1.5)
        };
        let end = (t + len).min(duration_s);
        if burst {
            add_burst(&mut x, t, end, fs_hz, rng);
        }
        segments.push(BackgroundSegment {
            kind: if burst { SegmentKind::Burst } else { SegmentKind::Ibi },
            start_s: t,
            end_s: end,
        });
        t = end;
        burst = !burst;
    }
    (
        x,
        BackgroundMeta {
            mean_ibi_s: mean_ibi,
            segments,
        },
    )
}

/// Hann-windowed delta and theta mixture shared across channels with
/// channel-specific gains.
fn add_burst(x: &mut Array2<f64>, start_s: f64, end_s: f64, fs_hz: f64, rng: &mut ChaCha8Rng) {
    let comps: Vec<(f64, f64, f64)> = vec![
        (rng.gen_range(0.5..2.0), rng.gen_range(30.0..80.0), rng.gen_range(0.0..2.0 * PI)),
        (rng.gen_range(0.5..2.0), rng.gen_range(20.0..60.0), rng.gen_range(0.0..2.0 * PI)),
        (rng.gen_range(4.0..7.0), rng.gen_range(10.0..30.0), rng.gen_range(0.0..2.0 * PI)),
    ];
    let gains: Vec<f64> = (0..x.nrows()).map(|_| rng.gen_range(0.5..1.2)).collect();
    let i0 = (start_s * fs_hz).round() as usize;
    let i1 = ((end_s * fs_hz).round() as usize).min(x.ncols());
    let len = (i1 - i0).max(1) as f64;
    for i in i0..i1 {
        let t = i as f64 / fs_hz;
        let env = 0.5 - 0.5 * (2.0 * PI * (i - i0) as f64 / len).cos();
        let s: f64 = comps.iter().map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum();
        for (c, g) in gains.iter().enumerate() {
            x[[c, i]] += env * g * s;
        }
    }
}

/// Duration of one seizure: short (10 to 60 s) with probability
/// `short_fraction`, otherwise 60 s plus an exponential tail.
pub fn sample_seizure_duration(short_fraction: f64, rng: &mut impl Rng) -> f64 {
    if rng.gen_bool(short_fraction) {
        rng.gen_range(MIN_SEIZURE_S..SHORT_SEIZURE_S)
    } else {
        let tail = Exp::new(1.0 / LONG_TAIL_MEAN_S).expect("positive rate");
        (SHORT_SEIZURE_S + tail.sample(rng)).min(MAX_SEIZURE_S)
    }
}

/// Adds rhythmic seizures to `record` in place and returns their metadata.
/// Events that cannot be placed without crowding others are dropped with a
/// warning.
pub fn inject_seizures(
    record: &mut EegRecord,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<SeizureMeta>, usize)> {
    let duration = record.duration_s();
    let expected = config.seizure_rate_per_hour * duration / 3600.0;
    let n_events = if expected > 0.0 {
        Poisson::new(expected).expect("positive mean").sample(rng) as usize
    } else {
        0
    };

    let mut placed: Vec<(f64, f64)> = Vec::new();
    let mut dropped = 0;
    for _ in 0..n_events {
        let dur = sample_seizure_duration(config.short_seizure_fraction, rng).min(duration - 1.0);
        let mut slot = None;
        if dur >= MIN_SEIZURE_S {
            for _ in 0..PLACEMENT_TRIES {
                let on = rng.gen_range(0.0..duration - dur);
                let off = on + dur;
                if placed.iter().all(|&(a, b)| off + MIN_GAP_S <= a || on >= b + MIN_GAP_S) {
                    slot = Some((on, off));
                    break;
                }
            }
        }
        match slot {
            Some(s) => placed.push(s),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!(
            "{}: {dropped} of {n_events} seizures did not fit and were dropped",
            record.record_id
        );
    }
    placed.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut metas = Vec::with_capacity(placed.len());
    for (on, off) in placed {
        metas.push(add_seizure(record, config, on, off, rng));
    }
    let events = metas.iter().map(|m| SeizureEvent::new(m.onset_s, m.offset_s)).collect();
    record.annotations = AnnotationSet::new(events, OverlapPolicy::Error)?;
    Ok((metas, dropped))
}

fn add_seizure(record: &mut EegRecord, config: &SynthConfig, on: f64, off: f64, rng: &mut ChaCha8Rng) -> SeizureMeta {
    let fs = record.fs_hz;
    let (f_lo, f_hi) = config.seizure_freq_band_hz;
    let f0 = rng.gen_range(f_lo..=f_hi);
    let drift = rng.gen_range(-0.15..0.15);
    let (a_lo, a_hi) = config.seizure_amplitude_uv;
    let amplitude = rng.gen_range(a_lo..=a_hi) * (0.6 + 0.4 * maturity(record.ga_weeks));
    let mod_hz = rng.gen_range(0.02..0.1);
    let mod_phase = rng.gen_range(0.0..2.0 * PI);
    let (p2, p3) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let n_ch = record.n_channels();
    let first = rng.gen_range(0..n_ch);
    let channels: Vec<usize> = (0..config.focal_channel_count).map(|k| (first + k) % n_ch).collect();
    let gains: Vec<f64> = channels.iter().map(|_| rng.gen_range(0.7..1.0)).collect();

    let i0 = (on * fs).round() as usize;
    let i1 = ((off * fs).round() as usize).min(record.n_samples());
    let dur = off - on;
    let mut phase = rng.gen_range(0.0..2.0 * PI);
    for i in i0..i1 {
        let t = i as f64 / fs - on;
        let ramp = (t.min(dur - t) / 3.0).clamp(0.0, 1.0);
        let env = ramp * (1.0 + 0.3 * (2.0 * PI * mod_hz * t + mod_phase).sin());
        let s = phase.sin() + 0.5 * (2.0 * phase + p2).sin() + 0.25 * (3.0 * phase + p3).sin();
        for (&c, g) in channels.iter().zip(&gains) {
            record.samples[[c, i]] += amplitude * env * g * s;
        }
        phase += 2.0 * PI * f0 * (1.0 + drift * t / dur) / fs;
    }
    SeizureMeta {
        onset_s: on,
        offset_s: off,
        f0_hz: f0,
        amplitude_uv: amplitude,
        channels,
    }
}

/// Split of infant `idx`; controls are the last infants.
fn split_of(config: &SynthConfig, idx: usize) -> (Split, bool) {
    let test_start = config.n_infants - config.n_test_infants;
    let control = idx >= config.n_infants - config.n_control_infants;
    let split = if idx >= test_start {
        Split::Test
    } else if idx >= test_start - config.n_val_infants {
        Split::Val
    } else {
        Split::Train
    };
    (split, control)
}

/// Gestational ages of the whole cohort, uniform over the configured range.
pub fn cohort_gas(config: &SynthConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (lo, hi) = config.ga_range_weeks;
    (0..config.n_infants)
        .map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo })
        .map(|ga| (ga * 100.0).round() / 100.0)
        .collect()
}

/// One synthetic infant. Each infant draws from its own stream of the
/// cohort seed, so records can be generated in any order.
pub fn generate_record(config: &SynthConfig, idx: usize, ga_weeks: f64) -> Result<(EegRecord, SynthRecordMeta)> {
    config.validate()?;
    let stream = idx as u64 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let duration = config.record_minutes * 60.0;
    let (samples, background) = generate_background(ga_weeks, duration, config.fs_hz, config.n_channels, &mut rng);
    let mut record = EegRecord {
        record_id: config.record_id(idx),
        ga_weeks,
        fs_hz: config.fs_hz,
        channel_names: channel_names(config.n_channels),
        samples,
        annotations: AnnotationSet::empty(),
    };
    let (split, control) = split_of(config, idx);
    let (seizures, dropped) = if control {
        (Vec::new(), 0)
    } else {
        inject_seizures(&mut record, config, &mut rng)?
    };
    record.validate()?;
    let meta = SynthRecordMeta {
        record_id: record.record_id.clone(),
        ga_weeks,
        split,
        control,
        seed: config.seed,
        stream,
        background,
        seizures,
        dropped_seizures: dropped,
    };
    Ok((record, meta))
}

/// Generates every infant in memory, in index order.
pub fn generate_cohort_records(config: &SynthConfig) -> Result<Vec<(EegRecord, SynthRecordMeta)>> {
    config.validate()?;
    let gas = cohort_gas(config);
    gas.par_iter()
        .enumerate()
        .map(|(idx, &ga)| generate_record(config, idx, ga))
        .collect()
}

/// Writes `records/<id>.eegr`, `records/<id>.csv`, `records/<id>.meta.json`
/// and `manifest.json` under `out_dir`; returns the manifest path.
pub fn generate_cohort(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let rec_dir = out_dir.join("records");
    std::fs::create_dir_all(&rec_dir).map_err(|e| SdaError::io(&rec_dir, e))?;
    let gas = cohort_gas(config);
    let entries: Vec<ManifestEntry> = gas
        .par_iter()
        .enumerate()
        .map(|(idx, &ga)| {
            let (record, meta) = generate_record(config, idx, ga)?;
            let id = &record.record_id;
            let rec_rel = PathBuf::from("records").join(format!("{id}.eegr"));
            let ann_rel = PathBuf::from("records").join(format!("{id}.csv"));
            save_record(&record, out_dir.join(&rec_rel))?;
            save_annotations(&record.annotations, out_dir.join(&ann_rel))?;
            let meta_path = rec_dir.join(format!("{id}.meta.json"));
            let mut text = serde_json::to_string_pretty(&meta)?;
            text.push('\n');
            std::fs::write(&meta_path, text).map_err(|e| SdaError::io(&meta_path, e))?;
            Ok(ManifestEntry {
                record: rec_rel,
                annotations: ann_rel,
                ga_weeks: ga,
                split: meta.split,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        entries,
        base_dir: out_dir.to_owned(),
    };
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
