//! On-disk record, annotation and manifest formats.
//!
//! A record file (`.eegr`) is a single JSON header line followed by the
//! samples as little-endian `f32`, channel-major. Annotations live in a
//! separate CSV (`onset_s,offset_s`), and a JSON manifest ties records,
//! annotations, gestational ages and split tags together.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdaError};

/// Shortest annotated seizure accepted, in seconds.
pub const MIN_SEIZURE_S: f64 = 10.0;
pub const MIN_GA_WEEKS: f64 = 22.0;
pub const MAX_GA_WEEKS: f64 = 44.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeizureEvent {
    pub onset_s: f64,
    pub offset_s: f64,
}

impl SeizureEvent {
    pub fn new(onset_s: f64, offset_s: f64) -> Self {
        Self { onset_s, offset_s }
    }

    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

/// What to do when two annotated events overlap or abut.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapPolicy {
    #[default]
    Merge,
    Error,
}

/// Temporal (weak) seizure annotations: sorted, disjoint, each at least 10 s.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    events: Vec<SeizureEvent>,
}

impl AnnotationSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates, sorts and merges `events`.
    pub fn new(mut events: Vec<SeizureEvent>, policy: OverlapPolicy) -> Result<Self> {
        for ev in &events {
            if !ev.onset_s.is_finite() || !ev.offset_s.is_finite() {
                return Err(SdaError::InvalidAnnotation(format!(
                    "non-finite event bounds ({}, {})",
                    ev.onset_s, ev.offset_s
                )));
            }
            if ev.onset_s < 0.0 {
                return Err(SdaError::InvalidAnnotation(format!(
                    "negative onset {}",
                    ev.onset_s
                )));
            }
            if ev.offset_s <= ev.onset_s {
                return Err(SdaError::InvalidAnnotation(format!(
                    "offset {} not after onset {}",
                    ev.offset_s, ev.onset_s
                )));
            }
            if ev.duration_s() < MIN_SEIZURE_S {
                return Err(SdaError::InvalidAnnotation(format!(
                    "event ({}, {}) lasts {:.3} s, shorter than {} s",
                    ev.onset_s,
                    ev.offset_s,
                    ev.duration_s(),
                    MIN_SEIZURE_S
                )));
            }
        }
        events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));

        let mut merged: Vec<SeizureEvent> = Vec::with_capacity(events.len());
        for ev in events {
            match merged.last_mut() {
                Some(last) if ev.onset_s <= last.offset_s => {
                    if policy == OverlapPolicy::Error {
                        return Err(SdaError::InvalidAnnotation(format!(
                            "event ({}, {}) overlaps ({}, {})",
                            ev.onset_s, ev.offset_s, last.onset_s, last.offset_s
                        )));
                    }
                    log::warn!(
                        "merging overlapping annotations ({}, {}) and ({}, {})",
                        last.onset_s,
                        last.offset_s,
                        ev.onset_s,
                        ev.offset_s
                    );
                    last.offset_s = last.offset_s.max(ev.offset_s);
                }
                _ => merged.push(ev),
            }
        }
        Ok(Self { events: merged })
    }

    pub fn events(&self) -> &[SeizureEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn total_duration_s(&self) -> f64 {
        self.events.iter().map(SeizureEvent::duration_s).sum()
    }

    /// Seconds of `[start, end)` covered by annotated seizure time.
    pub fn overlap_s(&self, start: f64, end: f64) -> f64 {
        self.events
            .iter()
            .map(|ev| (ev.offset_s.min(end) - ev.onset_s.max(start)).max(0.0))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EegRecord {
    pub record_id: String,
    pub ga_weeks: f64,
    pub fs_hz: f64,
    pub channel_names: Vec<String>,
    /// Channels × samples, microvolts.
    pub samples: Array2<f64>,
    pub annotations: AnnotationSet,
}

impl EegRecord {
    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs_hz
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SdaError::InvalidRecord(msg));
        if self.channel_names.is_empty() || self.n_channels() == 0 {
            return bad("record has no channels".into());
        }
        if self.channel_names.len() != self.n_channels() {
            return bad(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.n_channels()
            ));
        }
        if self.n_samples() == 0 {
            return bad("record has no samples".into());
        }
        if !(self.fs_hz.is_finite() && self.fs_hz > 0.0) {
            return bad(format!("sampling rate {} must be positive", self.fs_hz));
        }
        if !(MIN_GA_WEEKS..=MAX_GA_WEEKS).contains(&self.ga_weeks) {
            return bad(format!(
                "gestational age {} outside [{MIN_GA_WEEKS}, {MAX_GA_WEEKS}] weeks",
                self.ga_weeks
            ));
        }
        let unique: BTreeSet<&str> = self.channel_names.iter().map(String::as_str).collect();
        if unique.len() != self.channel_names.len() {
            return bad("duplicate channel names".into());
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return bad("non-finite sample value".into());
        }
        let duration = self.duration_s();
        if let Some(ev) = self.annotations.events().iter().find(|ev| ev.offset_s > duration) {
            return bad(format!(
                "event ({}, {}) extends past record end {duration} s",
                ev.onset_s, ev.offset_s
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordHeader {
    record_id: String,
    ga_weeks: f64,
    fs_hz: f64,
    channel_names: Vec<String>,
    n_samples: usize,
}

/// Reads a `.eegr` record. Annotations are left empty; attach them with
/// [`load_annotations`].
pub fn load_record(path: impl AsRef<Path>) -> Result<EegRecord> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| SdaError::io(path, e))?;
    let mut reader = BufReader::new(file);

    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| SdaError::io(path, e))?;
    if line.last() != Some(&b'\n') {
        return Err(SdaError::MalformedHeader {
            path: path.to_owned(),
            reason: "missing header terminator".into(),
        });
    }
    let header: RecordHeader =
        serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| SdaError::MalformedHeader {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;

    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| SdaError::io(path, e))?;
    let n_channels = header.channel_names.len();
    let expected = n_channels * header.n_samples;
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(SdaError::SampleCountMismatch {
            expected,
            found: payload.len() / 4,
        });
    }
    let mut cursor = payload.as_slice();
    let mut values = Vec::with_capacity(expected);
    for _ in 0..expected {
        let v = cursor
            .read_f32::<LittleEndian>()
            .map_err(|e| SdaError::io(path, e))?;
        values.push(f64::from(v));
    }
    let samples = Array2::from_shape_vec((n_channels, header.n_samples), values)
        .map_err(|e| SdaError::Shape(e.to_string()))?;

    let record = EegRecord {
        record_id: header.record_id,
        ga_weeks: header.ga_weeks,
        fs_hz: header.fs_hz,
        channel_names: header.channel_names,
        samples,
        annotations: AnnotationSet::empty(),
    };
    record.validate()?;
    Ok(record)
}

/// Writes a `.eegr` record. Samples are stored as `f32`.
pub fn save_record(record: &EegRecord, path: impl AsRef<Path>) -> Result<()> {
    record.validate()?;
    let path = path.as_ref();
    let header = RecordHeader {
        record_id: record.record_id.clone(),
        ga_weeks: record.ga_weeks,
        fs_hz: record.fs_hz,
        channel_names: record.channel_names.clone(),
        n_samples: record.n_samples(),
    };
    let file = File::create(path).map_err(|e| SdaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| SdaError::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for row in record.samples.rows() {
        for &v in row {
            w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Debug, Deserialize, Serialize)]
struct AnnotationRow {
    onset_s: f64,
    offset_s: f64,
}

pub fn load_annotations(path: impl AsRef<Path>, policy: OverlapPolicy) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| SdaError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.len() != 2 || &headers[0] != "onset_s" || &headers[1] != "offset_s" {
        return Err(SdaError::InvalidAnnotation(format!(
            "{}: expected header `onset_s,offset_s`, found `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut events = Vec::new();
    for row in reader.deserialize() {
        let row: AnnotationRow = row?;
        events.push(SeizureEvent::new(row.onset_s, row.offset_s));
    }
    AnnotationSet::new(events, policy)
}

pub fn save_annotations(annotations: &AnnotationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| SdaError::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(["onset_s", "offset_s"])?;
    for ev in annotations.events() {
        writer.write_record([ev.onset_s.to_string(), ev.offset_s.to_string()])?;
    }
    writer.flush().map_err(|e| SdaError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = SdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(SdaError::Config(format!("unknown split `{s}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Record path, relative to the manifest directory unless absolute.
    pub record: PathBuf,
    pub annotations: PathBuf,
    pub ga_weeks: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| SdaError::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_reader(BufReader::new(file))?;
        Ok(Self {
            entries,
            base_dir: path.parent().map(Path::to_owned).unwrap_or_default(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| SdaError::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.entries)?;
        w.write_all(b"\n").map_err(|e| SdaError::io(path, e))?;
        w.flush().map_err(|e| SdaError::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads one entry's record with its annotations attached and validated.
    pub fn load_entry(&self, entry: &ManifestEntry, policy: OverlapPolicy) -> Result<EegRecord> {
        let mut record = load_record(self.resolve(&entry.record))?;
        record.annotations = load_annotations(self.resolve(&entry.annotations), policy)?;
        record.validate()?;
        Ok(record)
    }

    pub fn load_split(&self, split: Split, policy: OverlapPolicy) -> Result<Vec<EegRecord>> {
        self.split(split)
            .map(|e| self.load_entry(e, policy))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestFailure {
    pub entry: usize,
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ManifestReport {
    pub n_entries: usize,
    pub split_counts: BTreeMap<Split, usize>,
    pub failures: Vec<ManifestFailure>,
}

impl ManifestReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    /// Adds a failure for every required split that has no entries.
    pub fn require_splits(&mut self, splits: &[Split]) {
        for split in splits {
            if self.split_counts.get(split).copied().unwrap_or(0) == 0 {
                self.failures.push(ManifestFailure {
                    entry: self.n_entries,
                    path: PathBuf::new(),
                    reason: format!("split `{split}` is empty"),
                });
            }
        }
    }
}

/// Checks every manifest entry; never fails, reports instead.
pub fn validate_manifest(manifest: &DatasetManifest) -> ManifestReport {
    let mut report = ManifestReport {
        n_entries: manifest.entries.len(),
        ..Default::default()
    };
    let mut seen: BTreeMap<String, (usize, Split)> = BTreeMap::new();

    for (i, entry) in manifest.entries.iter().enumerate() {
        *report.split_counts.entry(entry.split).or_default() += 1;
        let mut fail = |path: &Path, reason: String| {
            report.failures.push(ManifestFailure {
                entry: i,
                path: path.to_owned(),
                reason,
            })
        };

        let record_path = manifest.resolve(&entry.record);
        let ann_path = manifest.resolve(&entry.annotations);
        if !record_path.is_file() {
            fail(&record_path, "record file not found".into());
            continue;
        }
        if !ann_path.is_file() {
            fail(&ann_path, "annotation file not found".into());
            continue;
        }
        match manifest.load_entry(entry, OverlapPolicy::Merge) {
            Err(e) => fail(&record_path, e.to_string()),
            Ok(record) => {
                if (record.ga_weeks - entry.ga_weeks).abs() > 1e-9 {
                    fail(
                        &record_path,
                        format!(
                            "manifest GA {} disagrees with record GA {}",
                            entry.ga_weeks, record.ga_weeks
                        ),
                    );
                }
                if let Some((first, split)) = seen.get(&record.record_id) {
                    let reason = if *split == entry.split {
                        format!("record id `{}` duplicates entry {first}", record.record_id)
                    } else {
                        format!(
                            "record id `{}` appears in both `{split}` and `{}` splits",
                            record.record_id, entry.split
                        )
                    };
                    fail(&record_path, reason);
                } else {
                    seen.insert(record.record_id.clone(), (i, entry.split));
                }
            }
        }
    }
    report
}
