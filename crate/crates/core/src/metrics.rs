//! Window-level (epoch) metrics and event-level clinical metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::WINDOW_S;
use crate::eeg_io::SeizureEvent;
use crate::error::{Result, SdaError};
use crate::infer::ProbabilityTrace;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn check_aligned(probs: &[f64], labels: &[u8]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(SdaError::Misaligned(format!(
            "{} scores but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// `prob >= threshold` counts as a positive prediction.
pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    check_aligned(probs, labels)?;
    let mut c = ConfusionCounts::default();
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn sensitivity(c: &ConfusionCounts) -> Result<f64> {
    if c.tp + c.fn_ == 0 {
        return Err(SdaError::Undefined("sensitivity: no positive windows".into()));
    }
    Ok(c.tp as f64 / (c.tp + c.fn_) as f64)
}

pub fn specificity(c: &ConfusionCounts) -> Result<f64> {
    if c.tn + c.fp == 0 {
        return Err(SdaError::Undefined("specificity: no negative windows".into()));
    }
    Ok(c.tn as f64 / (c.tn + c.fp) as f64)
}

/// Area under the ROC curve via the Mann-Whitney rank-sum statistic, with
/// tied scores given their mid-rank (a tie counts one half).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_aligned(scores, labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(SdaError::Undefined("AUC: NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SdaError::Undefined(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Ranks are 1-based; doubled so every mid-rank stays an integer.
    let mut pos_rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_x2 = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        pos_rank_sum_x2 += mid_x2 * pos_in_group;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let u_x2 = pos_rank_sum_x2 - np * (np + 1);
    Ok(u_x2 as f64 / (2 * np * nn) as f64)
}

/// AUC over the concatenation of several records' windows.
pub fn auc_concat(parts: &[(&[f64], &[u8])]) -> Result<f64> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (s, l) in parts {
        check_aligned(s, l)?;
        scores.extend_from_slice(s);
        labels.extend_from_slice(l);
    }
    auc(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub one_minus_specificity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// Sorted by increasing threshold.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// One point per distinct score, plus a point above the maximum score.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let area = auc(scores, labels)?;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let top = *thresholds.last().expect("auc checked for non-empty input");
    thresholds.push(top.next_up());

    let n_pos = labels.iter().filter(|&&l| l != 0).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sweep from low to high threshold, removing windows as they fall below.
    let mut tp = n_pos;
    let mut fp = n_neg;
    let mut k = 0;
    let mut points = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        while k < order.len() && scores[order[k]] < t {
            if labels[order[k]] != 0 {
                tp -= 1.0;
            } else {
                fp -= 1.0;
            }
            k += 1;
        }
        points.push(RocPoint {
            threshold: t,
            sensitivity: tp / n_pos,
            one_minus_specificity: fp / n_neg,
        });
    }
    Ok(RocCurve { points, auc: area })
}

/// Turns a trace into events: each window at or above threshold covers
/// `[start, start + 8 s)`; overlapping or abutting spans merge, and events
/// shorter than `min_event_s` are dropped.
pub fn binarize_events(trace: &ProbabilityTrace, threshold: f64, min_event_s: f64) -> Vec<SeizureEvent> {
    let mut events: Vec<SeizureEvent> = Vec::new();
    for (&t, &p) in trace.start_times_s.iter().zip(&trace.probs) {
        if p < threshold {
            continue;
        }
        let end = t + WINDOW_S;
        match events.last_mut() {
            Some(last) if t <= last.offset_s => last.offset_s = last.offset_s.max(end),
            _ => events.push(SeizureEvent::new(t, end)),
        }
    }
    events.retain(|e| e.duration_s() >= min_event_s);
    events
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventMatchResult {
    pub detected_true_events: u64,
    pub total_true_events: u64,
    pub false_detection_events: u64,
    pub total_hours: f64,
}

impl EventMatchResult {
    pub fn detection_rate(&self) -> Result<f64> {
        if self.total_true_events == 0 {
            return Err(SdaError::Undefined("detection rate: no true events".into()));
        }
        Ok(self.detected_true_events as f64 / self.total_true_events as f64)
    }

    pub fn fd_per_hour(&self) -> f64 {
        self.false_detection_events as f64 / self.total_hours
    }
}

fn overlaps(a: &SeizureEvent, b: &SeizureEvent) -> bool {
    a.onset_s.max(b.onset_s) < a.offset_s.min(b.offset_s)
}

/// Any-overlap matching. Both lists must be sorted and disjoint.
pub fn match_events(predicted: &[SeizureEvent], truth: &[SeizureEvent], record_hours: f64) -> Result<EventMatchResult> {
    if !(record_hours > 0.0) {
        return Err(SdaError::Config(format!("record length {record_hours} h must be positive")));
    }
    // Two-pointer sweep; a predicted event can touch several true events.
    let mut detected = vec![false; truth.len()];
    let mut false_events = 0;
    let mut lo = 0;
    for p in predicted {
        while lo < truth.len() && truth[lo].offset_s <= p.onset_s {
            lo += 1;
        }
        let mut hit = false;
        let mut j = lo;
        while j < truth.len() && truth[j].onset_s < p.offset_s {
            if overlaps(p, &truth[j]) {
                detected[j] = true;
                hit = true;
            }
            j += 1;
        }
        if !hit {
            false_events += 1;
        }
    }
    Ok(EventMatchResult {
        detected_true_events: detected.iter().filter(|&&d| d).count() as u64,
        total_true_events: truth.len() as u64,
        false_detection_events: false_events,
        total_hours: record_hours,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionPoint {
    pub threshold: f64,
    pub fd_per_hour: f64,
    pub detection_rate: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Totals summed over records before dividing.
    #[default]
    Pooled,
    /// Per-record rates averaged with equal weight.
    PerRecord,
}

/// Evenly spaced thresholds `0, 1/n, ..., 1`.
pub fn threshold_grid(n: usize) -> Vec<f64> {
    (0..=n).map(|k| k as f64 / n as f64).collect()
}

/// Detection rate versus false detections per hour, one point per threshold.
/// Records are `(trace, true events, record hours)`.
pub fn detection_curve(
    records: &[(&ProbabilityTrace, &[SeizureEvent], f64)],
    thresholds: &[f64],
    averaging: Averaging,
) -> Result<Vec<DetectionPoint>> {
    let total_true: usize = records.iter().map(|r| r.1.len()).sum();
    if total_true == 0 {
        return Err(SdaError::Undefined("detection curve: no true events".into()));
    }
    use rayon::prelude::*;
    thresholds
        .par_iter()
        .map(|&t| {
            let matches: Vec<EventMatchResult> = records
                .iter()
                .map(|(trace, truth, hours)| {
                    let pred = binarize_events(trace, t, trace.stride_s);
                    match_events(&pred, truth, *hours)
                })
                .collect::<Result<_>>()?;
            let (fd_per_hour, detection_rate) = match averaging {
                Averaging::Pooled => {
                    let det: u64 = matches.iter().map(|m| m.detected_true_events).sum();
                    let fd: u64 = matches.iter().map(|m| m.false_detection_events).sum();
                    let hours: f64 = matches.iter().map(|m| m.total_hours).sum();
                    (fd as f64 / hours, det as f64 / total_true as f64)
                }
                Averaging::PerRecord => {
                    let fdh = matches.iter().map(|m| m.fd_per_hour()).sum::<f64>() / matches.len() as f64;
                    let rates: Vec<f64> = matches.iter().filter_map(|m| m.detection_rate().ok()).collect();
                    (fdh, rates.iter().sum::<f64>() / rates.len() as f64)
                }
            };
            Ok(DetectionPoint {
                threshold: t,
                fd_per_hour,
                detection_rate,
            })
        })
        .collect()
}

/// Best detection rate among curve points with at most `max_fd_per_hour`.
pub fn operating_point(curve: &[DetectionPoint], max_fd_per_hour: f64) -> Option<DetectionPoint> {
    curve
        .iter()
        .filter(|p| p.fd_per_hour <= max_fd_per_hour)
        .copied()
        .fold(None, |best: Option<DetectionPoint>, p| match best {
            Some(b) if b.detection_rate > p.detection_rate => Some(b),
            Some(b) if b.detection_rate == p.detection_rate && b.fd_per_hour <= p.fd_per_hour => Some(b),
            _ => Some(p),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaveOneOut {
    pub excluded_record_id: String,
    /// `None` when the remaining windows hold a single class.
    pub auc: Option<f64>,
}

/// Concatenated AUC with each record removed in turn.
pub fn leave_one_out(records: &[(&str, &[f64], &[u8])]) -> Result<Vec<LeaveOneOut>> {
    if records.len() < 3 {
        return Err(SdaError::Dataset(format!(
            "leave-one-out needs at least 3 records, got {}",
            records.len()
        )));
    }
    (0..records.len())
        .map(|skip| {
            let parts: Vec<(&[f64], &[u8])> = records
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, r)| (r.1, r.2))
                .collect();
            let auc = match auc_concat(&parts) {
                Ok(a) => Some(a),
                Err(SdaError::Undefined(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(LeaveOneOut {
                excluded_record_id: records[skip].0.to_string(),
                auc,
            })
        })
        .collect()
}

/// Everything `eval` reports for one classifier on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config_hash: String,
    pub record_ids: Vec<String>,
    pub n_windows: usize,
    pub auc: f64,
    pub threshold: f64,
    pub confusion: ConfusionCounts,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub events_at_threshold: Option<EventMatchResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operating_point: Option<OperatingPointReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leave_one_out: Option<Vec<LeaveOneOut>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPointReport {
    pub max_fd_per_hour: f64,
    pub point: Option<DetectionPoint>,
}

impl MetricReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| SdaError::io(path, e))
    }
}

pub fn write_roc_csv(curve: &RocCurve, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["threshold", "sensitivity", "one_minus_specificity"])?;
    for p in &curve.points {
        w.serialize((p.threshold, p.sensitivity, p.one_minus_specificity))?;
    }
    w.flush().map_err(|e| SdaError::io(path.as_ref(), e))
}

pub fn write_detection_csv(curve: &[DetectionPoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["threshold", "fd_per_hour", "detection_rate"])?;
    for p in curve {
        w.serialize((p.threshold, p.fd_per_hour, p.detection_rate))?;
    }
    w.flush().map_err(|e| SdaError::io(path.as_ref(), e))
}

pub fn write_loo_csv(rows: &[LeaveOneOut], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| SdaError::io(path, e))?;
    let mut text = String::from("excluded_record_id,auc\n");
    for r in rows {
        let auc = r.auc.map_or_else(|| "undefined".to_string(), |a| a.to_string());
        text.push_str(&format!("{},{}\n", r.excluded_record_id, auc));
    }
    f.write_all(text.as_bytes()).map_err(|e| SdaError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::Stage;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn trace(probs: &[f64], stride: f64) -> ProbabilityTrace {
        ProbabilityTrace {
            record_id: "r".into(),
            stride_s: stride,
            start_times_s: (0..probs.len()).map(|i| i as f64 * stride).collect(),
            probs: probs.to_vec(),
            stage: Stage::Raw,
        }
    }

    #[test]
    fn confusion_examples() {
        let labels = [1, 1, 0, 0];
        let c = confusion(&[0.9, 0.6, 0.2, 0.1], &labels, 0.5).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        assert_eq!(confusion(&[0.9, 0.6, 0.2, 0.1], &labels, 0.0).unwrap().tn, 0);
        let c = confusion(&[0.9, 1.0, 0.2, 0.1], &labels, 1.0 + 1e-9).unwrap();
        assert_eq!((c.tp, c.fp), (0, 0));
        assert_eq!(c.total(), 4);
        assert!(confusion(&[0.1], &labels, 0.5).is_err());
    }

    #[test]
    fn sens_spec_examples() {
        let c = ConfusionCounts { tp: 3, fn_: 1, tn: 9, fp: 1 };
        assert_eq!(sensitivity(&c).unwrap(), 0.75);
        assert_eq!(specificity(&c).unwrap(), 0.9);
        let none = ConfusionCounts { tn: 1, ..Default::default() };
        assert!(matches!(sensitivity(&none), Err(SdaError::Undefined(_))));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        let s = [0.5, 0.9, 0.5, 0.1];
        let l = [1, 1, 0, 0];
        assert_eq!(auc(&s, &l).unwrap(), 0.875);
        assert_eq!(brute_auc(&s, &l), 0.875);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(SdaError::Undefined(_))));
    }

    #[test]
    fn auc_concat_pools_records() {
        let a = auc_concat(&[(&[0.9, 0.2], &[1, 0]), (&[0.3, 0.1], &[1, 0])]).unwrap();
        assert_eq!(a, auc(&[0.9, 0.2, 0.3, 0.1], &[1, 0, 1, 0]).unwrap());
    }

    #[test]
    fn roc_curve_endpoints() {
        let r = roc_curve(&[0.9, 0.4, 0.4, 0.1], &[1, 0, 1, 0]).unwrap();
        let first = r.points.first().unwrap();
        let last = r.points.last().unwrap();
        assert_eq!((first.sensitivity, first.one_minus_specificity), (1.0, 1.0));
        assert_eq!((last.sensitivity, last.one_minus_specificity), (0.0, 0.0));
        assert!(r.points.windows(2).all(|w| w[0].threshold < w[1].threshold));
    }

    #[test]
    fn binarize_examples() {
        assert!(binarize_events(&trace(&[0.1, 0.2], 1.0), 0.5, 1.0).is_empty());
        let ev = binarize_events(&trace(&[0.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.0], 1.0), 0.5, 1.0);
        assert_eq!(ev, vec![SeizureEvent::new(1.0, 13.0)]);
        // One negative window at stride 8 leaves a gap; at stride 1 the spans merge.
        let ev = binarize_events(&trace(&[0.9, 0.0, 0.9], 8.0), 0.5, 8.0);
        assert_eq!(ev.len(), 2);
        let ev = binarize_events(&trace(&[0.9, 0.0, 0.9], 1.0), 0.5, 1.0);
        assert_eq!(ev.len(), 1);
        assert!(binarize_events(&trace(&[0.9], 1.0), 0.5, 9.0).is_empty());
    }

    #[test]
    fn match_examples() {
        let m = match_events(&[SeizureEvent::new(10.0, 20.0)], &[SeizureEvent::new(15.0, 40.0)], 1.0).unwrap();
        assert_eq!((m.detected_true_events, m.false_detection_events), (1, 0));
        let m = match_events(&[SeizureEvent::new(10.0, 20.0)], &[], 4.0).unwrap();
        assert_eq!(m.false_detection_events, 1);
        assert_eq!(m.fd_per_hour(), 0.25);
        let m = match_events(
            &[SeizureEvent::new(0.0, 100.0)],
            &[SeizureEvent::new(10.0, 20.0), SeizureEvent::new(50.0, 70.0)],
            1.0,
        )
        .unwrap();
        assert_eq!((m.detected_true_events, m.false_detection_events), (2, 0));
        // Touching endpoints are not an overlap.
        let m = match_events(&[SeizureEvent::new(0.0, 10.0)], &[SeizureEvent::new(10.0, 20.0)], 1.0).unwrap();
        assert_eq!((m.detected_true_events, m.false_detection_events), (0, 1));
        assert!(match_events(&[], &[], 0.0).is_err());
    }

    #[test]
    fn detection_curve_endpoints() {
        let t = trace(&[0.1, 0.8, 0.9, 0.2, 0.1, 0.7, 0.1], 8.0);
        let truth = [SeizureEvent::new(8.0, 24.0)];
        let curve = detection_curve(&[(&t, &truth, 1.0)], &[0.0, 0.5, 1.0 + 1e-9], Averaging::Pooled).unwrap();
        assert_eq!(curve[0].detection_rate, 1.0);
        assert_eq!(curve[0].fd_per_hour, 0.0);
        assert_eq!(curve[1].fd_per_hour, 1.0);
        assert_eq!((curve[2].fd_per_hour, curve[2].detection_rate), (0.0, 0.0));
        assert!(detection_curve(&[(&t, &[], 1.0)], &[0.5], Averaging::Pooled).is_err());
        let op = operating_point(&curve, 0.25).unwrap();
        assert_eq!(op.detection_rate, 1.0);
    }

    #[test]
    fn leave_one_out_counts() {
        let s = [0.9, 0.1];
        let l = [1u8, 0];
        let recs: Vec<(&str, &[f64], &[u8])> = (0..16).map(|_| ("x", &s[..], &l[..])).collect();
        let out = leave_one_out(&recs).unwrap();
        assert_eq!(out.len(), 16);
        assert!(out.iter().all(|r| r.auc == out[0].auc));

        let neg = [0.2, 0.3];
        let nl = [0u8, 0];
        let pos = [0.8];
        let pl = [1u8];
        let out = leave_one_out(&[("a", &neg, &nl), ("b", &pos, &pl), ("c", &neg, &nl)]).unwrap();
        assert_eq!(out[1].auc, None);
        assert!(leave_one_out(&[("a", &neg, &nl)]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle(data in prop::collection::vec((0u8..20, any::<bool>()), 2..200)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 19.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1 as u8).collect();
            let n_pos = labels.iter().filter(|&&l| l == 1).count();
            prop_assume!(n_pos > 0 && n_pos < labels.len());
            let got = auc(&scores, &labels).unwrap();
            prop_assert!((got - brute_auc(&scores, &labels)).abs() <= 1e-12);
            // Strictly increasing transform leaves the ranks alone.
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&warped, &labels).unwrap(), got);
        }

        #[test]
        fn sens_spec_monotone_in_threshold(
            data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 4..100),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1 as u8).collect();
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let a = confusion(&scores, &labels, lo).unwrap();
            let b = confusion(&scores, &labels, hi).unwrap();
            if let (Ok(sa), Ok(sb)) = (sensitivity(&a), sensitivity(&b)) {
                prop_assert!(sb <= sa);
            }
            if let (Ok(sa), Ok(sb)) = (specificity(&a), specificity(&b)) {
                prop_assert!(sb >= sa);
            }
        }

        #[test]
        fn detection_monotone_under_threshold(probs in prop::collection::vec(0.0f64..1.0, 5..60)) {
            let t = trace(&probs, 2.0);
            let truth = [SeizureEvent::new(10.0, 30.0), SeizureEvent::new(60.0, 80.0)];
            let grid = threshold_grid(20);
            let curve = detection_curve(&[(&t, &truth, 1.0)], &grid, Averaging::Pooled).unwrap();
            for w in curve.windows(2) {
                prop_assert!(w[0].detection_rate >= w[1].detection_rate);
            }
        }
    }
}
