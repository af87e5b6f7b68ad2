//! Frame-level metrics, the nine-to-seven zone merge and rectification
//! recovery statistics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::annotate::{FrameLabel, FrameLabels, MarkerTimeline, Provenance};
use crate::error::{Error, Result};

/// Rows are true zones, columns predicted zones; zone `z` sits at index `z - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<Vec<u64>>,
    /// Frames unlabeled in truth, prediction or both.
    pub excluded: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![vec![0; k]; k],
            excluded: 0,
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::Argument("confusion matrix must be square".into()));
        }
        Ok(Self {
            k,
            counts,
            excluded: 0,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i][i]).sum()
    }

    /// Adds another matrix of the same size.
    pub fn absorb(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Argument(format!(
                "cannot add a {}-class matrix to a {}-class one",
                other.k, self.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.excluded += other.excluded;
        Ok(())
    }
}

pub fn confusion(truth: &FrameLabels, pred: &FrameLabels) -> Result<ConfusionMatrix> {
    if truth.n_frames() != pred.n_frames() {
        return Err(Error::Argument(format!(
            "truth has {} frames, prediction has {}",
            truth.n_frames(),
            pred.n_frames()
        )));
    }
    let k = usize::from(truth.n_zones.max(pred.n_zones));
    let mut cm = ConfusionMatrix::new(k);
    for (t, p) in truth.labels.iter().zip(&pred.labels) {
        match (t.zone, p.zone) {
            (Some(t), Some(p)) => cm.counts[usize::from(t) - 1][usize::from(p) - 1] += 1,
            _ => cm.excluded += 1,
        }
    }
    Ok(cm)
}

/// Percentage of labeled frames predicted correctly.
pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::UndefinedMetric(
            "accuracy of an empty confusion matrix".into(),
        ));
    }
    Ok(cm.trace() as f64 / total as f64 * 100.0)
}

/// Per-class F1; a class with no support and no predictions scores 0.
pub fn per_class_f1(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.k)
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let predicted: u64 = cm.counts.iter().map(|r| r[c]).sum();
            let actual: u64 = cm.counts[c].iter().sum();
            let p = if predicted == 0 {
                0.0
            } else {
                tp / predicted as f64
            };
            let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .collect()
}

/// Unweighted mean of per-class F1 over all `k` classes.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 || cm.k == 0 {
        return Err(Error::UndefinedMetric(
            "macro F1 of an empty confusion matrix".into(),
        ));
    }
    Ok(per_class_f1(cm).iter().sum::<f64>() / cm.k as f64)
}

/// Zone in the seven-class scheme: {1,2}→1, 3→2, 4→3, {5,6}→4, 7→5, 8→6, 9→7.
pub fn merged_zone(zone: u8) -> u8 {
    match zone {
        1 | 2 => 1,
        3 => 2,
        4 => 3,
        5 | 6 => 4,
        z => z - 2,
    }
}

pub fn merge_zones_7(labels: &FrameLabels) -> Result<FrameLabels> {
    if labels.n_zones != 9 {
        return Err(Error::Argument(format!(
            "zone merge needs the 9-zone scheme, labels use {}",
            labels.n_zones
        )));
    }
    Ok(FrameLabels {
        labels: labels
            .labels
            .iter()
            .map(|l| FrameLabel {
                zone: l.zone.map(merged_zone),
                provenance: l.provenance,
            })
            .collect(),
        fps: labels.fps,
        n_zones: 7,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_classes: usize,
    pub labeled_frames: u64,
    pub excluded_frames: u64,
    pub accuracy_pct: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
}

impl Metrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            n_classes: cm.k,
            labeled_frames: cm.total(),
            excluded_frames: cm.excluded,
            accuracy_pct: accuracy(cm)?,
            macro_f1: macro_f1(cm)?,
            per_class_f1: per_class_f1(cm),
            confusion: cm.counts.clone(),
        })
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "accuracy {:.2}%  macro-F1 {:.4}  ({} frames scored, {} excluded)",
            self.accuracy_pct, self.macro_f1, self.labeled_frames, self.excluded_frames
        )?;
        write!(f, "true\\pred")?;
        for c in 1..=self.n_classes {
            write!(f, "{c:>8}")?;
        }
        writeln!(f, "{:>8}", "F1")?;
        for (i, row) in self.confusion.iter().enumerate() {
            write!(f, "{:>9}", i + 1)?;
            for n in row {
                write!(f, "{n:>8}")?;
            }
            writeln!(f, "{:>8.4}", self.per_class_f1[i])?;
        }
        Ok(())
    }
}

/// Outcome of rectification against a known timeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Zones present in the truth but absent after alignment.
    pub missed: Vec<u8>,
    /// Missed zones that rectification filled.
    pub recovered: Vec<u8>,
    /// Recovered zones whose interval covers at least half the true one.
    pub recovered_correct: Vec<u8>,
    pub recovered_incorrect: Vec<u8>,
    /// Labeled frames added by rectification, when labels were supplied.
    pub frames_gained: usize,
}

impl RecoveryReport {
    /// Correct recoveries over misses; 1 when nothing was missed.
    pub fn recovery_rate(&self) -> f64 {
        if self.missed.is_empty() {
            1.0
        } else {
            self.recovered_correct.len() as f64 / self.missed.len() as f64
        }
    }

    pub fn absorb(&mut self, other: &RecoveryReport) {
        self.missed.extend(&other.missed);
        self.recovered.extend(&other.recovered);
        self.recovered_correct.extend(&other.recovered_correct);
        self.recovered_incorrect.extend(&other.recovered_incorrect);
        self.frames_gained += other.frames_gained;
    }

    /// Records how many more frames are labeled after rectification.
    pub fn with_frames(mut self, before: &FrameLabels, after: &FrameLabels) -> Self {
        self.frames_gained = after.labeled_count().saturating_sub(before.labeled_count());
        self
    }
}

pub const RECOVERY_OVERLAP: f64 = 0.5;

pub fn recovery_report(
    aligned: &MarkerTimeline,
    rectified: &MarkerTimeline,
    truth: &MarkerTimeline,
) -> RecoveryReport {
    let mut r = RecoveryReport::default();
    for t in &truth.detections {
        if aligned.detection(t.zone).is_some() {
            continue;
        }
        r.missed.push(t.zone);
        let Some(d) = rectified
            .detection(t.zone)
            .filter(|d| d.provenance == Provenance::Rectified)
        else {
            continue;
        };
        r.recovered.push(t.zone);
        let overlap = (d.end_s.min(t.end_s) - d.start_s.max(t.start_s)).max(0.0);
        let len = t.end_s - t.start_s;
        if overlap >= RECOVERY_OVERLAP * len && overlap > 0.0 {
            r.recovered_correct.push(t.zone);
        } else {
            r.recovered_incorrect.push(t.zone);
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::MarkerDetection;
    use proptest::prelude::*;

    fn labels(zones: &[Option<u8>], n_zones: u8) -> FrameLabels {
        FrameLabels {
            labels: zones
                .iter()
                .map(|z| {
                    z.map_or(FrameLabel::UNLABELED, |z| {
                        FrameLabel::new(z, Provenance::Stt)
                    })
                })
                .collect(),
            fps: 30.0,
            n_zones,
        }
    }

    #[test]
    fn identical_labels_give_diagonal() {
        let t = labels(&[Some(1), Some(2), None, Some(3), Some(3)], 3);
        let cm = confusion(&t, &t).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
        assert_eq!(cm.excluded, 1);
        assert_eq!(accuracy(&cm).unwrap(), 100.0);
        assert_eq!(macro_f1(&cm).unwrap(), 1.0);
    }

    #[test]
    fn unlabeled_prediction_is_empty() {
        let t = labels(&[Some(1), Some(2), None], 2);
        let p = labels(&[None, None, None], 2);
        let cm = confusion(&t, &p).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.excluded, 3);
        assert!(matches!(accuracy(&cm), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn hand_counted_ten_frames() {
        let t = labels(
            &[
                Some(1),
                Some(1),
                Some(1),
                Some(2),
                Some(2),
                Some(2),
                Some(3),
                Some(3),
                None,
                Some(1),
            ],
            3,
        );
        let p = labels(
            &[
                Some(1),
                Some(2),
                Some(1),
                Some(2),
                Some(2),
                Some(3),
                Some(3),
                Some(1),
                Some(2),
                None,
            ],
            3,
        );
        let cm = confusion(&t, &p).unwrap();
        assert_eq!(cm.counts, vec![vec![2, 1, 0], vec![0, 2, 1], vec![1, 0, 1]]);
        assert_eq!(cm.excluded, 2);
        assert_eq!(accuracy(&cm).unwrap(), 62.5);
    }

    #[test]
    fn two_class_half_right() {
        let cm = ConfusionMatrix::from_counts(vec![vec![1, 1], vec![1, 1]]).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 50.0);
        assert_eq!(macro_f1(&cm).unwrap(), 0.5);
    }

    #[test]
    fn zero_support_class_counts_as_zero() {
        let cm = ConfusionMatrix::from_counts(vec![vec![4, 0], vec![0, 0]]).unwrap();
        assert_eq!(accuracy(&cm).unwrap(), 100.0);
        assert_eq!(macro_f1(&cm).unwrap(), 0.5);
    }

    #[test]
    fn length_mismatch() {
        let a = labels(&[Some(1)], 9);
        let b = labels(&[Some(1), Some(1)], 9);
        assert!(matches!(confusion(&a, &b), Err(Error::Argument(_))));
    }

    #[test]
    fn merge_table() {
        let got: Vec<u8> = (1..=9).map(merged_zone).collect();
        assert_eq!(got, [1, 1, 2, 3, 4, 4, 5, 6, 7]);
        let m = merge_zones_7(&labels(&[Some(2), Some(9), None], 9)).unwrap();
        assert_eq!(m.n_zones, 7);
        assert_eq!(m.zone(0), Some(merged_zone(1)));
        assert_eq!(m.zone(1), Some(7));
        assert_eq!(m.zone(2), None);
        assert!(merge_zones_7(&labels(&[Some(2)], 7)).is_err());
    }

    fn det(zone: u8, start_s: f64, end_s: f64, provenance: Provenance) -> MarkerDetection {
        MarkerDetection {
            zone,
            start_s,
            end_s,
            provenance,
            confidence: 1.0,
        }
    }

    fn timeline(dets: Vec<MarkerDetection>) -> MarkerTimeline {
        MarkerTimeline {
            session_id: "s".into(),
            n_zones: 3,
            detections: dets,
        }
    }

    #[test]
    fn recovery_cases() {
        let truth = timeline(vec![
            det(1, 1.0, 1.5, Provenance::Stt),
            det(2, 2.5, 3.0, Provenance::Stt),
            det(3, 4.0, 4.5, Provenance::Stt),
        ]);
        let r = recovery_report(&truth, &truth, &truth);
        assert!(r.missed.is_empty() && r.recovered.is_empty());
        assert_eq!(r.recovery_rate(), 1.0);

        let aligned = timeline(vec![det(1, 1.0, 1.5, Provenance::Stt)]);
        let rectified = timeline(vec![
            det(1, 1.0, 1.5, Provenance::Stt),
            det(2, 2.4, 3.1, Provenance::Rectified),
            det(3, 3.6, 3.9, Provenance::Rectified),
        ]);
        let r = recovery_report(&aligned, &rectified, &truth);
        assert_eq!(r.missed, [2, 3]);
        assert_eq!(r.recovered, [2, 3]);
        assert_eq!(r.recovered_correct, [2]);
        assert_eq!(r.recovered_incorrect, [3]);
        assert_eq!(r.recovery_rate(), 0.5);
    }

    proptest! {
        #[test]
        fn merge_never_lowers_accuracy(
            pairs in prop::collection::vec((1u8..=9, 1u8..=9), 1..200)
        ) {
            let t = labels(&pairs.iter().map(|p| Some(p.0)).collect::<Vec<_>>(), 9);
            let p = labels(&pairs.iter().map(|p| Some(p.1)).collect::<Vec<_>>(), 9);
            let before = accuracy(&confusion(&t, &p).unwrap()).unwrap();
            let after = accuracy(
                &confusion(&merge_zones_7(&t).unwrap(), &merge_zones_7(&p).unwrap()).unwrap(),
            )
            .unwrap();
            prop_assert!(after >= before);
        }

        #[test]
        fn metrics_invariant_under_relabeling(
            pairs in prop::collection::vec((1u8..=4, 1u8..=4), 1..100),
            perm in Just([1u8, 2, 3, 4]).prop_shuffle(),
        ) {
            let t = labels(&pairs.iter().map(|p| Some(p.0)).collect::<Vec<_>>(), 4);
            let p = labels(&pairs.iter().map(|p| Some(p.1)).collect::<Vec<_>>(), 4);
            let map = |z: u8| perm[usize::from(z) - 1];
            let tp = labels(&pairs.iter().map(|p| Some(map(p.0))).collect::<Vec<_>>(), 4);
            let pp = labels(&pairs.iter().map(|p| Some(map(p.1))).collect::<Vec<_>>(), 4);
            let a = confusion(&t, &p).unwrap();
            let b = confusion(&tp, &pp).unwrap();
            prop_assert_eq!(a.total(), b.total());
            for i in 1..=4u8 {
                for j in 1..=4u8 {
                    let (pi, pj) = (usize::from(map(i)) - 1, usize::from(map(j)) - 1);
                    prop_assert_eq!(a.counts[usize::from(i) - 1][usize::from(j) - 1], b.counts[pi][pj]);
                }
            }
            prop_assert_eq!(accuracy(&a).unwrap(), accuracy(&b).unwrap());
            prop_assert!((macro_f1(&a).unwrap() - macro_f1(&b).unwrap()).abs() < 1e-12);
        }
    }
}
