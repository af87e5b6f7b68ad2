//! Marker alignment, gap rectification and per-frame label emission.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::{voiced_segments, AudioTrack, VoiceParams, VoicedSegment};
use crate::error::{Error, Result};
use crate::fsio;
use crate::stt::{KeywordSet, MatchKind, Transcript, ALIAS_CONFIDENCE_PENALTY};

/// Where a detection or a frame label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Stt,
    Rectified,
    Refined,
    Propagated,
    Unlabeled,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Stt => "stt",
            Provenance::Rectified => "rectified",
            Provenance::Refined => "refined",
            Provenance::Propagated => "propagated",
            Provenance::Unlabeled => "unlabeled",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "stt" => Provenance::Stt,
            "rectified" => Provenance::Rectified,
            "refined" => Provenance::Refined,
            "propagated" => Provenance::Propagated,
            "unlabeled" => Provenance::Unlabeled,
            other => return Err(Error::Argument(format!("unknown provenance `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerDetection {
    pub zone: u8,
    pub start_s: f64,
    pub end_s: f64,
    pub provenance: Provenance,
    pub confidence: f64,
}

/// Detected markers for one session, ascending in zone and in time. Zones
/// absent from `detections` are gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerTimeline {
    pub session_id: String,
    pub n_zones: u8,
    pub detections: Vec<MarkerDetection>,
}

impl MarkerTimeline {
    pub fn empty(session_id: impl Into<String>, n_zones: u8) -> Self {
        Self {
            session_id: session_id.into(),
            n_zones,
            detections: Vec::new(),
        }
    }

    pub fn gaps(&self) -> Vec<u8> {
        (1..=self.n_zones)
            .filter(|z| self.detection(*z).is_none())
            .collect()
    }

    pub fn detection(&self, zone: u8) -> Option<&MarkerDetection> {
        self.detections.iter().find(|d| d.zone == zone)
    }

    pub fn validate(&self) -> Result<()> {
        for d in &self.detections {
            if d.zone == 0 || d.zone > self.n_zones {
                return Err(Error::Structural(format!(
                    "zone {} outside 1..={}",
                    d.zone, self.n_zones
                )));
            }
            if d.start_s.is_nan() || d.end_s.is_nan() || d.end_s < d.start_s {
                return Err(Error::Structural(format!(
                    "zone {} ends before it starts",
                    d.zone
                )));
            }
        }
        for w in self.detections.windows(2) {
            if w[1].zone <= w[0].zone {
                return Err(Error::Structural(format!(
                    "zones not strictly increasing: {} then {}",
                    w[0].zone, w[1].zone
                )));
            }
            if w[1].start_s <= w[0].end_s {
                return Err(Error::Structural(format!(
                    "zones {} and {} overlap in time",
                    w[0].zone, w[1].zone
                )));
            }
        }
        Ok(())
    }
}

/// Greedy in-order keyword scan: zone z takes the earliest token that
/// matches its keyword, clears `min_confidence` (after the alias penalty)
/// and starts after the previous pick ended.
pub fn align_keywords(
    transcript: &Transcript,
    keywords: &KeywordSet,
    min_confidence: f64,
    session_id: &str,
) -> Result<MarkerTimeline> {
    if !(0.0..=1.0).contains(&min_confidence) {
        return Err(Error::Argument(format!(
            "min_confidence {min_confidence} outside [0, 1]"
        )));
    }
    let mut timeline = MarkerTimeline::empty(session_id, keywords.n_zones());
    let mut prev_end = f64::NEG_INFINITY;
    for zone in 1..=keywords.n_zones() {
        let hit = transcript
            .tokens
            .iter()
            .filter(|t| t.start_s > prev_end)
            .find_map(|t| {
                let confidence = match keywords.matches(zone, &t.text)? {
                    MatchKind::Canonical => t.confidence,
                    MatchKind::Alias => t.confidence * ALIAS_CONFIDENCE_PENALTY,
                };
                (confidence >= min_confidence).then_some((t, confidence))
            });
        if let Some((token, confidence)) = hit {
            prev_end = token.end_s;
            timeline.detections.push(MarkerDetection {
                zone,
                start_s: token.start_s,
                end_s: token.end_s,
                provenance: Provenance::Stt,
                confidence,
            });
        }
    }
    Ok(timeline)
}

/// Result of filling gaps from voiced audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rectification {
    pub timeline: MarkerTimeline,
    pub recovered: Vec<u8>,
    pub unresolved: Vec<u8>,
}

/// Fills each run of consecutive missing zones from the voiced segments that
/// lie between its matched neighbours (or the session edges). A run of `m`
/// zones is resolved only when exactly `m` segments lie there; they are
/// assigned in temporal order.
pub fn rectify_gaps(
    timeline: &MarkerTimeline,
    track: &AudioTrack,
    params: &VoiceParams,
) -> Result<Rectification> {
    let gaps = timeline.gaps();
    if gaps.is_empty() {
        return Ok(Rectification {
            timeline: timeline.clone(),
            recovered: Vec::new(),
            unresolved: Vec::new(),
        });
    }
    let segments = voiced_segments(track, params)?;
    Ok(rectify_with_segments(
        timeline,
        &segments,
        track.duration_s(),
    ))
}

/// [`rectify_gaps`] against precomputed voiced segments.
pub fn rectify_with_segments(
    timeline: &MarkerTimeline,
    segments: &[VoicedSegment],
    session_end_s: f64,
) -> Rectification {
    let gaps = timeline.gaps();
    let mut out = timeline.clone();
    let mut recovered = Vec::new();
    let mut unresolved = Vec::new();

    let mut i = 0;
    while i < gaps.len() {
        let mut j = i;
        while j + 1 < gaps.len() && gaps[j + 1] == gaps[j] + 1 {
            j += 1;
        }
        let run = &gaps[i..=j];
        let first = run[0];
        let last = run[run.len() - 1];
        let before = (first > 1).then(|| timeline.detection(first - 1)).flatten();
        let after = timeline.detection(last + 1);
        let lo = before.map_or(0.0, |d| d.end_s);
        let hi = after.map_or(session_end_s, |d| d.start_s);
        // open against neighbouring detections, closed against session edges
        let candidates: Vec<&VoicedSegment> = segments
            .iter()
            .filter(|s| {
                if before.is_some() {
                    s.start_s > lo
                } else {
                    s.start_s >= lo
                }
            })
            .filter(|s| {
                if after.is_some() {
                    s.end_s < hi
                } else {
                    s.end_s <= hi
                }
            })
            .collect();
        if candidates.len() == run.len() {
            for (zone, seg) in run.iter().zip(candidates) {
                out.detections.push(MarkerDetection {
                    zone: *zone,
                    start_s: seg.start_s,
                    end_s: seg.end_s,
                    provenance: Provenance::Rectified,
                    confidence: 1.0,
                });
                recovered.push(*zone);
            }
        } else {
            if !candidates.is_empty() {
                log::debug!(
                    "{}: {} candidate segments for {} missing zones {:?}; left unresolved",
                    timeline.session_id,
                    candidates.len(),
                    run.len(),
                    run
                );
            }
            unresolved.extend_from_slice(run);
        }
        i = j + 1;
    }
    out.detections.sort_by_key(|d| d.zone);
    Rectification {
        timeline: out,
        recovered,
        unresolved,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLabel {
    pub zone: Option<u8>,
    pub provenance: Provenance,
}

impl FrameLabel {
    pub const UNLABELED: FrameLabel = FrameLabel {
        zone: None,
        provenance: Provenance::Unlabeled,
    };

    pub fn new(zone: u8, provenance: Provenance) -> Self {
        Self {
            zone: Some(zone),
            provenance,
        }
    }
}

/// One label per video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLabels {
    pub labels: Vec<FrameLabel>,
    pub fps: f64,
    /// Size of the zone scheme (9, or 7 after merging).
    pub n_zones: u8,
}

impl FrameLabels {
    pub fn unlabeled(n_frames: usize, fps: f64, n_zones: u8) -> Self {
        Self {
            labels: vec![FrameLabel::UNLABELED; n_frames],
            fps,
            n_zones,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.labels.len()
    }

    pub fn zone(&self, frame: usize) -> Option<u8> {
        self.labels[frame].zone
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.zone.is_some()).count()
    }

    /// Writes the `frame,zone,provenance` CSV, one row per frame.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, |w| self.write_csv_to(w))
    }

    pub fn write_csv_to(&self, w: &mut dyn std::io::Write) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Structural(format!("writing labels: {e}"));
        csv.write_record(["frame", "zone", "provenance"])
            .map_err(csv_err)?;
        for (i, l) in self.labels.iter().enumerate() {
            let zone = l.zone.map(|z| z.to_string()).unwrap_or_default();
            csv.write_record([i.to_string(), zone, l.provenance.to_string()])
                .map_err(csv_err)?;
        }
        csv.flush().map_err(|e| Error::io("flushing label csv", e))
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf)
            .expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is ascii")
    }

    /// Reads a label CSV. Rows must cover frames `0..n` in order.
    pub fn read_csv(path: &Path, fps: f64, n_zones: u8) -> Result<Self> {
        let mut reader =
            csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::parse(path, e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["frame", "zone", "provenance"] {
            return Err(Error::parse(
                path,
                format!("expected header frame,zone,provenance, got {:?}", headers),
            ));
        }
        let mut labels = Vec::new();
        for (row, record) in reader.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| Error::parse(path, e.to_string()))?;
            let frame: usize = record[0].parse().map_err(|_| {
                Error::parse(path, format!("line {line}: bad frame `{}`", &record[0]))
            })?;
            if frame != labels.len() {
                return Err(Error::parse(
                    path,
                    format!("line {line}: expected frame {}, got {frame}", labels.len()),
                ));
            }
            let zone = match &record[1] {
                "" => None,
                z => {
                    let z: u8 = z
                        .parse()
                        .map_err(|_| Error::parse(path, format!("line {line}: bad zone `{z}`")))?;
                    if z == 0 || z > n_zones {
                        return Err(Error::parse(
                            path,
                            format!("line {line}: zone {z} outside 1..={n_zones}"),
                        ));
                    }
                    Some(z)
                }
            };
            let provenance: Provenance = record[2]
                .parse()
                .map_err(|e: Error| Error::parse(path, format!("line {line}: {e}")))?;
            if zone.is_none() != (provenance == Provenance::Unlabeled) {
                return Err(Error::parse(
                    path,
                    format!("line {line}: zone and provenance disagree"),
                ));
            }
            labels.push(FrameLabel { zone, provenance });
        }
        Ok(Self {
            labels,
            fps,
            n_zones,
        })
    }
}

// Frame boundaries with a little slack so 100/30 s lands on frame 100, not 99.
fn frame_floor(t: f64, fps: f64) -> i64 {
    (t * fps + 1e-6).floor() as i64
}

fn frame_ceil(t: f64, fps: f64) -> i64 {
    (t * fps - 1e-6).ceil() as i64
}

/// Labels frames `floor(start·fps) − offset ..= ceil(end·fps) + offset` of
/// each detection. Where two padded ranges collide the shared frames are
/// split at their midpoint, the earlier zone keeping the first half (the
/// larger half when the overlap is odd).
pub fn emit_frame_labels(
    timeline: &MarkerTimeline,
    fps: f64,
    n_frames: usize,
    offset_frames: usize,
) -> Result<FrameLabels> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::Argument(format!("fps must be positive, got {fps}")));
    }
    if n_frames == 0 {
        return Err(Error::Argument("n_frames must be positive".into()));
    }
    let off = offset_frames as i64;
    let last = n_frames as i64 - 1;
    let mut ranges: Vec<(i64, i64, &MarkerDetection)> = Vec::new();
    for d in &timeline.detections {
        let a = frame_floor(d.start_s, fps) - off;
        let b = frame_ceil(d.end_s, fps) + off;
        if b > last || a < 0 && b < 0 {
            log::warn!(
                "{}: zone {} spans frames {a}..={b}, beyond 0..={last}; clamped",
                timeline.session_id,
                d.zone
            );
        }
        let (a, b) = (a.max(0), b.min(last));
        if a <= b {
            ranges.push((a, b, d));
        }
    }
    for i in 1..ranges.len() {
        let prev_b = ranges[i - 1].1;
        let cur_a = ranges[i].0;
        if cur_a <= prev_b {
            let overlap = prev_b - cur_a + 1;
            let cut = cur_a + (overlap + 1) / 2;
            ranges[i - 1].1 = cut - 1;
            ranges[i].0 = cut;
        }
    }
    let mut out = FrameLabels::unlabeled(n_frames, fps, timeline.n_zones);
    for (a, b, d) in ranges {
        if a > b {
            continue;
        }
        for f in a..=b {
            out.labels[f as usize] = FrameLabel::new(d.zone, d.provenance);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stt::TranscriptToken;
    use proptest::prelude::*;

    fn tok(text: &str, start: f64, end: f64, confidence: f64) -> TranscriptToken {
        TranscriptToken {
            text: text.into(),
            start_s: start,
            end_s: end,
            confidence,
        }
    }

    fn transcript(tokens: Vec<TranscriptToken>) -> Transcript {
        Transcript {
            source_id: "test".into(),
            tokens,
        }
    }

    fn digits_at(words: &[&str]) -> Transcript {
        transcript(
            words
                .iter()
                .enumerate()
                .map(|(i, w)| tok(w, 2.0 * i as f64, 2.0 * i as f64 + 0.5, 1.0))
                .collect(),
        )
    }

    fn det(zone: u8, start: f64, end: f64) -> MarkerDetection {
        MarkerDetection {
            zone,
            start_s: start,
            end_s: end,
            provenance: Provenance::Stt,
            confidence: 1.0,
        }
    }

    #[test]
    fn clean_sequence_aligns_fully() {
        let t = digits_at(&crate::stt::CANONICAL_DIGITS);
        let tl = align_keywords(&t, &KeywordSet::digits(), 0.5, "s").unwrap();
        assert_eq!(tl.detections.len(), 9);
        assert!(tl.gaps().is_empty());
        tl.validate().unwrap();
    }

    #[test]
    fn alias_matches_with_penalty() {
        let t = digits_at(&["one", "to", "three"]);
        let tl = align_keywords(&t, &KeywordSet::digits(), 0.5, "s").unwrap();
        let two = tl.detection(2).unwrap();
        assert_eq!(two.confidence, ALIAS_CONFIDENCE_PENALTY);
        assert_eq!(two.start_s, 2.0);
    }

    #[test]
    fn missing_word_leaves_a_gap() {
        let t = digits_at(&[
            "one", "three", "four", "five", "six", "seven", "eight", "nine",
        ]);
        let tl = align_keywords(&t, &KeywordSet::digits(), 0.5, "s").unwrap();
        assert_eq!(tl.gaps(), vec![2]);
        assert_eq!(tl.detections.len(), 8);
    }

    #[test]
    fn low_confidence_tokens_are_skipped() {
        let t = transcript(vec![tok("one", 0.0, 0.5, 0.3), tok("one", 1.0, 1.5, 0.8)]);
        let tl = align_keywords(&t, &KeywordSet::digits(), 0.5, "s").unwrap();
        assert_eq!(tl.detection(1).unwrap().start_s, 1.0);
        // 0.55 * 0.9 < 0.5
        let t = transcript(vec![tok("to", 0.0, 0.5, 0.55)]);
        let tl = align_keywords(&t, &KeywordSet::digits(), 0.5, "s").unwrap();
        assert!(tl.detections.is_empty());
        assert!(align_keywords(&t, &KeywordSet::digits(), 1.5, "s").is_err());
    }

    #[test]
    fn out_of_order_tokens_are_not_reused() {
        // "two" precedes "one" in time; after taking "one", nothing later says two
        let t = transcript(vec![tok("two", 0.0, 0.5, 1.0), tok("one", 1.0, 1.5, 1.0)]);
        let tl = align_keywords(&t, &KeywordSet::digits(), 0.5, "s").unwrap();
        assert_eq!(tl.detections.len(), 1);
        assert_eq!(tl.detections[0].zone, 1);
    }

    /// Oracle that walks token indices rather than times.
    fn greedy_oracle(words: &[&str]) -> Vec<(u8, usize)> {
        let keys = crate::stt::CANONICAL_DIGITS;
        let mut out = Vec::new();
        let mut next_index = 0;
        for (zi, key) in keys.iter().enumerate() {
            if let Some(pos) = (next_index..words.len()).find(|&i| words[i] == *key) {
                out.push((zi as u8 + 1, pos));
                next_index = pos + 1;
            }
        }
        out
    }

    proptest! {
        #[test]
        fn alignment_matches_greedy_oracle_and_is_ordered(
            picks in proptest::collection::vec(0usize..12, 0..20)
        ) {
            let vocab = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "uh", "hello", "ten"];
            let words: Vec<&str> = picks.iter().map(|&i| vocab[i]).collect();
            let t = digits_at(&words);
            let tl = align_keywords(&t, &KeywordSet::digits_strict(), 0.0, "s").unwrap();
            tl.validate().unwrap();
            let got: Vec<(u8, usize)> = tl
                .detections
                .iter()
                .map(|d| (d.zone, (d.start_s / 2.0).round() as usize))
                .collect();
            prop_assert_eq!(got, greedy_oracle(&words));
        }
    }

    fn seg(start: f64, end: f64) -> VoicedSegment {
        VoicedSegment {
            start_s: start,
            end_s: end,
            mean_band_ratio: 0.9,
        }
    }

    fn timeline(dets: Vec<MarkerDetection>) -> MarkerTimeline {
        MarkerTimeline {
            session_id: "s".into(),
            n_zones: 9,
            detections: dets,
        }
    }

    fn full_minus(missing: &[u8]) -> MarkerTimeline {
        timeline(
            (1..=9u8)
                .filter(|z| !missing.contains(z))
                .map(|z| det(z, 2.0 * z as f64, 2.0 * z as f64 + 0.5))
                .collect(),
        )
    }

    fn bursts_for_all() -> Vec<VoicedSegment> {
        (1..=9u8)
            .map(|z| seg(2.0 * z as f64 - 0.1, 2.0 * z as f64 + 0.6))
            .collect()
    }

    #[test]
    fn single_gap_recovered_from_one_burst() {
        let tl = full_minus(&[2]);
        let r = rectify_with_segments(&tl, &bursts_for_all(), 20.0);
        assert_eq!(r.recovered, vec![2]);
        assert!(r.unresolved.is_empty());
        let d = r.timeline.detection(2).unwrap();
        assert_eq!((d.start_s, d.end_s), (3.9, 4.6));
        assert_eq!(d.provenance, Provenance::Rectified);
        assert_eq!(d.confidence, 1.0);
        r.timeline.validate().unwrap();
    }

    #[test]
    fn silent_gap_persists() {
        let tl = full_minus(&[2]);
        let segs: Vec<VoicedSegment> = bursts_for_all()
            .into_iter()
            .enumerate()
            .filter(|(i, _)| *i != 1)
            .map(|(_, s)| s)
            .collect();
        let r = rectify_with_segments(&tl, &segs, 20.0);
        assert_eq!(r.unresolved, vec![2]);
        assert_eq!(r.timeline, tl);
    }

    #[test]
    fn two_adjacent_gaps_recovered_in_order() {
        let tl = full_minus(&[4, 5]);
        let r = rectify_with_segments(&tl, &bursts_for_all(), 20.0);
        assert_eq!(r.recovered, vec![4, 5]);
        assert!(
            r.timeline.detection(4).unwrap().start_s < r.timeline.detection(5).unwrap().start_s
        );
        r.timeline.validate().unwrap();
    }

    #[test]
    fn count_mismatch_is_unresolved() {
        let tl = full_minus(&[4, 5]);
        let segs = vec![seg(7.9, 8.6)];
        let r = rectify_with_segments(&tl, &segs, 20.0);
        assert_eq!(r.unresolved, vec![4, 5]);
    }

    #[test]
    fn boundary_gaps_use_session_edges() {
        let tl = full_minus(&[1, 9]);
        let r = rectify_with_segments(&tl, &bursts_for_all(), 20.0);
        assert_eq!(r.recovered, vec![1, 9]);
        r.timeline.validate().unwrap();
    }

    #[test]
    fn segments_straddling_a_neighbour_are_ignored() {
        let tl = full_minus(&[2]);
        // one long segment covering zone 1's token and the gap
        let r = rectify_with_segments(&tl, &[seg(1.5, 4.6)], 20.0);
        assert_eq!(r.unresolved, vec![2]);
    }

    #[test]
    fn offset_pads_both_sides() {
        let fps = 30.0;
        let tl = timeline(vec![det(1, 100.0 / fps, 120.0 / fps)]);
        let labels = emit_frame_labels(&tl, fps, 300, 10).unwrap();
        let labeled: Vec<usize> = (0..300).filter(|&f| labels.zone(f).is_some()).collect();
        assert_eq!(labeled, (90..=130).collect::<Vec<_>>());
        assert!(labeled.iter().all(|&f| labels.zone(f) == Some(1)));
    }

    #[test]
    fn zero_offset_is_the_utterance_span() {
        let tl = timeline(vec![det(3, 1.0, 2.0)]);
        let labels = emit_frame_labels(&tl, 25.0, 100, 0).unwrap();
        let labeled: Vec<usize> = (0..100).filter(|&f| labels.zone(f).is_some()).collect();
        assert_eq!(labeled, (25..=50).collect::<Vec<_>>());
    }

    #[test]
    fn colliding_ranges_split_at_midpoint() {
        // padded ranges: 90..=130 and 125..=165 overlap on 125..=130 (6 frames)
        let fps = 30.0;
        let tl = timeline(vec![
            det(1, 100.0 / fps, 120.0 / fps),
            det(2, 135.0 / fps, 155.0 / fps),
        ]);
        let labels = emit_frame_labels(&tl, fps, 300, 10).unwrap();
        for f in 125..=127 {
            assert_eq!(labels.zone(f), Some(1), "frame {f}");
        }
        for f in 128..=130 {
            assert_eq!(labels.zone(f), Some(2), "frame {f}");
        }
        assert_eq!(labels.zone(165), Some(2));
        assert_eq!(labels.zone(166), None);
    }

    #[test]
    fn ranges_are_clamped_to_the_video() {
        let tl = timeline(vec![det(1, 0.1, 0.2), det(2, 9.5, 12.0)]);
        let labels = emit_frame_labels(&tl, 10.0, 100, 5).unwrap();
        assert_eq!(labels.n_frames(), 100);
        assert_eq!(labels.zone(0), Some(1));
        assert_eq!(labels.zone(99), Some(2));
        assert!(emit_frame_labels(&tl, 0.0, 100, 5).is_err());
        assert!(emit_frame_labels(&tl, 10.0, 0, 5).is_err());
    }

    proptest! {
        #[test]
        fn labeled_count_grows_with_offset(
            starts in proptest::collection::vec(0.2f64..1.5, 1..9),
            offset in 0usize..20,
        ) {
            let mut t = 0.5;
            let mut dets = Vec::new();
            for (i, len) in starts.iter().enumerate() {
                dets.push(det(i as u8 + 1, t, t + len * 0.5));
                t += len * 0.5 + len;
            }
            let tl = timeline(dets);
            let n = 600;
            let a = emit_frame_labels(&tl, 30.0, n, offset).unwrap();
            let b = emit_frame_labels(&tl, 30.0, n, offset + 1).unwrap();
            prop_assert_eq!(a.n_frames(), n);
            prop_assert!(a.labeled_count() <= b.labeled_count());
            prop_assert!(b.labeled_count() <= n);
        }
    }

    #[test]
    fn csv_round_trip_and_format() {
        let tl = timeline(vec![det(1, 0.1, 0.2)]);
        let labels = emit_frame_labels(&tl, 10.0, 5, 0).unwrap();
        let text = labels.to_csv_string();
        assert_eq!(
            text,
            "frame,zone,provenance\n0,,unlabeled\n1,1,stt\n2,1,stt\n3,,unlabeled\n4,,unlabeled\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        labels.write_csv(&p).unwrap();
        assert_eq!(FrameLabels::read_csv(&p, 10.0, 9).unwrap(), labels);
    }

    #[test]
    fn csv_reader_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("l.csv");
        std::fs::write(&p, "frame,zone,provenance\n0,12,stt\n").unwrap();
        assert!(FrameLabels::read_csv(&p, 10.0, 9).is_err());
        std::fs::write(&p, "frame,zone,provenance\n1,1,stt\n").unwrap();
        assert!(FrameLabels::read_csv(&p, 10.0, 9).is_err());
        std::fs::write(&p, "frame,zone,provenance\n0,,stt\n").unwrap();
        assert!(FrameLabels::read_csv(&p, 10.0, 9).is_err());
    }
}
