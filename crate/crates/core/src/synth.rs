//! Synthetic sessions with known ground truth.
//!
//! Each zone marker is a sine burst in the voice band over a white-noise
//! floor; the matching transcript has one token per burst and is then
//! corrupted by dropping tokens or replacing their text with a word no alias
//! table contains.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotate::{
    emit_frame_labels, FrameLabels, MarkerDetection, MarkerTimeline, Provenance,
};
use crate::audio::{write_wav_pcm16, AudioTrack};
use crate::error::{Error, Result};
use crate::fsio;
use crate::sessions::{SessionManifest, VideoMeta};
use crate::stt::{Transcript, TranscriptToken, CANONICAL_DIGITS};

/// Replacement text for substituted tokens; never a keyword or alias.
pub const SUBSTITUTE_WORD: &str = "xyzzy";

pub const TOKEN_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Corruption {
    pub miss_rate: f64,
    pub substitute_rate: f64,
    /// Zones eligible for corruption; all zones when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zones: Option<Vec<u8>>,
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            miss_rate: 0.0,
            substitute_rate: 0.0,
            zones: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub session_id: String,
    pub subject_id: String,
    pub n_zones: u8,
    pub fps: f64,
    pub sample_rate_hz: u32,
    /// Total length; defaults to one gap after the last burst.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    pub burst_freq_hz: f64,
    pub burst_len_s: f64,
    /// Silence before the first burst and between consecutive bursts.
    pub gap_len_s: f64,
    pub noise_rms: f64,
    pub offset_frames: usize,
    pub corruption: Corruption,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            session_id: "synth-000".into(),
            subject_id: "subject-000".into(),
            n_zones: 9,
            fps: 30.0,
            sample_rate_hz: 16_000,
            duration_s: None,
            burst_freq_hz: 800.0,
            burst_len_s: 0.5,
            gap_len_s: 1.0,
            noise_rms: 0.01,
            offset_frames: 10,
            corruption: Corruption::default(),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn burst_start_s(&self, zone: u8) -> f64 {
        self.gap_len_s + f64::from(zone - 1) * (self.burst_len_s + self.gap_len_s)
    }

    pub fn duration(&self) -> f64 {
        self.duration_s.unwrap_or(
            self.gap_len_s + f64::from(self.n_zones) * (self.burst_len_s + self.gap_len_s),
        )
    }

    pub fn n_frames(&self) -> usize {
        (self.duration() * self.fps).ceil() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_zones == 0 || usize::from(self.n_zones) > CANONICAL_DIGITS.len() {
            return Err(Error::Argument(format!(
                "n_zones {} outside 1..=9",
                self.n_zones
            )));
        }
        if !(self.burst_freq_hz > 300.0 && self.burst_freq_hz < 3000.0) {
            return Err(Error::Argument(format!(
                "burst frequency {} Hz must lie inside (300, 3000)",
                self.burst_freq_hz
            )));
        }
        if f64::from(self.sample_rate_hz) < 2.0 * self.burst_freq_hz {
            return Err(Error::Argument(
                "sample rate below twice the burst frequency".into(),
            ));
        }
        if !(self.fps > 0.0 && self.burst_len_s > 0.0 && self.gap_len_s >= 0.0) {
            return Err(Error::Argument(
                "fps and burst length must be positive".into(),
            ));
        }
        if !(0.0..0.25).contains(&self.noise_rms) {
            return Err(Error::Argument(format!(
                "noise rms {} must be in [0, 0.25) so bursts stay unclipped",
                self.noise_rms
            )));
        }
        for (name, r) in [
            ("miss_rate", self.corruption.miss_rate),
            ("substitute_rate", self.corruption.substitute_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Argument(format!("{name} {r} outside [0, 1]")));
            }
        }
        let last_end = self.burst_start_s(self.n_zones) + self.burst_len_s;
        if last_end > self.duration() + 1e-9 {
            return Err(Error::Argument(format!(
                "bursts end at {last_end} s but the session lasts {} s",
                self.duration()
            )));
        }
        Ok(())
    }
}

/// Which zones the corruption step touched.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub missed: Vec<u8>,
    pub substituted: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub timeline: MarkerTimeline,
    pub labels: FrameLabels,
    pub corruption: CorruptionReport,
}

#[derive(Debug, Clone)]
pub struct SynthSession {
    pub track: AudioTrack,
    pub transcript: Transcript,
    pub truth: GroundTruth,
    pub manifest: SessionManifest,
}

pub fn generate(spec: &SynthSpec) -> Result<SynthSession> {
    spec.validate()?;
    let sr = f64::from(spec.sample_rate_hz);
    let n_samples = (spec.duration() * sr).round() as usize;
    // uniform noise has peak √3·rms, inside the 4·rms headroom
    let noise_peak = 3f64.sqrt() * spec.noise_rms;
    let burst_amp = 1.0 - 4.0 * spec.noise_rms;

    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(0);
    let mut samples: Vec<f64> = (0..n_samples)
        .map(|_| {
            if noise_peak > 0.0 {
                noise_rng.random_range(-noise_peak..=noise_peak)
            } else {
                0.0
            }
        })
        .collect();

    let mut detections = Vec::new();
    let mut tokens = Vec::new();
    for zone in 1..=spec.n_zones {
        let start_s = spec.burst_start_s(zone);
        let end_s = start_s + spec.burst_len_s;
        let first = (start_s * sr).round() as usize;
        let last = ((end_s * sr).round() as usize).min(n_samples);
        for (i, s) in samples[first..last].iter_mut().enumerate() {
            let t = i as f64 / sr;
            *s += burst_amp * (2.0 * std::f64::consts::PI * spec.burst_freq_hz * t).sin();
        }
        detections.push(MarkerDetection {
            zone,
            start_s,
            end_s,
            provenance: Provenance::Stt,
            confidence: 1.0,
        });
        tokens.push(TranscriptToken {
            text: CANONICAL_DIGITS[usize::from(zone - 1)].to_string(),
            start_s,
            end_s,
            confidence: TOKEN_CONFIDENCE,
        });
    }

    let mut corrupt_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    corrupt_rng.set_stream(1);
    let mut report = CorruptionReport::default();
    let mut kept = Vec::with_capacity(tokens.len());
    for (i, mut token) in tokens.into_iter().enumerate() {
        let zone = i as u8 + 1;
        // both draws happen for every zone so eligibility does not shift the stream
        let miss_draw: f64 = corrupt_rng.random();
        let sub_draw: f64 = corrupt_rng.random();
        let eligible = spec
            .corruption
            .zones
            .as_ref()
            .is_none_or(|zs| zs.contains(&zone));
        if eligible && miss_draw < spec.corruption.miss_rate {
            report.missed.push(zone);
            continue;
        }
        if eligible && sub_draw < spec.corruption.substitute_rate {
            report.substituted.push(zone);
            token.text = SUBSTITUTE_WORD.into();
        }
        kept.push(token);
    }

    let track = AudioTrack::new(samples, spec.sample_rate_hz, 1)?;
    let timeline = MarkerTimeline {
        session_id: spec.session_id.clone(),
        n_zones: spec.n_zones,
        detections,
    };
    let n_frames = spec.n_frames();
    let labels = emit_frame_labels(&timeline, spec.fps, n_frames, spec.offset_frames)?;
    let manifest = SessionManifest {
        session_id: spec.session_id.clone(),
        subject_id: spec.subject_id.clone(),
        audio_path: PathBuf::from(format!("{}.wav", spec.session_id)),
        video_meta: VideoMeta {
            fps: spec.fps,
            n_frames,
        },
        lighting_tag: "synthetic".into(),
        wears_glasses: false,
        transcript_path: Some(PathBuf::from(format!(
            "{}.transcript.json",
            spec.session_id
        ))),
        embeddings_path: None,
        frames_dir: None,
        blinks_path: None,
    };
    Ok(SynthSession {
        track,
        transcript: Transcript {
            source_id: "synth".into(),
            tokens: kept,
        },
        truth: GroundTruth {
            timeline,
            labels,
            corruption: report,
        },
        manifest,
    })
}

/// Files written for one session, relative to the dataset directory.
pub fn truth_labels_file(session_id: &str) -> String {
    format!("{session_id}.truth.csv")
}

pub fn truth_timeline_file(session_id: &str) -> String {
    format!("{session_id}.truth.json")
}

#[derive(Serialize)]
struct TruthDump<'a> {
    timeline: &'a MarkerTimeline,
    corruption: &'a CorruptionReport,
}

/// Writes audio, transcript, ground-truth labels and timeline for one
/// session into `dir`; the returned manifest uses paths relative to `dir`.
pub fn write_session(dir: &Path, session: &SynthSession) -> Result<SessionManifest> {
    let m = &session.manifest;
    write_wav_pcm16(&session.track, &dir.join(&m.audio_path))?;
    if let Some(t) = &m.transcript_path {
        session.transcript.write(&dir.join(t))?;
    }
    session
        .truth
        .labels
        .write_csv(&dir.join(truth_labels_file(&m.session_id)))?;
    fsio::write_json_atomic(
        &dir.join(truth_timeline_file(&m.session_id)),
        &TruthDump {
            timeline: &session.truth.timeline,
            corruption: &session.truth.corruption,
        },
    )?;
    Ok(m.clone())
}

/// Reads a ground-truth timeline dump written by [`write_session`].
pub fn read_truth_timeline(path: &Path) -> Result<(MarkerTimeline, CorruptionReport)> {
    #[derive(Deserialize)]
    struct Owned {
        timeline: MarkerTimeline,
        corruption: CorruptionReport,
    }
    let text = fsio::read_to_string(path)?;
    let o: Owned = serde_json::from_str(&text).map_err(|e| fsio::json_parse_error(path, e))?;
    Ok((o.timeline, o.corruption))
}

/// A whole synthetic dataset: `n_sessions` copies of `session` with ids,
/// subjects and seeds derived from the session index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthDatasetSpec {
    pub n_sessions: usize,
    /// Sessions per subject; consecutive sessions share a subject.
    pub sessions_per_subject: usize,
    pub session: SynthSpec,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        Self {
            n_sessions: 4,
            sessions_per_subject: 1,
            session: SynthSpec::default(),
        }
    }
}

impl SynthDatasetSpec {
    pub fn session_spec(&self, index: usize) -> SynthSpec {
        SynthSpec {
            session_id: format!("synth-{index:03}"),
            subject_id: format!("subject-{:03}", index / self.sessions_per_subject.max(1)),
            seed: self.session.seed.wrapping_add(index as u64),
            ..self.session.clone()
        }
    }
}

/// Generates every session into `out_dir` and writes `manifest.json` there.
/// Returns the manifest path.
pub fn write_dataset(out_dir: &Path, spec: &SynthDatasetSpec) -> Result<PathBuf> {
    let mut manifests = Vec::with_capacity(spec.n_sessions);
    for i in 0..spec.n_sessions {
        let session = generate(&spec.session_spec(i))?;
        manifests.push(write_session(out_dir, &session)?);
    }
    let path = out_dir.join("manifest.json");
    crate::sessions::write_dataset(&path, &manifests)?;
    Ok(path)
}
