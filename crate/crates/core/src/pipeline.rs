//! Batch drivers composing the per-module operations over a dataset.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{
    align_keywords, emit_frame_labels, rectify_gaps, FrameLabels, MarkerTimeline, Rectification,
};
use crate::audio::{read_wav, VoiceParams};
use crate::error::{Error, Result};
use crate::fsio;
use crate::refine::{
    kmeans, map_clusters_to_zones, propagate_over_blinks, reassign_transition_frames, BlinkFlags,
    ClusterModel, ClusterZoneMap, EmbeddingProvider, EmbeddingSet, FileEmbeddings, ImageEmbeddings,
    RefineReport,
};
use crate::sessions::SessionManifest;
use crate::stt::{run_backend, BackendConfig, KeywordSet};

/// Environment variable naming the external speech-to-text program.
pub const STT_COMMAND_ENV: &str = "GAZELABEL_STT_CMD";

pub const ANNOTATE_REPORT_FILE: &str = "annotate_report.json";
pub const REFINE_REPORT_FILE: &str = "refine_report.json";

pub fn labels_file(session_id: &str) -> String {
    format!("{session_id}.labels.csv")
}

pub fn timeline_file(session_id: &str) -> String {
    format!("{session_id}.timeline.json")
}

/// How a session's transcript is obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendChoice {
    /// Sidecar transcript when the manifest names one, else the external
    /// command when configured, else the tone spotter.
    #[default]
    Auto,
    Sidecar,
    External,
    ToneSpotter,
}

impl std::str::FromStr for BackendChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "sidecar" => Ok(Self::Sidecar),
            "external" => Ok(Self::External),
            "tone-spotter" => Ok(Self::ToneSpotter),
            other => Err(Error::Argument(format!(
                "unknown backend `{other}` (auto, sidecar, external, tone-spotter)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub voice: VoiceParams,
    pub n_zones: u8,
    pub offset_frames: usize,
    pub min_confidence: f64,
    /// Accept homophone aliases ("tree" for three, ...).
    pub aliases: bool,
    pub backend: BackendChoice,
    /// External program; falls back to the environment variable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stt_command: Option<PathBuf>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stt_args: Vec<String>,
    pub stt_timeout_s: f64,
    pub transition_halfwidth: usize,
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// One clustering over all sessions instead of one per session.
    pub corpus_wide: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            voice: VoiceParams::default(),
            n_zones: 9,
            offset_frames: 10,
            min_confidence: 0.5,
            aliases: true,
            backend: BackendChoice::Auto,
            stt_command: None,
            stt_args: Vec::new(),
            stt_timeout_s: 120.0,
            transition_halfwidth: 10,
            k: 9,
            seed: 42,
            max_iters: 300,
            corpus_wide: false,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fsio::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| fsio::json_parse_error(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_zones == 0 || self.n_zones > 9 {
            return Err(Error::Argument(format!(
                "n_zones {} outside 1..=9",
                self.n_zones
            )));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::Argument(format!(
                "min_confidence {} outside [0, 1]",
                self.min_confidence
            )));
        }
        if self.k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Argument("max_iters must be at least 1".into()));
        }
        if self.stt_timeout_s.is_nan() || self.stt_timeout_s <= 0.0 {
            return Err(Error::Argument("stt timeout must be positive".into()));
        }
        Ok(())
    }

    fn keywords(&self) -> Result<KeywordSet> {
        let mut keys = if self.aliases {
            KeywordSet::digits()
        } else {
            KeywordSet::digits_strict()
        };
        if self.n_zones < 9 {
            let mut subset =
                KeywordSet::new(&crate::stt::CANONICAL_DIGITS[..usize::from(self.n_zones)])?;
            if self.aliases {
                for (z, alias) in crate::stt::DIGIT_ALIASES {
                    if *z <= self.n_zones {
                        subset.add_alias(*z, alias)?;
                    }
                }
            }
            keys = subset;
        }
        Ok(keys)
    }

    fn external(&self) -> Option<BackendConfig> {
        let program = self
            .stt_command
            .clone()
            .or_else(|| std::env::var_os(STT_COMMAND_ENV).map(PathBuf::from))?;
        Some(BackendConfig::ExternalCommand {
            program,
            args: self.stt_args.clone(),
            timeout_s: self.stt_timeout_s,
        })
    }

    /// Backend for one session under the configured choice.
    pub fn backend_for(&self, session: &SessionManifest) -> Result<BackendConfig> {
        let sidecar = || {
            session
                .transcript_path
                .clone()
                .map(|path| BackendConfig::SidecarFile { path })
        };
        let tone = || BackendConfig::ToneSpotter { params: self.voice };
        match self.backend {
            BackendChoice::Auto => Ok(sidecar().or_else(|| self.external()).unwrap_or_else(tone)),
            BackendChoice::Sidecar => sidecar().ok_or_else(|| {
                Error::Argument(format!(
                    "session {} has no transcript_path",
                    session.session_id
                ))
            }),
            BackendChoice::External => self.external().ok_or_else(|| {
                Error::Argument(format!(
                    "external backend selected but neither stt_command nor {STT_COMMAND_ENV} is set"
                ))
            }),
            BackendChoice::ToneSpotter => Ok(tone()),
        }
    }
}

/// Everything produced for one annotated session.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSession {
    pub aligned: MarkerTimeline,
    pub rectification: Rectification,
    pub labels: FrameLabels,
}

/// backend → align → rectify → emit for one session.
pub fn annotate_session(
    session: &SessionManifest,
    config: &PipelineConfig,
) -> Result<AnnotatedSession> {
    config.validate()?;
    session.validate()?;
    let track = read_wav(&session.audio_path)?;
    let backend = config.backend_for(session)?;
    let transcript = run_backend(&track, Some(&session.audio_path), &backend)?;
    transcript.check_within(track.duration_s())?;
    let aligned = align_keywords(
        &transcript,
        &config.keywords()?,
        config.min_confidence,
        &session.session_id,
    )?;
    let rectification = rectify_gaps(&aligned, &track, &config.voice)?;
    let labels = emit_frame_labels(
        &rectification.timeline,
        session.video_meta.fps,
        session.video_meta.n_frames,
        config.offset_frames,
    )?;
    Ok(AnnotatedSession {
        aligned,
        rectification,
        labels,
    })
}

#[derive(Serialize)]
struct TimelineDump<'a> {
    aligned: &'a MarkerTimeline,
    rectified: &'a MarkerTimeline,
    recovered: &'a [u8],
    unresolved: &'a [u8],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default)]
    pub detected: usize,
    #[serde(default)]
    pub recovered: Vec<u8>,
    #[serde(default)]
    pub unresolved: Vec<u8>,
    #[serde(default)]
    pub labeled_frames: usize,
}

impl SessionStatus {
    fn failed(session_id: &str, err: &Error) -> Self {
        Self {
            session_id: session_id.to_string(),
            ok: false,
            error: Some(err.to_string()),
            detected: 0,
            recovered: Vec::new(),
            unresolved: Vec::new(),
            labeled_frames: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotateReport {
    pub sessions: Vec<SessionStatus>,
}

impl AnnotateReport {
    pub fn failed(&self) -> usize {
        self.sessions.iter().filter(|s| !s.ok).count()
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Argument(format!("cannot start {jobs} worker threads: {e}")))
}

fn annotate_and_write(
    session: &SessionManifest,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<SessionStatus> {
    let a = annotate_session(session, config)?;
    a.labels
        .write_csv(&out_dir.join(labels_file(&session.session_id)))?;
    fsio::write_json_atomic(
        &out_dir.join(timeline_file(&session.session_id)),
        &TimelineDump {
            aligned: &a.aligned,
            rectified: &a.rectification.timeline,
            recovered: &a.rectification.recovered,
            unresolved: &a.rectification.unresolved,
        },
    )?;
    Ok(SessionStatus {
        session_id: session.session_id.clone(),
        ok: true,
        error: None,
        detected: a.aligned.detections.len(),
        recovered: a.rectification.recovered,
        unresolved: a.rectification.unresolved,
        labeled_frames: a.labels.labeled_count(),
    })
}

/// Annotates every session into `out_dir`, at most `jobs` at a time (0 means
/// one per core). Failed sessions are recorded in the report, which is also
/// written to `out_dir`.
pub fn annotate_dataset(
    sessions: &[SessionManifest],
    config: &PipelineConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<AnnotateReport> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let statuses: Vec<SessionStatus> = thread_pool(jobs)?.install(|| {
        sessions
            .par_iter()
            .map(|s| {
                annotate_and_write(s, config, out_dir).unwrap_or_else(|e| {
                    log::error!("session {}: {e}", s.session_id);
                    SessionStatus::failed(&s.session_id, &e)
                })
            })
            .collect()
    });
    let report = AnnotateReport { sessions: statuses };
    fsio::write_json_atomic(&out_dir.join(ANNOTATE_REPORT_FILE), &report)?;
    Ok(report)
}

fn provider_for(session: &SessionManifest) -> Result<Box<dyn EmbeddingProvider>> {
    if let Some(p) = &session.embeddings_path {
        Ok(Box::new(FileEmbeddings::open(p)?))
    } else if let Some(d) = &session.frames_dir {
        Ok(Box::new(ImageEmbeddings::new(d)))
    } else {
        Err(Error::Argument(format!(
            "session {} has neither embeddings_path nor frames_dir",
            session.session_id
        )))
    }
}

struct Loaded {
    labels: FrameLabels,
    embeddings: EmbeddingSet,
}

fn load_for_refine(
    session: &SessionManifest,
    labels_dir: &Path,
    config: &PipelineConfig,
) -> Result<Loaded> {
    let labels = FrameLabels::read_csv(
        &labels_dir.join(labels_file(&session.session_id)),
        session.video_meta.fps,
        config.n_zones,
    )?;
    if labels.n_frames() != session.video_meta.n_frames {
        return Err(Error::Structural(format!(
            "session {}: label file has {} frames, manifest says {}",
            session.session_id,
            labels.n_frames(),
            session.video_meta.n_frames
        )));
    }
    let frames: Vec<usize> = (0..labels.n_frames()).collect();
    let embeddings = provider_for(session)?.embeddings(&frames)?;
    Ok(Loaded { labels, embeddings })
}

fn finish_refine(
    session: &SessionManifest,
    loaded: &Loaded,
    model: &ClusterModel,
    map: &ClusterZoneMap,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<RefineReport> {
    let (mut labels, mut report) = reassign_transition_frames(
        &loaded.labels,
        &loaded.embeddings,
        model,
        map,
        config.transition_halfwidth,
    )?;
    if let Some(p) = &session.blinks_path {
        let blinks = BlinkFlags::read_csv(p, labels.n_frames())?;
        let propagated = propagate_over_blinks(&labels, &blinks)?;
        report.propagated_frames = propagated
            .labels
            .iter()
            .zip(&labels.labels)
            .filter(|(a, b)| a != b)
            .count();
        labels = propagated;
    }
    labels.write_csv(&out_dir.join(labels_file(&session.session_id)))?;
    Ok(report)
}

fn refine_session(
    session: &SessionManifest,
    labels_dir: &Path,
    config: &PipelineConfig,
    out_dir: &Path,
) -> Result<RefineReport> {
    let loaded = load_for_refine(session, labels_dir, config)?;
    let model = kmeans(&loaded.embeddings, config.k, config.seed, config.max_iters)?;
    let map = map_clusters_to_zones(&model, &loaded.labels, &loaded.embeddings)?;
    finish_refine(session, &loaded, &model, &map, config, out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRefine {
    pub session_id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<RefineReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineRunReport {
    pub corpus_wide: bool,
    pub total: RefineReport,
    pub sessions: Vec<SessionRefine>,
}

impl RefineRunReport {
    pub fn failed(&self) -> usize {
        self.sessions.iter().filter(|s| !s.ok).count()
    }
}

fn refine_outcome(session_id: &str, r: Result<RefineReport>) -> SessionRefine {
    match r {
        Ok(report) => SessionRefine {
            session_id: session_id.to_string(),
            ok: true,
            error: None,
            report: Some(report),
        },
        Err(e) => {
            log::error!("session {session_id}: {e}");
            SessionRefine {
                session_id: session_id.to_string(),
                ok: false,
                error: Some(e.to_string()),
                report: None,
            }
        }
    }
}

/// Corpus-wide clustering: one model over the embeddings of every session
/// that loads, with frames renumbered consecutively across sessions.
fn corpus_model(
    loaded: &[&Loaded],
    config: &PipelineConfig,
) -> Result<(ClusterModel, ClusterZoneMap)> {
    let mut vectors = Vec::new();
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for l in loaded {
        let base = labels.len();
        for (i, &f) in l.embeddings.frame_indices().iter().enumerate() {
            vectors.extend_from_slice(l.embeddings.vector(i));
            frames.push(base + f);
        }
        if !l.embeddings.is_empty() {
            match dim {
                None => dim = Some(l.embeddings.dim()),
                Some(d) if d != l.embeddings.dim() => {
                    return Err(Error::Structural(format!(
                        "embedding dims differ across sessions ({d} vs {})",
                        l.embeddings.dim()
                    )))
                }
                _ => {}
            }
        }
        labels.extend_from_slice(&l.labels.labels);
    }
    let dim = dim.ok_or_else(|| Error::Structural("no embeddings in any session".into()))?;
    let set = EmbeddingSet::from_flat(dim, vectors, frames)?;
    let all = FrameLabels {
        labels,
        fps: loaded.first().map_or(1.0, |l| l.labels.fps),
        n_zones: config.n_zones,
    };
    let model = kmeans(&set, config.k, config.seed, config.max_iters)?;
    let map = map_clusters_to_zones(&model, &all, &set)?;
    Ok((model, map))
}

/// Refines the label files in `labels_dir`, writing refined files and a
/// report to `out_dir`.
pub fn refine_dataset(
    sessions: &[SessionManifest],
    labels_dir: &Path,
    config: &PipelineConfig,
    out_dir: &Path,
    jobs: usize,
) -> Result<RefineRunReport> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let pool = thread_pool(jobs)?;
    let outcomes: Vec<SessionRefine> = if config.corpus_wide {
        let loaded: Vec<Result<Loaded>> = pool.install(|| {
            sessions
                .par_iter()
                .map(|s| load_for_refine(s, labels_dir, config))
                .collect()
        });
        let ok: Vec<&Loaded> = loaded.iter().filter_map(|l| l.as_ref().ok()).collect();
        let shared = corpus_model(&ok, config);
        pool.install(|| {
            sessions
                .par_iter()
                .zip(&loaded)
                .map(|(s, l)| {
                    let r = match (l, &shared) {
                        (Err(e), _) => Err(Error::Structural(e.to_string())),
                        (_, Err(e)) => {
                            Err(Error::Structural(format!("corpus clustering failed: {e}")))
                        }
                        (Ok(l), Ok((model, map))) => {
                            finish_refine(s, l, model, map, config, out_dir)
                        }
                    };
                    refine_outcome(&s.session_id, r)
                })
                .collect()
        })
    } else {
        pool.install(|| {
            sessions
                .par_iter()
                .map(|s| {
                    refine_outcome(
                        &s.session_id,
                        refine_session(s, labels_dir, config, out_dir),
                    )
                })
                .collect()
        })
    };
    let mut total = RefineReport::default();
    for r in outcomes.iter().filter_map(|o| o.report.as_ref()) {
        total.absorb(r);
    }
    let report = RefineRunReport {
        corpus_wide: config.corpus_wide,
        total,
        sessions: outcomes,
    };
    fsio::write_json_atomic(&out_dir.join(REFINE_REPORT_FILE), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, write_session, SynthSpec};

    #[test]
    fn config_json_uses_defaults_for_missing_fields() {
        let c: PipelineConfig = serde_json::from_str(r#"{"offset_frames": 4}"#).unwrap();
        assert_eq!(c.offset_frames, 4);
        assert_eq!(c.k, 9);
        assert_eq!(c.voice.band_lo_hz, 300.0);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"ofset": 4}"#).is_err());
    }

    #[test]
    fn auto_backend_prefers_sidecar() {
        let s = generate(&SynthSpec::default()).unwrap();
        let c = PipelineConfig::default();
        assert_eq!(c.backend_for(&s.manifest).unwrap().id(), "sidecar-file");
        let mut m = s.manifest.clone();
        m.transcript_path = None;
        let c = PipelineConfig {
            backend: BackendChoice::Sidecar,
            ..c
        };
        assert!(c.backend_for(&m).is_err());
        let c = PipelineConfig {
            backend: BackendChoice::ToneSpotter,
            ..c
        };
        assert_eq!(c.backend_for(&m).unwrap().id(), "tone-spotter");
    }

    #[test]
    fn clean_synth_session_matches_truth() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&SynthSpec::default()).unwrap();
        let mut m = write_session(dir.path(), &s).unwrap();
        m.audio_path = dir.path().join(&m.audio_path);
        m.transcript_path = m.transcript_path.map(|p| dir.path().join(p));
        let a = annotate_session(&m, &PipelineConfig::default()).unwrap();
        assert_eq!(a.labels, s.truth.labels);
        assert!(a.rectification.recovered.is_empty());
    }

    #[test]
    fn failing_session_does_not_stop_others() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&SynthSpec::default()).unwrap();
        let mut good = write_session(dir.path(), &s).unwrap();
        good.audio_path = dir.path().join(&good.audio_path);
        good.transcript_path = good.transcript_path.map(|p| dir.path().join(p));
        let mut bad = good.clone();
        bad.session_id = "missing".into();
        bad.audio_path = dir.path().join("nope.wav");
        let out = dir.path().join("out");
        let report = annotate_dataset(&[good, bad], &PipelineConfig::default(), &out, 2).unwrap();
        assert_eq!(report.failed(), 1);
        assert!(report.sessions[0].ok);
        assert!(out.join(labels_file("synth-000")).exists());
        assert!(!out.join(labels_file("missing")).exists());
        assert!(out.join(ANNOTATE_REPORT_FILE).exists());
    }
}
