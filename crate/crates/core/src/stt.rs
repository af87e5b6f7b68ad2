//! Transcripts and the speech-to-text backend boundary.
//!
//! Every backend produces the same [`Transcript`] JSON, so downstream stages
//! never know which one ran. Three backends ship: an external command (any
//! vendor STT wrapped in a script), a sidecar file next to the audio, and a
//! tone spotter that reads digit markers off synthetic tone bursts.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::audio::{voiced_segments, AudioTrack, VoiceParams};
use crate::error::{Error, Result};
use crate::fsio;

/// Confidence multiplier applied when a token matches through an alias.
pub const ALIAS_CONFIDENCE_PENALTY: f64 = 0.9;

pub const CANONICAL_DIGITS: [&str; 9] = [
    "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

/// Homophones accepted for each digit zone.
pub const DIGIT_ALIASES: &[(u8, &str)] = &[
    (1, "won"),
    (2, "to"),
    (2, "too"),
    (3, "tree"),
    (4, "for"),
    (4, "fore"),
    (8, "ate"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptToken {
    pub text: String,
    pub start_s: f64,
    pub end_s: f64,
    pub confidence: f64,
}

impl TranscriptToken {
    fn check(&self, index: usize) -> std::result::Result<(), String> {
        if !(self.start_s.is_finite() && self.end_s.is_finite()) {
            return Err(format!("token {index} has non-finite times"));
        }
        if self.end_s < self.start_s {
            return Err(format!(
                "token {index} (`{}`) ends at {} before it starts at {}",
                self.text, self.end_s, self.start_s
            ));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(format!(
                "token {index} confidence {} outside [0, 1]",
                self.confidence
            ));
        }
        Ok(())
    }
}

/// Lowercases and strips everything but ASCII letters and digits.
pub fn normalize_word(text: &str) -> String {
    text.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub source_id: String,
    pub tokens: Vec<TranscriptToken>,
}

impl Transcript {
    /// Validates token invariants, normalizes text and sorts by start time.
    /// Returns whether a re-sort was needed.
    pub fn normalized(mut self) -> std::result::Result<(Self, bool), String> {
        for (i, t) in self.tokens.iter().enumerate() {
            t.check(i)?;
        }
        for t in &mut self.tokens {
            t.text = normalize_word(&t.text);
        }
        let sorted = self.tokens.windows(2).all(|w| w[0].start_s <= w[1].start_s);
        if !sorted {
            self.tokens.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        }
        Ok((self, !sorted))
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let raw: Transcript =
            serde_json::from_str(text).map_err(|e| fsio::json_parse_error(origin, e))?;
        let (transcript, resorted) = raw.normalized().map_err(|msg| Error::parse(origin, msg))?;
        if resorted {
            log::warn!(
                "{}: tokens were not sorted by start time; sorted them",
                origin.display()
            );
        }
        Ok(transcript)
    }

    /// Checks that every token lies inside `[0, duration_s]`.
    pub fn check_within(&self, duration_s: f64) -> Result<()> {
        match self
            .tokens
            .iter()
            .find(|t| t.start_s < 0.0 || t.end_s > duration_s + 1e-9)
        {
            Some(t) => Err(Error::Range(format!(
                "token `{}` [{}, {}] s lies outside the {duration_s} s session",
                t.text, t.start_s, t.end_s
            ))),
            None => Ok(()),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsio::write_json_atomic(path, self)
    }
}

pub fn load_transcript(path: &Path) -> Result<Transcript> {
    Transcript::from_json_str(&fsio::read_to_string(path)?, path)
}

/// Zone keywords with their accepted aliases.
#[derive(Debug, Clone, PartialEq)]
pub struct KeywordSet {
    // index i holds zone i + 1
    entries: Vec<(String, Vec<String>)>,
}

/// How a token matched a keyword.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchKind {
    Canonical,
    Alias,
}

impl KeywordSet {
    /// Builds a set from canonical keywords for zones `1..=n`.
    pub fn new<S: AsRef<str>>(canonical: &[S]) -> Result<Self> {
        if canonical.is_empty() {
            return Err(Error::Argument(
                "keyword set needs at least one zone".into(),
            ));
        }
        let entries: Vec<(String, Vec<String>)> = canonical
            .iter()
            .map(|k| (normalize_word(k.as_ref()), Vec::new()))
            .collect();
        for (i, (k, _)) in entries.iter().enumerate() {
            if k.is_empty() {
                return Err(Error::Argument(format!(
                    "keyword for zone {} is empty",
                    i + 1
                )));
            }
            if entries[..i].iter().any(|(other, _)| other == k) {
                return Err(Error::Argument(format!("keyword `{k}` appears twice")));
            }
        }
        Ok(Self { entries })
    }

    /// "one" … "nine" with the homophone aliases transcribers commonly produce.
    pub fn digits() -> Self {
        let mut set = Self::new(&CANONICAL_DIGITS).expect("static keywords are valid");
        for &(zone, alias) in DIGIT_ALIASES {
            set.add_alias(zone, alias)
                .expect("static aliases are valid");
        }
        set
    }

    /// Digits without any aliases.
    pub fn digits_strict() -> Self {
        Self::new(&CANONICAL_DIGITS).expect("static keywords are valid")
    }

    pub fn add_alias(&mut self, zone: u8, alias: &str) -> Result<()> {
        let n = self.n_zones();
        let alias = normalize_word(alias);
        if self.entries.iter().any(|(k, _)| *k == alias) {
            return Err(Error::Argument(format!(
                "alias `{alias}` is a canonical keyword"
            )));
        }
        let entry = self
            .entries
            .get_mut(usize::from(zone).wrapping_sub(1))
            .ok_or_else(|| Error::Argument(format!("zone {zone} outside 1..={n}")))?;
        if !entry.1.contains(&alias) {
            entry.1.push(alias);
        }
        Ok(())
    }

    pub fn n_zones(&self) -> u8 {
        self.entries.len() as u8
    }

    pub fn canonical(&self, zone: u8) -> Option<&str> {
        self.entries
            .get(usize::from(zone).wrapping_sub(1))
            .map(|(k, _)| k.as_str())
    }

    /// Whether `word` (already normalized) stands for `zone`.
    pub fn matches(&self, zone: u8, word: &str) -> Option<MatchKind> {
        let (canonical, aliases) = self.entries.get(usize::from(zone).wrapping_sub(1))?;
        if canonical == word {
            Some(MatchKind::Canonical)
        } else if aliases.iter().any(|a| a == word) {
            Some(MatchKind::Alias)
        } else {
            None
        }
    }
}

impl Default for KeywordSet {
    fn default() -> Self {
        Self::digits()
    }
}

/// Which speech-to-text backend produces a session's transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    /// Runs `program args… <wav path>` and parses transcript JSON from stdout.
    ExternalCommand {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default = "default_timeout_s")]
        timeout_s: f64,
    },
    /// Reads a transcript file that already sits next to the audio.
    SidecarFile { path: PathBuf },
    /// Emits one digit token per voiced tone burst, in ascending order.
    ToneSpotter {
        #[serde(default)]
        params: VoiceParams,
    },
}

fn default_timeout_s() -> f64 {
    120.0
}

impl BackendConfig {
    pub fn id(&self) -> &'static str {
        match self {
            BackendConfig::ExternalCommand { .. } => "external-command",
            BackendConfig::SidecarFile { .. } => "sidecar-file",
            BackendConfig::ToneSpotter { .. } => "tone-spotter",
        }
    }
}

/// Produces a transcript for `track`. `wav_path` is the file the track came
/// from; the external command backend needs it and writes a temporary copy
/// when it is absent.
pub fn run_backend(
    track: &AudioTrack,
    wav_path: Option<&Path>,
    backend: &BackendConfig,
) -> Result<Transcript> {
    match backend {
        BackendConfig::SidecarFile { path } => load_transcript(path),
        BackendConfig::ToneSpotter { params } => tone_spotter(track, params),
        BackendConfig::ExternalCommand {
            program,
            args,
            timeout_s,
        } => {
            let tmp;
            let wav = match wav_path {
                Some(p) => p.to_path_buf(),
                None => {
                    tmp = tempfile::Builder::new()
                        .suffix(".wav")
                        .tempfile()
                        .map_err(|e| Error::io("creating temporary wav", e))?;
                    crate::audio::write_wav_pcm16(track, tmp.path())?;
                    tmp.path().to_path_buf()
                }
            };
            run_external(program, args, &wav, Duration::from_secs_f64(*timeout_s))
        }
    }
}

fn tone_spotter(track: &AudioTrack, params: &VoiceParams) -> Result<Transcript> {
    let segments = voiced_segments(track, params)?;
    if segments.len() > CANONICAL_DIGITS.len() {
        log::warn!(
            "tone spotter found {} bursts; only the first {} become tokens",
            segments.len(),
            CANONICAL_DIGITS.len()
        );
    }
    let tokens = segments
        .iter()
        .zip(CANONICAL_DIGITS)
        .map(|(seg, word)| TranscriptToken {
            text: word.to_string(),
            start_s: seg.start_s,
            end_s: seg.end_s,
            confidence: seg.mean_band_ratio.clamp(0.0, 1.0),
        })
        .collect();
    Ok(Transcript {
        source_id: "tone-spotter".into(),
        tokens,
    })
}

fn backend_error(message: impl Into<String>) -> Error {
    Error::Backend {
        backend: "external-command".into(),
        message: message.into(),
    }
}

fn run_external(
    program: &Path,
    args: &[String],
    wav: &Path,
    timeout: Duration,
) -> Result<Transcript> {
    let mut child = Command::new(program)
        .args(args)
        .arg(wav)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| backend_error(format!("spawning {}: {e}", program.display())))?;

    let mut stdout = child.stdout.take().expect("stdout is piped");
    let mut stderr = child.stderr.take().expect("stderr is piped");
    let out_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        stdout.read_to_end(&mut buf).map(|_| buf)
    });
    let err_reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stderr.read_to_end(&mut buf);
        buf
    });

    let deadline = Instant::now() + timeout;
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if Instant::now() >= deadline => {
                let _ = child.kill();
                let _ = child.wait();
                // grandchildren may still hold the pipes open, so the reader
                // threads are left to finish on their own
                return Err(backend_error(format!(
                    "timed out after {:.1} s",
                    timeout.as_secs_f64()
                )));
            }
            Ok(None) => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(backend_error(format!("waiting for child: {e}"))),
        }
    };
    let stdout = out_reader
        .join()
        .map_err(|_| backend_error("stdout reader panicked"))?
        .map_err(|e| backend_error(format!("reading stdout: {e}")))?;
    let stderr = err_reader.join().unwrap_or_default();
    if !status.success() {
        return Err(backend_error(format!(
            "{} exited with {status}; stderr: {}",
            program.display(),
            String::from_utf8_lossy(&stderr).trim()
        )));
    }
    let text = String::from_utf8(stdout).map_err(|_| backend_error("stdout is not UTF-8"))?;
    Transcript::from_json_str(
        &text,
        &PathBuf::from(format!("<stdout of {}>", program.display())),
    )
}
