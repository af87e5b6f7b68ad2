//! Mono audio tracks and the short-time spectral measurements used to find
//! voiced stretches of a recording.

mod wav;

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use wav::{read_wav, write_wav_pcm16};

/// Lowest sample rate the toolkit accepts.
pub const MIN_SAMPLE_RATE_HZ: u32 = 8000;

/// Fewest samples a spectral window may hold.
pub const MIN_WINDOW_SAMPLES: usize = 16;

/// An immutable mono sample buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioTrack {
    samples: Vec<f64>,
    sample_rate_hz: u32,
    source_channels: u16,
}

impl AudioTrack {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32, source_channels: u16) -> Result<Self> {
        if sample_rate_hz < MIN_SAMPLE_RATE_HZ {
            return Err(Error::Argument(format!(
                "sample rate {sample_rate_hz} Hz is below {MIN_SAMPLE_RATE_HZ} Hz"
            )));
        }
        if source_channels == 0 {
            return Err(Error::Argument(
                "source channel count must be at least 1".into(),
            ));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::Range(format!(
                "sample {i} = {s} is not a finite amplitude in [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
            source_channels,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn source_channels(&self) -> u16 {
        self.source_channels
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn nyquist_hz(&self) -> f64 {
        self.sample_rate_hz as f64 / 2.0
    }
}

/// Averages channels sample by sample.
pub fn to_mono(channels: &[Vec<f64>], sample_rate_hz: u32) -> Result<AudioTrack> {
    let first = channels
        .first()
        .ok_or_else(|| Error::Structural("no channels supplied".into()))?;
    if let Some((i, c)) = channels
        .iter()
        .enumerate()
        .find(|(_, c)| c.len() != first.len())
    {
        return Err(Error::Structural(format!(
            "channel {i} has {} samples, channel 0 has {}",
            c.len(),
            first.len()
        )));
    }
    let n_ch = channels.len();
    let samples = if n_ch == 1 {
        first.clone()
    } else {
        (0..first.len())
            .map(|i| channels.iter().map(|c| c[i]).sum::<f64>() / n_ch as f64)
            .collect()
    };
    let source_channels = u16::try_from(n_ch)
        .map_err(|_| Error::Structural(format!("{n_ch} channels is too many")))?;
    AudioTrack::new(samples, sample_rate_hz, source_channels)
}

/// Taper applied to each analysis window before the transform.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFunction {
    Rectangular,
    #[default]
    Hann,
}

impl WindowFunction {
    fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            WindowFunction::Rectangular => vec![1.0; n],
            WindowFunction::Hann => {
                let denom = (n - 1) as f64;
                (0..n)
                    .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / denom).cos()))
                    .collect()
            }
        }
    }
}

impl std::str::FromStr for WindowFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hann" => Ok(Self::Hann),
            "rectangular" | "rect" => Ok(Self::Rectangular),
            other => Err(Error::Argument(format!(
                "unknown window function `{other}`"
            ))),
        }
    }
}

/// One spectral bin: centre frequency and magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumBin {
    pub freq_hz: f64,
    pub magnitude: f64,
}

/// Summary of one analysis window. `dominant_freq_hz` ignores the DC bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisWindow {
    pub start_s: f64,
    pub duration_s: f64,
    pub dominant_freq_hz: f64,
    pub band_energy_ratio: f64,
}

/// A maximal run of windows that passed both the voice-band and
/// energy-ratio tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoicedSegment {
    pub start_s: f64,
    pub end_s: f64,
    pub mean_band_ratio: f64,
}

/// Tunables for [`voiced_segments`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoiceParams {
    pub window_s: f64,
    pub hop_s: f64,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub ratio_threshold: f64,
    pub window_fn: WindowFunction,
}

impl Default for VoiceParams {
    fn default() -> Self {
        Self {
            window_s: 0.25,
            hop_s: 0.10,
            band_lo_hz: 300.0,
            band_hi_hz: 3000.0,
            ratio_threshold: 0.5,
            window_fn: WindowFunction::Hann,
        }
    }
}

impl VoiceParams {
    pub fn validate(&self, nyquist_hz: f64) -> Result<()> {
        if !(self.window_s > 0.0 && self.hop_s > 0.0 && self.hop_s <= self.window_s) {
            return Err(Error::Argument(format!(
                "need 0 < hop_s <= window_s, got hop {} window {}",
                self.hop_s, self.window_s
            )));
        }
        if !(0.0..=1.0).contains(&self.ratio_threshold) {
            return Err(Error::Argument(format!(
                "ratio threshold {} outside [0, 1]",
                self.ratio_threshold
            )));
        }
        validate_band(self.band_lo_hz, self.band_hi_hz, nyquist_hz)
    }
}

fn validate_band(lo: f64, hi: f64, nyquist_hz: f64) -> Result<()> {
    if !(lo >= 0.0 && lo < hi && hi <= nyquist_hz) {
        return Err(Error::Argument(format!(
            "band [{lo}, {hi}] Hz must satisfy 0 <= lo < hi <= {nyquist_hz}"
        )));
    }
    Ok(())
}

/// Reusable transform for one window length.
struct Analyzer {
    fft: Arc<dyn Fft<f64>>,
    taper: Vec<f64>,
    sample_rate_hz: f64,
    buf: Vec<Complex<f64>>,
}

impl Analyzer {
    fn new(len: usize, sample_rate_hz: u32, window_fn: WindowFunction) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len);
        Self {
            fft,
            taper: window_fn.coefficients(len),
            sample_rate_hz: sample_rate_hz as f64,
            buf: Vec::with_capacity(len),
        }
    }

    fn len(&self) -> usize {
        self.taper.len()
    }

    /// One-sided magnitude spectrum, bins 0 ..= len/2.
    fn spectrum(&mut self, segment: &[f64]) -> Vec<SpectrumBin> {
        let n = self.len();
        self.buf.clear();
        self.buf.extend(
            segment
                .iter()
                .zip(&self.taper)
                .map(|(s, w)| Complex::new(s * w, 0.0)),
        );
        self.fft.process(&mut self.buf);
        let bin_hz = self.sample_rate_hz / n as f64;
        self.buf[..=n / 2]
            .iter()
            .enumerate()
            .map(|(k, c)| SpectrumBin {
                freq_hz: k as f64 * bin_hz,
                magnitude: c.norm(),
            })
            .collect()
    }
}

fn window_bounds(track: &AudioTrack, start_s: f64, duration_s: f64) -> Result<(usize, usize)> {
    if !(start_s.is_finite() && duration_s.is_finite() && start_s >= 0.0 && duration_s > 0.0) {
        return Err(Error::Range(format!(
            "window start {start_s} s / duration {duration_s} s is not a valid span"
        )));
    }
    let sr = track.sample_rate_hz() as f64;
    let start = (start_s * sr).round() as usize;
    let len = (duration_s * sr).round() as usize;
    if len < MIN_WINDOW_SAMPLES {
        return Err(Error::Range(format!(
            "window of {len} samples is shorter than {MIN_WINDOW_SAMPLES}"
        )));
    }
    if start + len > track.samples().len() {
        return Err(Error::Range(format!(
            "window [{start_s}, {}] s exceeds track duration {} s",
            start_s + duration_s,
            track.duration_s()
        )));
    }
    Ok((start, len))
}

/// Magnitude spectrum of the tapered segment `[start_s, start_s + duration_s)`,
/// from 0 Hz up to Nyquist.
pub fn magnitude_spectrum(
    track: &AudioTrack,
    start_s: f64,
    duration_s: f64,
    window_fn: WindowFunction,
) -> Result<Vec<SpectrumBin>> {
    let (start, len) = window_bounds(track, start_s, duration_s)?;
    let mut analyzer = Analyzer::new(len, track.sample_rate_hz(), window_fn);
    Ok(analyzer.spectrum(&track.samples()[start..start + len]))
}

fn summarize(spectrum: &[SpectrumBin], band_lo: f64, band_hi: f64) -> (f64, f64) {
    let mut total = 0.0;
    let mut in_band = 0.0;
    let mut peak = (0.0, 0.0);
    for bin in spectrum.iter().skip(1) {
        let e = bin.magnitude * bin.magnitude;
        total += e;
        if bin.freq_hz >= band_lo && bin.freq_hz <= band_hi {
            in_band += e;
        }
        if bin.magnitude > peak.1 {
            peak = (bin.freq_hz, bin.magnitude);
        }
    }
    let ratio = if total > 0.0 { in_band / total } else { 0.0 };
    (peak.0, ratio)
}

/// Dominant frequency and speech-band energy ratio of one window.
pub fn analyze_window(
    track: &AudioTrack,
    start_s: f64,
    duration_s: f64,
    band_lo_hz: f64,
    band_hi_hz: f64,
    window_fn: WindowFunction,
) -> Result<AnalysisWindow> {
    validate_band(band_lo_hz, band_hi_hz, track.nyquist_hz())?;
    let spectrum = magnitude_spectrum(track, start_s, duration_s, window_fn)?;
    let (dominant_freq_hz, band_energy_ratio) = summarize(&spectrum, band_lo_hz, band_hi_hz);
    Ok(AnalysisWindow {
        start_s,
        duration_s,
        dominant_freq_hz,
        band_energy_ratio,
    })
}

/// Scans the whole track with a sliding window and returns every analysed window.
pub fn scan_windows(track: &AudioTrack, params: &VoiceParams) -> Result<Vec<AnalysisWindow>> {
    params.validate(track.nyquist_hz())?;
    let sr = track.sample_rate_hz() as f64;
    let len = (params.window_s * sr).round() as usize;
    if len < MIN_WINDOW_SAMPLES {
        return Err(Error::Range(format!(
            "window of {len} samples is shorter than {MIN_WINDOW_SAMPLES}"
        )));
    }
    let hop = ((params.hop_s * sr).round() as usize).max(1);
    let samples = track.samples();
    let mut analyzer = Analyzer::new(len, track.sample_rate_hz(), params.window_fn);
    let mut out = Vec::new();
    let mut start = 0;
    while start + len <= samples.len() {
        let segment = &samples[start..start + len];
        let (dominant_freq_hz, band_energy_ratio) = if segment.iter().all(|&s| s == 0.0) {
            (0.0, 0.0)
        } else {
            let spectrum = analyzer.spectrum(segment);
            summarize(&spectrum, params.band_lo_hz, params.band_hi_hz)
        };
        out.push(AnalysisWindow {
            start_s: start as f64 / sr,
            duration_s: len as f64 / sr,
            dominant_freq_hz,
            band_energy_ratio,
        });
        start += hop;
    }
    Ok(out)
}

/// A window is a voice candidate when its dominant frequency sits in the band
/// and enough of its energy does too. Zero-energy windows never pass.
pub fn window_passes(w: &AnalysisWindow, params: &VoiceParams) -> bool {
    w.band_energy_ratio > 0.0
        && w.dominant_freq_hz >= params.band_lo_hz
        && w.dominant_freq_hz <= params.band_hi_hz
        && w.band_energy_ratio >= params.ratio_threshold
}

/// Merges overlapping or touching passing windows into maximal segments.
pub fn voiced_segments(track: &AudioTrack, params: &VoiceParams) -> Result<Vec<VoicedSegment>> {
    let windows = scan_windows(track, params)?;
    let eps = 0.5 / track.sample_rate_hz() as f64;
    let mut segments: Vec<(VoicedSegment, usize)> = Vec::new();
    for w in windows.iter().filter(|w| window_passes(w, params)) {
        let end = w.start_s + w.duration_s;
        match segments.last_mut() {
            Some((seg, count)) if w.start_s <= seg.end_s + eps => {
                seg.end_s = seg.end_s.max(end);
                seg.mean_band_ratio += w.band_energy_ratio;
                *count += 1;
            }
            _ => segments.push((
                VoicedSegment {
                    start_s: w.start_s,
                    end_s: end,
                    mean_band_ratio: w.band_energy_ratio,
                },
                1,
            )),
        }
    }
    Ok(segments
        .into_iter()
        .map(|(mut seg, count)| {
            seg.mean_band_ratio /= count as f64;
            seg
        })
        .collect())
}
