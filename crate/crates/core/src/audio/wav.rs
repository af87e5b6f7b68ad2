use std::io::Read;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{to_mono, AudioTrack};
use crate::error::{Error, Result};

const TAG_PCM: u16 = 0x0001;
const TAG_IEEE_FLOAT: u16 = 0x0003;
const TAG_EXTENSIBLE: u16 = 0xFFFE;

fn format_name(tag: u16) -> &'static str {
    match tag {
        0x0002 => "Microsoft ADPCM",
        0x0006 => "A-law",
        0x0007 => "mu-law",
        0x0011 => "IMA ADPCM",
        0x0031 => "GSM 6.10",
        0x0050 => "MPEG",
        0x0055 => "MPEG Layer 3",
        0x00FF => "AAC",
        0x1610 => "HE-AAC",
        _ => "unknown",
    }
}

/// Finds the effective format tag in the `fmt ` chunk, resolving
/// WAVE_FORMAT_EXTENSIBLE to its sub-format.
fn peek_format_tag(bytes: &[u8]) -> Option<u16> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return None;
    }
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().ok()?) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            let tag = u16::from_le_bytes(bytes.get(body..body + 2)?.try_into().ok()?);
            if tag == TAG_EXTENSIBLE {
                return Some(u16::from_le_bytes(
                    bytes.get(body + 24..body + 26)?.try_into().ok()?,
                ));
            }
            return Some(tag);
        }
        pos = body + size + (size & 1);
    }
    None
}

/// Reads a little-endian RIFF/WAVE file (PCM 8/16/24/32-bit or 32-bit float)
/// and mixes it down to mono.
pub fn read_wav(path: &Path) -> Result<AudioTrack> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if let Some(tag) = peek_format_tag(&bytes) {
        if tag != TAG_PCM && tag != TAG_IEEE_FLOAT {
            return Err(Error::UnsupportedWav {
                tag,
                name: format_name(tag),
            });
        }
    }
    let mut reader = WavReader::new(std::io::Cursor::new(bytes))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 {
        return Err(Error::Structural(format!(
            "{} declares zero channels",
            path.display()
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| (v as f64).clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::Structural(format!(
                "{}: {bits}-bit {fmt:?} samples are not supported",
                path.display()
            )))
        }
    };
    let frames = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, &s) in channels.iter_mut().zip(frame) {
            c.push(s);
        }
    }
    to_mono(&channels, spec.sample_rate)
}

/// Writes a mono 16-bit PCM file.
pub fn write_wav_pcm16(track: &AudioTrack, path: &Path) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: track.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut writer = WavWriter::new(&mut cursor, spec)?;
        for &s in track.samples() {
            writer.write_sample((s * 32767.0).round().clamp(-32768.0, 32767.0) as i16)?;
        }
        writer.finalize()?;
    }
    let bytes = cursor.into_inner();
    crate::fsio::write_atomic(path, |w| {
        w.write_all(&bytes)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    })
}
