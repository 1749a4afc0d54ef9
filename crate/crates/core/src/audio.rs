//! WAV decoding, mono downmix with peak normalization, and leading/trailing
//! silence trimming.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const EXPECTED_SAMPLE_RATE: u32 = 44_100;
pub const SILENCE_THRESHOLD: f64 = 0.0061;
pub const SILENCE_WINDOW: usize = 4;

const FORMAT_PCM: u16 = 0x0001;
const FORMAT_FLOAT: u16 = 0x0003;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Interleaved multichannel samples as read from disk, scaled to real values.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAudio {
    pub sample_rate: u32,
    pub channels: usize,
    pub samples: Vec<f64>,
}

impl RawAudio {
    pub fn frames(&self) -> usize {
        self.samples.len() / self.channels
    }

    pub fn get(&self, frame: usize, channel: usize) -> f64 {
        self.samples[frame * self.channels + channel]
    }
}

/// Mono clip, normalized to peak 1 and trimmed.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source: String,
}

/// How the four-sample window is scored against the silence threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SilenceRule {
    /// `|x[i] + x[i+1] + x[i+2] + x[i+3]|`
    #[default]
    AbsOfSum,
    /// `|x[i]| + |x[i+1]| + |x[i+2]| + |x[i+3]|`
    SumOfAbs,
}

impl std::str::FromStr for SilenceRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs_of_sum" => Ok(SilenceRule::AbsOfSum),
            "sum_of_abs" => Ok(SilenceRule::SumOfAbs),
            _ => Err(Error::InvalidArgument(format!(
                "unknown silence rule '{s}' (expected abs_of_sum|sum_of_abs)"
            ))),
        }
    }
}

impl SilenceRule {
    fn score(self, w: &[f64]) -> f64 {
        match self {
            SilenceRule::AbsOfSum => w.iter().sum::<f64>().abs(),
            SilenceRule::SumOfAbs => w.iter().map(|x| x.abs()).sum(),
        }
    }
}

pub fn decode_wav(path: impl AsRef<Path>) -> Result<RawAudio> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).at(path)?;
    decode_wav_bytes(&bytes)
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_wav_bytes(bytes: &[u8]) -> Result<RawAudio> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Wav("missing RIFF/WAVE header".into()));
    }
    let mut fmt: Option<(u16, usize, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        // tolerate a truncated final data chunk, as many writers leave the size stale
        let body_end = (body_start + size).min(bytes.len());
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::Wav("fmt chunk too short".into()));
                }
                let mut tag = u16_at(body, 0);
                let channels = u16_at(body, 2) as usize;
                let rate = u32_at(body, 4);
                let bits = u16_at(body, 14);
                if tag == FORMAT_EXTENSIBLE {
                    if body.len() < 26 {
                        return Err(Error::Wav("extensible fmt chunk too short".into()));
                    }
                    tag = u16_at(body, 24);
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        pos = body_start + size + (size & 1);
    }
    let (tag, channels, sample_rate, bits) =
        fmt.ok_or_else(|| Error::Wav("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Wav("no data chunk".into()))?;
    if channels == 0 {
        return Err(Error::Wav("zero channels".into()));
    }
    let samples: Vec<f64> = match (tag, bits) {
        (FORMAT_PCM, 16) => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (FORMAT_FLOAT, 32) => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        (format_tag, bits) => return Err(Error::UnsupportedCodec { format_tag, bits }),
    };
    let frames = samples.len() / channels;
    if frames == 0 {
        return Err(Error::EmptyAudio);
    }
    let mut samples = samples;
    samples.truncate(frames * channels);
    Ok(RawAudio {
        sample_rate,
        channels,
        samples,
    })
}

fn wav_header(out: &mut Vec<u8>, tag: u16, channels: usize, rate: u32, bits: u16, data_len: usize) {
    let block = channels as u16 * bits / 8;
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(channels as u16).to_le_bytes());
    out.extend_from_slice(&rate.to_le_bytes());
    out.extend_from_slice(&(rate * block as u32).to_le_bytes());
    out.extend_from_slice(&block.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
}

/// Quantizes interleaved samples to 16-bit PCM. Values decoded from PCM-16
/// re-encode to the identical integers.
pub fn encode_wav_pcm16(samples: &[f64], channels: usize, sample_rate: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    wav_header(&mut out, FORMAT_PCM, channels, sample_rate, 16, samples.len() * 2);
    for &x in samples {
        let q = (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn encode_wav_f32(samples: &[f64], channels: usize, sample_rate: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(44 + samples.len() * 4);
    wav_header(&mut out, FORMAT_FLOAT, channels, sample_rate, 32, samples.len() * 4);
    for &x in samples {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

pub fn write_wav_pcm16(
    path: impl AsRef<Path>,
    samples: &[f64],
    channels: usize,
    sample_rate: u32,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_wav_pcm16(samples, channels, sample_rate)).at(path)
}

/// Sums channels per frame, then divides by the peak absolute value.
pub fn downmix_and_normalize(raw: &RawAudio) -> Result<Vec<f64>> {
    if raw.samples.is_empty() || raw.channels == 0 {
        return Err(Error::EmptyAudio);
    }
    let mono: Vec<f64> = raw
        .samples
        .chunks_exact(raw.channels)
        .map(|frame| frame.iter().sum())
        .collect();
    let peak = mono.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return Err(Error::AllZero);
    }
    Ok(mono.into_iter().map(|x| x / peak).collect())
}

/// Index range kept by [`trim_silence`]: from the first qualifying window's
/// first sample to the last qualifying window's final sample.
pub fn silence_bounds(samples: &[f64], rule: SilenceRule) -> Result<std::ops::Range<usize>> {
    let loud = |w: &[f64]| rule.score(w) > SILENCE_THRESHOLD;
    let first = samples
        .windows(SILENCE_WINDOW)
        .position(loud)
        .ok_or(Error::EntirelySilent)?;
    let last = samples
        .windows(SILENCE_WINDOW)
        .rposition(loud)
        .ok_or(Error::EntirelySilent)?;
    Ok(first..last + SILENCE_WINDOW)
}

pub fn trim_silence(samples: &[f64], rule: SilenceRule) -> Result<Vec<f64>> {
    let range = silence_bounds(samples, rule)?;
    Ok(samples[range].to_vec())
}

/// Decode, downmix, normalize and trim one file.
pub fn load_clip(path: impl AsRef<Path>, rule: SilenceRule) -> Result<AudioClip> {
    let path = path.as_ref();
    let raw = decode_wav(path)?;
    if raw.sample_rate != EXPECTED_SAMPLE_RATE {
        log::warn!(
            "{}: sample rate {} Hz (expected {}); not resampling",
            path.display(),
            raw.sample_rate,
            EXPECTED_SAMPLE_RATE
        );
    }
    let mono = downmix_and_normalize(&raw)?;
    let samples = trim_silence(&mono, rule)?;
    Ok(AudioClip {
        samples,
        sample_rate: raw.sample_rate,
        source: path.display().to_string(),
    })
}
