//! WAV ingestion and the fixed 1 s / 8 kHz clip format the networks consume.
//!
//! Decoding goes through `hound`; everything after that (mixing, anti-alias
//! filtering, resampling, tiling, standardization, the `.f32` clip cache)
//! lives here.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Seek};
use std::path::{Path, PathBuf};

use sha1::{Digest, Sha1};

use crate::error::{Error, Result};

/// Working sample rate in Hz.
pub const SAMPLE_RATE: u32 = 8000;
/// Samples per clip (one second).
pub const CLIP_LEN: usize = SAMPLE_RATE as usize;
/// Shortest trailing remainder that is kept (zero-padded) rather than dropped.
pub const MIN_REMAINDER: usize = CLIP_LEN / 2;

const CUTOFF_HZ: f64 = 3600.0;
const TAPS: usize = 65;
const STD_FLOOR: f64 = 1e-8;

/// Decoded audio, mixed down to mono.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub samples: Vec<f32>,
    pub rate: u32,
    pub channels: u16,
}

/// One second of 8 kHz audio cut from a source recording.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub source: String,
    pub offset_s: f64,
}

impl AudioClip {
    pub const SAMPLE_RATE: u32 = SAMPLE_RATE;
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        // hound reports a short read either as EOF or as a plain message
        hound::Error::IoError(io)
            if io.kind() == std::io::ErrorKind::UnexpectedEof
                || io.to_string().starts_with("Failed to read enough bytes") =>
        {
            Error::Wav("data chunk shorter than declared".into())
        }
        hound::Error::Unsupported => Error::Wav("unsupported format code (expected PCM or IEEE float)".into()),
        other => Error::Wav(other.to_string()),
    }
}

/// Decodes PCM 8/16/24/32-bit or 32-bit float WAV with one or two channels.
///
/// Integer samples are scaled by `1 / 2^(bits-1)`; stereo frames are averaged.
pub fn read_wav<R: Read>(reader: R) -> Result<Decoded> {
    let mut wav = hound::WavReader::new(reader).map_err(wav_err)?;
    let spec = wav.spec();
    if !(1..=2).contains(&spec.channels) {
        return Err(Error::Wav(format!("{} channels (expected 1 or 2)", spec.channels)));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => wav
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / f64::from(1u32 << (bits - 1));
            wav.samples::<i32>()
                .map(|s| s.map(|v| (f64::from(v) * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
        (fmt, bits) => {
            return Err(Error::Wav(format!("unsupported sample format {fmt:?} at {bits} bits")));
        }
    };
    let samples = match spec.channels {
        1 => interleaved,
        _ => interleaved.chunks_exact(2).map(|f| (f[0] + f[1]) * 0.5).collect(),
    };
    Ok(Decoded {
        samples,
        rate: spec.sample_rate,
        channels: spec.channels,
    })
}

/// Reads a WAV file from disk; see [`read_wav`].
pub fn load_wav(path: impl AsRef<Path>) -> Result<Decoded> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_wav(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Wav(m) => Error::Wav(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn quantize(v: f32) -> i16 {
    (f64::from(v) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Encodes mono 16-bit PCM.
pub fn write_wav_to<W: std::io::Write + Seek>(writer: W, samples: &[f32], rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::new(writer, spec).map_err(wav_err)?;
    for &s in samples {
        w.write_sample(quantize(s)).map_err(wav_err)?;
    }
    w.finalize().map_err(wav_err)
}

/// Writes mono 16-bit PCM to `path`.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], rate: u32) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_wav_to(std::io::BufWriter::new(file), samples, rate)
}

/// Hamming-windowed sinc low-pass with unit DC gain.
fn lowpass(rate: u32) -> Vec<f64> {
    let fc = CUTOFF_HZ / f64::from(rate);
    let mid = (TAPS / 2) as f64;
    let mut h: Vec<f64> = (0..TAPS)
        .map(|n| {
            let t = n as f64 - mid;
            let sinc = if t == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * t).sin() / (PI * t) };
            let window = 0.54 - 0.46 * (2.0 * PI * n as f64 / (TAPS - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// Converts to 8 kHz: zero-phase FIR anti-alias at 3.6 kHz, then linear interpolation.
///
/// Output length is `round(len * 8000 / rate)`. Upsampling is rejected.
pub fn resample_to_8k(samples: &[f32], rate: u32) -> Result<Vec<f32>> {
    if rate < SAMPLE_RATE {
        return Err(Error::Audio(format!("sample rate {rate} Hz is below {SAMPLE_RATE} Hz")));
    }
    if rate == SAMPLE_RATE {
        return Ok(samples.to_vec());
    }
    let h = lowpass(rate);
    let half = (TAPS / 2) as isize;
    let n = samples.len() as isize;
    let filtered: Vec<f64> = (0..n)
        .map(|i| {
            h.iter()
                .enumerate()
                .filter_map(|(j, &c)| {
                    let k = i + j as isize - half;
                    (0..n).contains(&k).then(|| c * f64::from(samples[k as usize]))
                })
                .sum()
        })
        .collect();
    let out_len = (samples.len() as f64 * f64::from(SAMPLE_RATE) / f64::from(rate)).round() as usize;
    let step = f64::from(rate) / f64::from(SAMPLE_RATE);
    let last = filtered.len().saturating_sub(1);
    Ok((0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = pos - lo as f64;
            (filtered[lo] * (1.0 - frac) + filtered[hi] * frac) as f32
        })
        .collect())
}

/// Tiles each `(start_s, end_s)` segment into consecutive 1 s clips.
///
/// A trailing remainder of at least 0.5 s is zero-padded to a full clip;
/// shorter remainders are dropped.
pub fn extract_clips(samples_8k: &[f32], segments: &[(f64, f64)], source: &str) -> Result<Vec<AudioClip>> {
    let rate = f64::from(SAMPLE_RATE);
    let mut clips = Vec::new();
    for &(start_s, end_s) in segments {
        let start = (start_s * rate).round();
        let end = (end_s * rate).round();
        if !(start >= 0.0 && start <= end && end <= samples_8k.len() as f64) {
            return Err(Error::Audio(format!(
                "segment {start_s}..{end_s} s lies outside a {:.3} s signal",
                samples_8k.len() as f64 / rate
            )));
        }
        let (start, end) = (start as usize, end as usize);
        let mut at = start;
        while at < end {
            let take = (end - at).min(CLIP_LEN);
            if take < MIN_REMAINDER {
                break;
            }
            let mut samples = samples_8k[at..at + take].to_vec();
            samples.resize(CLIP_LEN, 0.0);
            clips.push(AudioClip {
                samples,
                source: source.to_string(),
                offset_s: at as f64 / rate,
            });
            at += take;
        }
    }
    Ok(clips)
}

/// In-place `(x - mean) / max(std, 1e-8)` with the population deviation.
pub fn standardize(samples: &mut [f32]) {
    if samples.is_empty() {
        return;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = samples.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    for v in samples.iter_mut() {
        *v = ((f64::from(*v) - mean) / std) as f32;
    }
}

/// Decodes, resamples and tiles a whole recording into standardized clips.
pub fn ingest(path: impl AsRef<Path>) -> Result<Vec<AudioClip>> {
    let path = path.as_ref();
    let decoded = load_wav(path)?;
    let resampled = resample_to_8k(&decoded.samples, decoded.rate)?;
    let duration = resampled.len() as f64 / f64::from(SAMPLE_RATE);
    let mut clips = extract_clips(&resampled, &[(0.0, duration)], &path.to_string_lossy())?;
    for c in &mut clips {
        standardize(&mut c.samples);
    }
    Ok(clips)
}

/// Cache filename for a clip: hex SHA-1 of `source` and `offset_s`, plus `.f32`.
pub fn cache_name(source: &str, offset_s: f64) -> String {
    let mut sha = Sha1::new();
    sha.update(source.as_bytes());
    sha.update(format!("@{offset_s:.6}").as_bytes());
    format!("{}.f32", hex::encode(sha.finalize()))
}

/// Writes a clip as raw little-endian `f32`; returns the file path.
pub fn write_cached(dir: impl AsRef<Path>, clip: &AudioClip) -> Result<PathBuf> {
    if clip.samples.len() != CLIP_LEN {
        return Err(Error::Audio(format!("clip has {} samples, expected {CLIP_LEN}", clip.samples.len())));
    }
    let path = dir.as_ref().join(cache_name(&clip.source, clip.offset_s));
    let bytes: Vec<u8> = clip.samples.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a cached `.f32` clip.
pub fn read_cached(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != CLIP_LEN * 4 {
        return Err(Error::Audio(format!(
            "{}: {} bytes, a cached clip has {}",
            path.display(),
            bytes.len(),
            CLIP_LEN * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Loads one model-ready clip: a cached `.f32`, or a WAV that tiles to exactly one clip.
pub fn load_clip(path: impl AsRef<Path>) -> Result<Vec<f32>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "f32") {
        return read_cached(path);
    }
    let mut clips = ingest(path)?;
    match clips.len() {
        1 => Ok(clips.pop().expect("one clip").samples),
        n => Err(Error::Audio(format!(
            "{} yields {n} clips; run `prepare` to tile longer recordings",
            path.display()
        ))),
    }
}
