//! Raw audio handling: WAV decode/encode, non-speech trimming, speed
//! perturbation, and fixed-length windowing.
//!
//! Only RIFF/WAVE containers with 16-bit little-endian PCM are supported;
//! multichannel files are averaged down to mono at decode time. All
//! operations are pure functions of their inputs.

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed WAV header in {path}: {reason}")]
    MalformedHeader { path: String, reason: String },
    #[error("unsupported encoding in {path}: format tag {format} (only PCM = 1 is supported)")]
    UnsupportedEncoding { path: String, format: u16 },
    #[error("unsupported bit depth in {path}: {bits} bits (only 16-bit PCM is supported)")]
    UnsupportedBitDepth { path: String, bits: u16 },
    #[error("empty audio: {0}")]
    EmptyAudio(String),
    #[error("amplitude {value} at sample {index} outside [-1, 1]")]
    AmplitudeOutOfRange { index: usize, value: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AudioError>;

/// Mono waveform: real amplitudes in `[-1, 1]` plus a sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(AudioError::EmptyAudio("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(AudioError::InvalidArgument("sample_rate must be > 0".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(AudioError::InvalidArgument(format!(
                "non-finite amplitude at sample {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn read_u16(buf: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_le_bytes(buf.get(at..at + 2)?.try_into().ok()?))
}

fn read_u32(buf: &[u8], at: usize) -> Option<u32> {
    Some(u32::from_le_bytes(buf.get(at..at + 4)?.try_into().ok()?))
}

/// Decode a 16-bit PCM WAV file to a mono waveform.
///
/// Integer samples map to amplitudes by division by 32768, so the full
/// negative code -32768 reaches exactly -1.0. Channels are averaged.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == io::ErrorKind::NotFound {
            AudioError::FileNotFound(display.clone())
        } else {
            AudioError::Io {
                path: display.clone(),
                source: e,
            }
        }
    })?;
    let header = |reason: &str| AudioError::MalformedHeader {
        path: display.clone(),
        reason: reason.to_string(),
    };

    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(header("missing RIFF/WAVE signature"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    let mut at = 12usize;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = read_u32(&bytes, at + 4).ok_or_else(|| header("truncated chunk header"))? as usize;
        let body_start = at + 8;
        let body_end = body_start.checked_add(size).ok_or_else(|| header("chunk size overflow"))?;
        if body_end > bytes.len() {
            return Err(header("chunk extends past end of file"));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(header("fmt chunk too short"));
                }
                let format = read_u16(&bytes, body_start).unwrap();
                let channels = read_u16(&bytes, body_start + 2).unwrap();
                let rate = read_u32(&bytes, body_start + 4).unwrap();
                let bits = read_u16(&bytes, body_start + 14).unwrap();
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {}
        }
        // chunks are word-aligned
        at = body_end + (size & 1);
    }

    let (format, channels, rate, bits) = fmt.ok_or_else(|| header("no fmt chunk"))?;
    if format != 1 {
        return Err(AudioError::UnsupportedEncoding {
            path: display,
            format,
        });
    }
    if bits != 16 {
        return Err(AudioError::UnsupportedBitDepth {
            path: display,
            bits,
        });
    }
    if channels == 0 {
        return Err(header("zero channels"));
    }
    if rate == 0 {
        return Err(header("zero sample rate"));
    }
    let data = data.ok_or_else(|| header("no data chunk"))?;
    let frame_bytes = 2 * channels as usize;
    let n_frames = data.len() / frame_bytes;
    if n_frames == 0 {
        return Err(AudioError::EmptyAudio(display));
    }
    let mut samples = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut acc = 0.0f64;
        for c in 0..channels as usize {
            let at = f * frame_bytes + 2 * c;
            let v = i16::from_le_bytes([data[at], data[at + 1]]);
            acc += v as f64 / 32768.0;
        }
        samples.push(acc / channels as f64);
    }
    Waveform::new(samples, rate)
}

/// Encode a waveform as 16-bit PCM mono.
///
/// Quantization is `clamp(round(a * 32768), -32768, 32767)`, so decode
/// after encode recovers each amplitude within one quantization step.
pub fn write_wav(wav: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    if wav.samples.is_empty() {
        return Err(AudioError::EmptyAudio("refusing to write empty file".into()));
    }
    for (i, &a) in wav.samples.iter().enumerate() {
        if !a.is_finite() || !(-1.0..=1.0).contains(&a) {
            return Err(AudioError::AmplitudeOutOfRange { index: i, value: a });
        }
    }
    let data_len = (wav.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wav.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wav.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &a in &wav.samples {
        let q = (a * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| AudioError::Io {
        path: display.clone(),
        source: e,
    })?;
    file.write_all(&out).map_err(|e| AudioError::Io {
        path: display,
        source: e,
    })
}

fn frame_rms(frame: &[f64]) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    (frame.iter().map(|v| v * v).sum::<f64>() / frame.len() as f64).sqrt()
}

/// Remove leading and trailing low-energy frames.
///
/// The signal is cut into `frame_ms` frames; frames whose RMS lies more
/// than `|threshold_db|` below the loudest frame's RMS are considered
/// non-speech. Only the edges are removed — the result is always a
/// contiguous slice of the input. If every frame falls below the
/// threshold (silence) the input is returned unchanged.
pub fn trim_nonspeech(wav: &Waveform, threshold_db: f64, frame_ms: f64) -> Result<Waveform> {
    if !(frame_ms > 0.0) {
        return Err(AudioError::InvalidArgument(format!(
            "frame_ms must be > 0, got {frame_ms}"
        )));
    }
    if !(threshold_db < 0.0) {
        return Err(AudioError::InvalidArgument(format!(
            "threshold_db must be < 0 (relative to peak), got {threshold_db}"
        )));
    }
    let frame_len = ((frame_ms * wav.sample_rate as f64) / 1000.0).round() as usize;
    let frame_len = frame_len.max(1);
    let rms: Vec<f64> = wav.samples.chunks(frame_len).map(frame_rms).collect();
    let peak = rms.iter().cloned().fold(0.0f64, f64::max);
    let gate = peak * 10f64.powf(threshold_db / 20.0);
    let first = rms.iter().position(|&r| r > gate);
    let last = rms.iter().rposition(|&r| r > gate);
    match (first, last) {
        (Some(f), Some(l)) => {
            let start = f * frame_len;
            let end = ((l + 1) * frame_len).min(wav.samples.len());
            Waveform::new(wav.samples[start..end].to_vec(), wav.sample_rate)
        }
        _ => Ok(wav.clone()),
    }
}

/// Change playback speed by `factor`, shifting tempo and pitch together.
///
/// The output has `round(len / factor)` samples; output sample `k` is the
/// linear interpolation of the input at position `k * factor`. The sample
/// rate is unchanged.
pub fn speed_perturb(wav: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0) {
        return Err(AudioError::InvalidArgument(format!(
            "speed factor must be > 0, got {factor}"
        )));
    }
    let n = wav.samples.len();
    let out_len = ((n as f64) / factor).round() as usize;
    let out_len = out_len.max(1);
    let mut out = Vec::with_capacity(out_len);
    for k in 0..out_len {
        let pos = k as f64 * factor;
        let i0 = pos.floor() as usize;
        if i0 + 1 >= n {
            out.push(wav.samples[n - 1]);
        } else {
            let frac = pos - i0 as f64;
            out.push(wav.samples[i0] * (1.0 - frac) + wav.samples[i0 + 1] * frac);
        }
    }
    Waveform::new(out, wav.sample_rate)
}

/// Force a waveform to exactly `round(seconds * sample_rate)` samples:
/// shorter inputs are zero-padded at the end, longer inputs are
/// center-cropped.
pub fn fixed_window(wav: &Waveform, seconds: f64) -> Result<Waveform> {
    if !(seconds > 0.0) {
        return Err(AudioError::InvalidArgument(format!(
            "window seconds must be > 0, got {seconds}"
        )));
    }
    let target = (seconds * wav.sample_rate as f64).round() as usize;
    let target = target.max(1);
    let n = wav.samples.len();
    let samples = if n == target {
        wav.samples.clone()
    } else if n < target {
        let mut s = wav.samples.clone();
        s.resize(target, 0.0);
        s
    } else {
        let start = (n - target) / 2;
        wav.samples[start..start + target].to_vec()
    };
    Waveform::new(samples, wav.sample_rate)
}
