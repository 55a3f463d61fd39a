//! Log-power spectrogram features and their on-disk format.

use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

pub const LOG_FLOOR: f64 = 1e-10;
pub const DEFAULT_FRAME_MS: f64 = 20.0;
pub const DEFAULT_HOP_MS: f64 = 10.0;
const FEATURE_MAGIC: &[u8; 4] = b"SLUF";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("utterance too short: {samples} samples, one frame needs {window}")]
    TooShort { samples: usize, window: usize },
    #[error("invalid clip: {0}")]
    InvalidClip(String),
    #[error("wav: {0}")]
    Wav(String),
    #[error("feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub id: String,
    /// `frames x bins`
    pub frames: Array2<f64>,
    pub frame_ms: f64,
    pub hop_ms: f64,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.frames.ncols()
    }
}

fn samples_for(ms: f64, sample_rate: u32) -> usize {
    (sample_rate as f64 * ms / 1000.0).round() as usize
}

/// Symmetric Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// `1 + floor((len - win) / hop)`, or `None` when the clip is shorter than a window.
pub fn frame_count(len: usize, win: usize, hop: usize) -> Option<usize> {
    len.checked_sub(win).map(|rest| 1 + rest / hop)
}

/// Squared STFT magnitudes, `frames x (win / 2 + 1)`, with a Hann window and
/// an FFT size equal to the window length.
pub fn power_spectrum(samples: &[f64], win: usize, hop: usize) -> Result<Array2<f64>, FeatureError> {
    if win == 0 || hop == 0 {
        return Err(FeatureError::InvalidClip("window and hop must be positive".into()));
    }
    let frames = frame_count(samples.len(), win, hop).ok_or(FeatureError::TooShort { samples: samples.len(), window: win })?;
    let bins = win / 2 + 1;
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut out = Array2::zeros((frames, bins));
    for (t, mut row) in out.rows_mut().into_iter().enumerate() {
        let start = t * hop;
        for (b, (&x, &w)) in buf.iter_mut().zip(samples[start..start + win].iter().zip(&window)) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, v) in row.iter_mut().enumerate() {
            *v = buf[k].norm_sqr();
        }
    }
    Ok(out)
}

/// `log(eps + |STFT|^2)` frames of a clip.
pub fn compute_spectrogram(clip: &AudioClip, frame_ms: f64, hop_ms: f64) -> Result<Spectrogram, FeatureError> {
    if clip.sample_rate == 0 {
        return Err(FeatureError::InvalidClip("sample rate must be positive".into()));
    }
    if clip.samples.iter().any(|s| !s.is_finite()) {
        return Err(FeatureError::InvalidClip("non-finite sample".into()));
    }
    let win = samples_for(frame_ms, clip.sample_rate);
    let hop = samples_for(hop_ms, clip.sample_rate);
    let frames = power_spectrum(&clip.samples, win, hop)?.mapv(|p| (LOG_FLOOR + p).ln());
    Ok(Spectrogram { id: clip.id.clone(), frames, frame_ms, hop_ms })
}

/// Per-bin mean/variance normalization over the utterance; constant bins become 0.
pub fn power_normalize(spec: &Spectrogram) -> Spectrogram {
    let mut out = spec.clone();
    normalize_columns(&mut out.frames);
    out
}

pub fn normalize_columns(m: &mut Array2<f64>) {
    if m.nrows() == 0 {
        return;
    }
    let n = m.nrows() as f64;
    for mut col in m.axis_iter_mut(Axis(1)) {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            // the rounded mean of equal values need not equal them
            col.fill(0.0);
            continue;
        }
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if var > 0.0 {
            let inv = 1.0 / var.sqrt();
            col.mapv_inplace(|v| (v - mean) * inv);
        } else {
            col.fill(0.0);
        }
    }
}

/// Reads a 16-bit PCM mono WAV file, scaling samples to [-1, 1).
pub fn read_wav(path: &Path) -> Result<AudioClip, FeatureError> {
    let reader = hound::WavReader::open(path).map_err(|e| FeatureError::Wav(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(FeatureError::Wav(format!(
            "expected 16-bit PCM mono, found {} channel(s) at {} bits",
            spec.channels, spec.bits_per_sample
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| FeatureError::Wav(e.to_string()))?;
    if samples.is_empty() {
        return Err(FeatureError::Wav("no samples".into()));
    }
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(AudioClip { id, samples, sample_rate: spec.sample_rate })
}

pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), FeatureError> {
    let spec = hound::WavSpec { channels: 1, sample_rate: clip.sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| FeatureError::Wav(e.to_string()))?;
    for &s in &clip.samples {
        let v = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        w.write_sample(v).map_err(|e| FeatureError::Wav(e.to_string()))?;
    }
    w.finalize().map_err(|e| FeatureError::Wav(e.to_string()))
}

/// Writes `frames x bins` as little-endian f32 behind a `SLUF` header.
pub fn write_features(path: &Path, m: &Array2<f64>) -> Result<(), FeatureError> {
    let mut bytes = Vec::with_capacity(12 + m.len() * 4);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for &v in m.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::File::create(&tmp)?.write_all(&bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Array2<f64>, FeatureError> {
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(FeatureError::Format(format!("{}: missing SLUF header", path.display())));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != t * f * 4 {
        return Err(FeatureError::Format(format!(
            "{}: header says {t}x{f} but payload has {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Array2::from_shape_vec((t, f), data).map_err(|e| FeatureError::Format(e.to_string()))
}
