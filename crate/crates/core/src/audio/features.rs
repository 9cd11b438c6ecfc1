//! Log-mel spectrogram extraction.
//!
//! Clips are resampled to the configured rate, center-padded or truncated to
//! a fixed duration so batches stay rectangular, and framed with a periodic
//! Hann window and centered padding (`n_fft / 2` zeros on both ends). The
//! power spectrum of each frame passes through a triangular mel filterbank
//! and is floored at `floor_epsilon` before the natural log, so no output
//! value can be `-inf` or NaN.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("feature config field {0} must be positive")]
    BadConfig(&'static str),
    #[error("clip {id:?} has {len} samples at the target rate, shorter than one {n_fft}-sample analysis window")]
    ClipTooShort {
        id: String,
        len: usize,
        n_fft: usize,
    },
    #[error("clip {0:?} contains non-finite samples")]
    NonFinite(String),
    #[error("feature cache I/O at {path}: {source}")]
    Cache {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Extraction parameters. The defaults follow common audio-classification
/// practice: 16 kHz, 25 ms windows, 10 ms hop, 64 mel bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub floor_epsilon: f64,
    /// Clips are center-padded/truncated to this duration.
    pub clip_seconds: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 400,
            hop: 160,
            n_mels: 64,
            floor_epsilon: 1e-10,
            clip_seconds: 1.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.sample_rate == 0 {
            return Err(FeatureError::BadConfig("sample_rate"));
        }
        if self.n_fft == 0 {
            return Err(FeatureError::BadConfig("n_fft"));
        }
        if self.hop == 0 {
            return Err(FeatureError::BadConfig("hop"));
        }
        if self.n_mels == 0 {
            return Err(FeatureError::BadConfig("n_mels"));
        }
        if !self.floor_epsilon.is_finite() || self.floor_epsilon <= 0.0 {
            return Err(FeatureError::BadConfig("floor_epsilon"));
        }
        if !self.clip_seconds.is_finite() || self.clip_seconds <= 0.0 {
            return Err(FeatureError::BadConfig("clip_seconds"));
        }
        Ok(())
    }

    /// Samples per clip after padding/truncation.
    pub fn target_len(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }

    /// Frames produced per clip under centered framing.
    pub fn n_frames(&self) -> usize {
        self.target_len() / self.hop + 1
    }

    /// Stable identifier of the extraction parameters (cache key component).
    pub fn config_hash(&self) -> u64 {
        let repr = format!(
            "sr={};n_fft={};hop={};n_mels={};floor={:e};secs={}",
            self.sample_rate,
            self.n_fft,
            self.hop,
            self.n_mels,
            self.floor_epsilon,
            self.clip_seconds
        );
        fnv1a(repr.as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A log-mel spectrogram: `n_mels` rows by `n_frames` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub values: Array2<f64>,
    pub config_hash: u64,
}

impl FeatureTensor {
    pub fn n_mels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_frames(&self) -> usize {
        self.values.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels x (n_fft / 2 + 1)`, peak weight 1.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let f_max = cfg.sample_rate as f64 / 2.0;
    let mel_points: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(hz_to_mel(f_max) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (lo, center, hi) = (mel_points[m], mel_points[m + 1], mel_points[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
            let w = if f <= center {
                (f - lo) / (center - lo)
            } else {
                (hi - f) / (hi - center)
            };
            if w > 0.0 {
                fb[[m, k]] = w;
            }
        }
    }
    fb
}

/// Center frequencies (Hz) of the mel bands.
pub fn mel_center_frequencies(cfg: &FeatureConfig) -> Vec<f64> {
    let f_max = cfg.sample_rate as f64 / 2.0;
    (1..=cfg.n_mels)
        .map(|i| mel_to_hz(hz_to_mel(f_max) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Reusable extractor: owns the FFT plan, window, and filterbank.
pub struct LogMelExtractor {
    cfg: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: Array2<f64>,
}

impl LogMelExtractor {
    pub fn new(cfg: FeatureConfig) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        // Periodic Hann window.
        let window: Vec<f64> = (0..cfg.n_fft)
            .map(|n| 0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / cfg.n_fft as f64).cos())
            .collect();
        let filterbank = mel_filterbank(&cfg);
        Ok(Self {
            cfg,
            fft,
            window,
            filterbank,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureTensor, FeatureError> {
        if clip.samples.iter().any(|s| !s.is_finite()) {
            return Err(FeatureError::NonFinite(clip.id.clone()));
        }
        let resampled = resample_linear(&clip.samples, clip.sample_rate, self.cfg.sample_rate);
        if resampled.len() < self.cfg.n_fft {
            return Err(FeatureError::ClipTooShort {
                id: clip.id.clone(),
                len: resampled.len(),
                n_fft: self.cfg.n_fft,
            });
        }
        let fixed = fit_center(&resampled, self.cfg.target_len());

        let n_frames = self.cfg.n_frames();
        let n_bins = self.cfg.n_fft / 2 + 1;
        let half = self.cfg.n_fft / 2;
        let mut power = Array2::zeros((n_bins, n_frames));
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for t in 0..n_frames {
            // Frame t is centered on sample t * hop of the padded signal.
            let start = t as isize * self.cfg.hop as isize - half as isize;
            for (n, slot) in buf.iter_mut().enumerate() {
                let idx = start + n as isize;
                let sample = if idx < 0 || idx as usize >= fixed.len() {
                    0.0
                } else {
                    fixed[idx as usize]
                };
                *slot = Complex::new(sample * self.window[n], 0.0);
            }
            self.fft.process(&mut buf);
            for k in 0..n_bins {
                power[[k, t]] = buf[k].norm_sqr();
            }
        }

        let mel = self.filterbank.dot(&power);
        let values = mel.mapv(|v| v.max(self.cfg.floor_epsilon).ln());
        Ok(FeatureTensor {
            values,
            config_hash: self.cfg.config_hash(),
        })
    }
}

/// One-shot extraction; builds a throwaway plan. Prefer [`LogMelExtractor`]
/// when processing many clips.
pub fn extract_logmel(
    clip: &AudioClip,
    cfg: &FeatureConfig,
) -> Result<FeatureTensor, FeatureError> {
    LogMelExtractor::new(cfg.clone())?.extract(clip)
}

fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let out_len = ((samples.len() as f64) * to as f64 / from as f64)
        .round()
        .max(1.0) as usize;
    let ratio = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            if i0 + 1 >= samples.len() {
                samples[samples.len() - 1]
            } else {
                let frac = pos - i0 as f64;
                samples[i0] * (1.0 - frac) + samples[i0 + 1] * frac
            }
        })
        .collect()
}

/// Center-pads with zeros or center-truncates to exactly `target` samples.
fn fit_center(samples: &[f64], target: usize) -> Vec<f64> {
    if samples.len() == target {
        return samples.to_vec();
    }
    if samples.len() > target {
        let start = (samples.len() - target) / 2;
        return samples[start..start + target].to_vec();
    }
    let mut out = vec![0.0; target];
    let left = (target - samples.len()) / 2;
    out[left..left + samples.len()].copy_from_slice(samples);
    out
}

/// Reads a cached feature tensor; `None` when absent or stale.
pub fn cache_read(dir: &Path, clip_id: &str, cfg: &FeatureConfig) -> Option<FeatureTensor> {
    let path = cache_path(dir, clip_id, cfg);
    let bytes = std::fs::read(&path).ok()?;
    decode_tensor(&bytes, cfg)
}

/// Writes a feature tensor to the cache directory.
pub fn cache_write(
    dir: &Path,
    clip_id: &str,
    tensor: &FeatureTensor,
    cfg: &FeatureConfig,
) -> Result<(), FeatureError> {
    std::fs::create_dir_all(dir).map_err(|source| FeatureError::Cache {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = cache_path(dir, clip_id, cfg);
    std::fs::write(&path, encode_tensor(tensor)).map_err(|source| FeatureError::Cache {
        path: path.clone(),
        source,
    })
}

fn cache_path(dir: &Path, clip_id: &str, cfg: &FeatureConfig) -> PathBuf {
    dir.join(format!(
        "{:016x}-{:016x}.melbin",
        fnv1a(clip_id.as_bytes()),
        cfg.config_hash()
    ))
}

const CACHE_MAGIC: u64 = 0x4d45_4c42_494e_0001; // "MELBIN" v1

fn encode_tensor(tensor: &FeatureTensor) -> Vec<u8> {
    let (rows, cols) = (tensor.values.nrows() as u64, tensor.values.ncols() as u64);
    let mut out = Vec::with_capacity(32 + tensor.values.len() * 8);
    out.extend_from_slice(&CACHE_MAGIC.to_le_bytes());
    out.extend_from_slice(&tensor.config_hash.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in tensor.values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_tensor(bytes: &[u8], cfg: &FeatureConfig) -> Option<FeatureTensor> {
    if bytes.len() < 32 {
        return None;
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap());
    if word(0) != CACHE_MAGIC || word(1) != cfg.config_hash() {
        return None;
    }
    let (rows, cols) = (word(2) as usize, word(3) as usize);
    if bytes.len() != 32 + rows * cols * 8 {
        return None;
    }
    let data: Vec<f64> = bytes[32..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array2::from_shape_vec((rows, cols), data).ok()?;
    Some(FeatureTensor {
        values,
        config_hash: cfg.config_hash(),
    })
}
