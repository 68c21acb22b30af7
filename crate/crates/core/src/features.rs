//! Log-mel front end and spectrogram-domain augmentation.
//!
//! Framing: a 42 ms Hann window and 23 ms hop, each rounded to whole samples,
//! with every frame zero-padded to the next power-of-two FFT length. At 48 kHz
//! that is 2016 samples padded to 2048, hop 1104, giving 433 frames per 10 s.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio_io::AudioClip;
use crate::rng::Rng;

pub const DEFAULT_N_MELS: usize = 128;
pub const DEFAULT_WIN_S: f64 = 0.042;
pub const DEFAULT_HOP_S: f64 = 0.023;
pub const LOG_EPSILON: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("clip has {samples} samples, shorter than one {win}-sample window")]
    ClipTooShort { samples: usize, win: usize },
    #[error("mel filter {index} is empty: {n_mels} mel bands are too many for a {n_fft}-point FFT")]
    EmptyFilter { index: usize, n_mels: usize, n_fft: usize },
    #[error("invalid feature configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid augmentation configuration: {0}")]
    InvalidAugment(String),
    #[error("spectrogram cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub win_s: f64,
    pub hop_s: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_mels: DEFAULT_N_MELS,
            win_s: DEFAULT_WIN_S,
            hop_s: DEFAULT_HOP_S,
        }
    }
}

/// Sample-domain framing derived from a [`FeatureConfig`] and a sample rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub win: usize,
    pub hop: usize,
    pub n_fft: usize,
}

impl Framing {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self, FeatureError> {
        let win = (cfg.win_s * sample_rate as f64).round() as usize;
        let hop = (cfg.hop_s * sample_rate as f64).round() as usize;
        if win < 2 || hop == 0 {
            return Err(FeatureError::InvalidConfig(format!(
                "window {win} / hop {hop} samples at {sample_rate} Hz"
            )));
        }
        Ok(Framing {
            win,
            hop,
            n_fft: win.next_power_of_two(),
        })
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `1 + floor((n - win) / hop)`, or 0 when `n < win`.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win {
            0
        } else {
            1 + (n_samples - self.win) / self.hop
        }
    }
}

/// Squared-magnitude STFT, `n_bins` rows by `n_frames` columns (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSpectrogram {
    pub values: Vec<f64>,
    pub n_bins: usize,
    pub n_frames: usize,
}

impl PowerSpectrogram {
    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.n_frames + frame]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    /// Natural-log power, `n_mels` rows by `n_frames` columns (row-major).
    pub values: Vec<f64>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub frame_len_s: f64,
    pub frame_hop_s: f64,
    pub floor: f64,
    pub sample_rate: u32,
    pub n_fft: usize,
}

impl LogMelSpectrogram {
    pub fn shape(&self) -> (usize, usize) {
        (self.n_mels, self.n_frames)
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn row(&self, mel: usize) -> &[f64] {
        &self.values[mel * self.n_frames..(mel + 1) * self.n_frames]
    }

    /// Center frequency of every mel band in Hz.
    pub fn band_centers_hz(&self) -> Vec<f64> {
        mel_points(self.n_mels, self.sample_rate)[1..=self.n_mels].to_vec()
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels + 2` edge/center frequencies (Hz), equally spaced in mel from 0 to Nyquist.
fn mel_points(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular mel filters. Each row is stored sparsely as a first bin plus
/// its run of weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub center_hz: Vec<f64>,
    rows: Vec<(usize, Vec<f64>)>,
}

impl MelFilterbank {
    /// Dense `n_mels × n_bins` weight matrix.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|(start, w)| {
                let mut row = vec![0.0; self.n_bins];
                row[*start..start + w.len()].copy_from_slice(w);
                row
            })
            .collect()
    }

    /// Applies the filters to a power spectrogram: `n_mels × n_frames`.
    pub fn apply(&self, power: &PowerSpectrogram) -> Vec<f64> {
        let nf = power.n_frames;
        let mut out = vec![0.0; self.n_mels * nf];
        for (m, (start, weights)) in self.rows.iter().enumerate() {
            let dst = &mut out[m * nf..(m + 1) * nf];
            for (j, &w) in weights.iter().enumerate() {
                let src = &power.values[(start + j) * nf..(start + j + 1) * nf];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

pub fn mel_filterbank(n_mels: usize, sample_rate: u32, n_fft: usize) -> Result<MelFilterbank, FeatureError> {
    if n_mels == 0 {
        return Err(FeatureError::InvalidConfig("n_mels must be at least 1".into()));
    }
    let n_bins = n_fft / 2 + 1;
    let pts = mel_points(n_mels, sample_rate);
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut rows = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (lo, c, hi) = (pts[m], pts[m + 1], pts[m + 2]);
        let mut start = None;
        let mut w = Vec::new();
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let v = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            if v > 0.0 {
                start.get_or_insert(k);
                w.push(v);
            } else if start.is_some() {
                break;
            }
        }
        match start {
            Some(s) => rows.push((s, w)),
            None => {
                return Err(FeatureError::EmptyFilter {
                    index: m,
                    n_mels,
                    n_fft,
                })
            }
        }
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        center_hz: pts[1..=n_mels].to_vec(),
        rows,
    })
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Reusable log-mel extractor for one sample rate: holds the FFT plan,
/// window and filterbank.
#[derive(Clone)]
pub struct LogMelExtractor {
    pub config: FeatureConfig,
    pub sample_rate: u32,
    pub framing: Framing,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
}

impl std::fmt::Debug for LogMelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMelExtractor")
            .field("config", &self.config)
            .field("sample_rate", &self.sample_rate)
            .field("framing", &self.framing)
            .finish()
    }
}

impl LogMelExtractor {
    pub fn new(config: &FeatureConfig, sample_rate: u32) -> Result<Self, FeatureError> {
        let framing = Framing::new(config, sample_rate)?;
        let filterbank = mel_filterbank(config.n_mels, sample_rate, framing.n_fft)?;
        let fft = FftPlanner::new().plan_fft_forward(framing.n_fft);
        Ok(LogMelExtractor {
            config: config.clone(),
            sample_rate,
            framing,
            window: hann(framing.win),
            fft,
            filterbank,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn floor(&self) -> f64 {
        LOG_EPSILON.ln()
    }

    pub fn stft_power(&self, samples: &[i16]) -> Result<PowerSpectrogram, FeatureError> {
        let Framing { win, hop, n_fft } = self.framing;
        if samples.len() < win {
            return Err(FeatureError::ClipTooShort {
                samples: samples.len(),
                win,
            });
        }
        let n_frames = self.framing.n_frames(samples.len());
        let n_bins = self.framing.n_bins();
        let mut values = vec![0.0; n_bins * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let frame = &samples[t * hop..t * hop + win];
            for (i, b) in buf.iter_mut().enumerate() {
                *b = match frame.get(i) {
                    Some(&s) => Complex::new(s as f64 / 32768.0 * self.window[i], 0.0),
                    None => Complex::new(0.0, 0.0),
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..n_bins {
                values[k * n_frames + t] = buf[k].norm_sqr();
            }
        }
        Ok(PowerSpectrogram {
            values,
            n_bins,
            n_frames,
        })
    }

    /// `ln(filterbank · power + ε)`.
    pub fn log_mel_from_power(&self, power: &PowerSpectrogram) -> LogMelSpectrogram {
        let values = self
            .filterbank
            .apply(power)
            .into_iter()
            .map(|p| (p + LOG_EPSILON).ln())
            .collect();
        LogMelSpectrogram {
            values,
            n_mels: self.config.n_mels,
            n_frames: power.n_frames,
            frame_len_s: self.config.win_s,
            frame_hop_s: self.config.hop_s,
            floor: self.floor(),
            sample_rate: self.sample_rate,
            n_fft: self.framing.n_fft,
        }
    }

    pub fn log_mel(&self, samples: &[i16]) -> Result<LogMelSpectrogram, FeatureError> {
        Ok(self.log_mel_from_power(&self.stft_power(samples)?))
    }
}

/// Power STFT of a clip with the default framing.
pub fn stft_power(clip: &AudioClip) -> Result<PowerSpectrogram, FeatureError> {
    LogMelExtractor::new(&FeatureConfig::default(), clip.sample_rate)?.stft_power(&clip.samples)
}

/// Log-mel spectrogram of a clip with the default configuration.
pub fn log_mel(clip: &AudioClip) -> Result<LogMelSpectrogram, FeatureError> {
    LogMelExtractor::new(&FeatureConfig::default(), clip.sample_rate)?.log_mel(&clip.samples)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub n_freq_masks: usize,
    pub max_freq_mask_bins: usize,
    pub n_time_masks: usize,
    pub max_time_mask_frames: usize,
    pub noise_std_frac: f64,
    pub apply_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            n_freq_masks: 2,
            max_freq_mask_bins: 16,
            n_time_masks: 2,
            max_time_mask_frames: 40,
            noise_std_frac: 0.1,
            apply_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            n_freq_masks: 0,
            max_freq_mask_bins: 0,
            n_time_masks: 0,
            max_time_mask_frames: 0,
            noise_std_frac: 0.0,
            apply_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(FeatureError::InvalidAugment(format!(
                "apply_prob {} outside [0, 1]",
                self.apply_prob
            )));
        }
        if !(self.noise_std_frac >= 0.0) {
            return Err(FeatureError::InvalidAugment(format!(
                "noise_std_frac {} is negative",
                self.noise_std_frac
            )));
        }
        Ok(())
    }
}

fn mask_bands(spec: &mut LogMelSpectrogram, cfg: &AugmentConfig, rng: &mut Rng) {
    let (n_mels, n_frames) = spec.shape();
    for _ in 0..cfg.n_freq_masks {
        let width = rng.random_range(0..=cfg.max_freq_mask_bins).min(n_mels);
        let start = rng.random_range(0..=n_mels - width);
        for m in start..start + width {
            spec.values[m * n_frames..(m + 1) * n_frames].fill(spec.floor);
        }
    }
    for _ in 0..cfg.n_time_masks {
        let width = rng.random_range(0..=cfg.max_time_mask_frames).min(n_frames);
        let start = rng.random_range(0..=n_frames - width);
        for m in 0..n_mels {
            spec.values[m * n_frames + start..m * n_frames + start + width].fill(spec.floor);
        }
    }
}

/// SpecAugment-style frequency and time masking. With probability
/// `apply_prob` the configured bands are set to the spectrogram floor.
pub fn spec_augment(spec: &LogMelSpectrogram, cfg: &AugmentConfig, rng: &mut Rng) -> LogMelSpectrogram {
    let mut out = spec.clone();
    if rng.random::<f64>() < cfg.apply_prob {
        mask_bands(&mut out, cfg, rng);
    }
    out
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Adds i.i.d. Gaussian noise scaled by the spectrogram's own spread,
/// clamped below at the floor.
pub fn add_gaussian_noise(spec: &LogMelSpectrogram, noise_std_frac: f64, rng: &mut Rng) -> LogMelSpectrogram {
    let mut out = spec.clone();
    if noise_std_frac <= 0.0 || out.values.is_empty() {
        return out;
    }
    let sigma = noise_std_frac * std_dev(&out.values);
    if !(sigma > 0.0) {
        return out;
    }
    let normal = Normal::new(0.0, sigma).expect("finite positive sigma");
    for v in out.values.iter_mut() {
        *v = (*v + normal.sample(rng)).max(out.floor);
    }
    out
}

/// Training-time augmentation: with probability `apply_prob`, masking
/// followed by noise injection.
pub fn augment(spec: &LogMelSpectrogram, cfg: &AugmentConfig, rng: &mut Rng) -> LogMelSpectrogram {
    if rng.random::<f64>() >= cfg.apply_prob {
        return spec.clone();
    }
    let mut out = spec.clone();
    mask_bands(&mut out, cfg, rng);
    add_gaussian_noise(&out, cfg.noise_std_frac, rng)
}

/// Writes the on-disk cache: `u32 n_mels, u32 n_frames` (LE) then
/// row-major little-endian `f32` values.
pub fn write_cache(path: impl AsRef<Path>, spec: &LogMelSpectrogram) -> Result<(), FeatureError> {
    let mut bytes = Vec::with_capacity(8 + 4 * spec.values.len());
    bytes.extend_from_slice(&(spec.n_mels as u32).to_le_bytes());
    bytes.extend_from_slice(&(spec.n_frames as u32).to_le_bytes());
    for &v in &spec.values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Reads a cache file. Framing metadata is not stored on disk, so it comes
/// from the extractor that produced it.
pub fn read_cache(path: impl AsRef<Path>, extractor: &LogMelExtractor) -> Result<LogMelSpectrogram, FeatureError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(FeatureError::Cache("missing 8-byte header".into()));
    }
    let n_mels = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let n_frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != 4 * n_mels * n_frames {
        return Err(FeatureError::Cache(format!(
            "header says {n_mels}x{n_frames} but body holds {} bytes",
            body.len()
        )));
    }
    if n_mels != extractor.config.n_mels {
        return Err(FeatureError::Cache(format!(
            "cache has {n_mels} mel bands, configuration expects {}",
            extractor.config.n_mels
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(LogMelSpectrogram {
        values,
        n_mels,
        n_frames,
        frame_len_s: extractor.config.win_s,
        frame_hop_s: extractor.config.hop_s,
        floor: extractor.floor(),
        sample_rate: extractor.sample_rate,
        n_fft: extractor.framing.n_fft,
    })
}
