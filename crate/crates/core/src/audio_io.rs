//! Field-recording ingest: 16-bit PCM WAV decoding, fixed-length clip
//! segmentation and the clipping-rejection rule.

use std::io::{Read, Seek};
use std::path::Path;

use crate::time::Timestamp;

pub const INT16_MAX: i16 = i16::MAX;
pub const INT16_MIN: i16 = i16::MIN;

/// Default clip length in seconds.
pub const DEFAULT_CLIP_SECONDS: f64 = 10.0;
/// Clips whose clipped fraction reaches this value are rejected.
pub const DEFAULT_MAX_CLIPPED_FRACTION: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("malformed WAV: {0}")]
    Malformed(String),
    #[error("unsupported bit depth {0}")]
    UnsupportedBitDepth(u16),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("truncated data chunk: expected {expected} samples, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid sample rate {0}")]
    InvalidSampleRate(u32),
    #[error("recording file name {0:?} does not match SITE_YYYYMMDD_HHMMSS.wav")]
    BadFileName(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
    pub site_id: String,
    pub start_time: Timestamp,
}

impl Waveform {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<i16>,
    pub sample_rate: u32,
    pub duration_s: f64,
    pub site_id: String,
    pub start_time: Timestamp,
    pub clipped_fraction: f64,
}

impl AudioClip {
    pub fn new(samples: Vec<i16>, sample_rate: u32, site_id: impl Into<String>, start_time: Timestamp) -> Self {
        let clipped_fraction = clipped_fraction_of(&samples);
        AudioClip {
            duration_s: samples.len() as f64 / sample_rate as f64,
            samples,
            sample_rate,
            site_id: site_id.into(),
            start_time,
            clipped_fraction,
        }
    }
}

fn is_clipped(s: i16) -> bool {
    s == INT16_MAX || s == INT16_MIN
}

fn clipped_fraction_of(samples: &[i16]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|&&s| is_clipped(s)).count() as f64 / samples.len() as f64
}

/// Reads a PCM-16 WAV file. Multi-channel files yield channel 0 only.
/// Site and start time are left empty; see [`read_recording`].
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let file = std::fs::File::open(path.as_ref())?;
    decode_wav(std::io::BufReader::new(file))
}

pub fn decode_wav<R: Read + Seek>(reader: R) -> Result<Waveform, AudioError> {
    let reader = hound::WavReader::new(reader).map_err(|e| match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        hound::Error::Unsupported => AudioError::UnsupportedEncoding("unsupported WAV variant".into()),
        other => AudioError::Malformed(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(AudioError::UnsupportedEncoding(format!(
            "{}-bit IEEE float",
            spec.bits_per_sample
        )));
    }
    if spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedBitDepth(spec.bits_per_sample));
    }
    if spec.sample_rate == 0 {
        return Err(AudioError::InvalidSampleRate(0));
    }
    let channels = spec.channels.max(1) as usize;
    let expected = reader.len() as usize;
    let mut samples = Vec::with_capacity(expected / channels);
    let mut found = 0usize;
    for (i, s) in reader.into_samples::<i16>().enumerate() {
        match s {
            Ok(v) => {
                if i % channels == 0 {
                    samples.push(v);
                }
                found += 1;
            }
            Err(hound::Error::IoError(ref e))
                if e.kind() == std::io::ErrorKind::UnexpectedEof || e.to_string().contains("enough bytes") =>
            {
                return Err(AudioError::Truncated { expected, found });
            }
            Err(hound::Error::IoError(e)) => return Err(AudioError::Io(e)),
            Err(e) => return Err(AudioError::Malformed(e.to_string())),
        }
    }
    if found < expected {
        return Err(AudioError::Truncated { expected, found });
    }
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
        site_id: String::new(),
        start_time: Timestamp(0),
    })
}

/// Splits `SITE_YYYYMMDD_HHMMSS.wav` into site id and start time.
/// The site id may itself contain underscores.
pub fn parse_recording_name(file_name: &str) -> Result<(String, Timestamp), AudioError> {
    let bad = || AudioError::BadFileName(file_name.to_string());
    let stem = file_name
        .strip_suffix(".wav")
        .or_else(|| file_name.strip_suffix(".WAV"))
        .ok_or_else(bad)?;
    let mut parts = stem.rsplitn(3, '_');
    let (time, date, site) = (
        parts.next().ok_or_else(bad)?,
        parts.next().ok_or_else(bad)?,
        parts.next().ok_or_else(bad)?,
    );
    if site.is_empty() {
        return Err(bad());
    }
    let start = Timestamp::from_compact(&format!("{date}_{time}")).map_err(|_| bad())?;
    Ok((site.to_string(), start))
}

/// Reads a recording whose metadata follows the file-name convention.
pub fn read_recording(path: impl AsRef<Path>) -> Result<Waveform, AudioError> {
    let path = path.as_ref();
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| AudioError::BadFileName(path.display().to_string()))?;
    let (site_id, start_time) = parse_recording_name(name)?;
    let mut w = read_wav(path)?;
    w.site_id = site_id;
    w.start_time = start_time;
    Ok(w)
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[i16], sample_rate: u32) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec).map_err(|e| match e {
        hound::Error::IoError(io) => AudioError::Io(io),
        other => AudioError::Malformed(other.to_string()),
    })?;
    let mut sw = w.get_i16_writer(samples.len() as u32);
    for &s in samples {
        sw.write_sample(s);
    }
    sw.flush().map_err(|e| AudioError::Malformed(e.to_string()))?;
    w.finalize().map_err(|e| AudioError::Malformed(e.to_string()))?;
    Ok(())
}

/// Number of samples in one clip of `clip_len_s` seconds at `sample_rate`.
pub fn clip_samples(clip_len_s: f64, sample_rate: u32) -> usize {
    (clip_len_s * sample_rate as f64).round() as usize
}

/// Tiles the waveform into non-overlapping clips from its start; a trailing
/// remainder shorter than one clip is dropped.
pub fn segment(waveform: &Waveform, clip_len_s: f64) -> Vec<AudioClip> {
    assert!(clip_len_s > 0.0, "clip length must be positive");
    let n = clip_samples(clip_len_s, waveform.sample_rate);
    if n == 0 {
        return Vec::new();
    }
    waveform
        .samples
        .chunks_exact(n)
        .enumerate()
        .map(|(i, chunk)| {
            let offset = (i as f64 * clip_len_s).floor() as i64;
            AudioClip::new(
                chunk.to_vec(),
                waveform.sample_rate,
                waveform.site_id.clone(),
                waveform.start_time.offset(offset),
            )
        })
        .collect()
}

/// Fraction of samples sitting at either 16-bit extreme.
pub fn clipping_fraction(clip: &AudioClip) -> f64 {
    clipped_fraction_of(&clip.samples)
}

/// Keeps clips whose clipped fraction is strictly below `max_fraction`.
pub fn filter_clipped(clips: Vec<AudioClip>, max_fraction: f64) -> Vec<AudioClip> {
    clips
        .into_iter()
        .filter(|c| c.clipped_fraction < max_fraction)
        .collect()
}
