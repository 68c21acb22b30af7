//! Synthetic corpora with known clip-level truth and degraded hourly
//! "satellite" labels.
//!
//! Each site gets a minute-resolution rain timeline (alternating dry and wet
//! spells), an hourly autoregressive wind speed with per-clip gusts, and a
//! diurnal temperature/humidity cycle. Clips are rendered from the truth at
//! their start time; the weak grid is derived hour by hour through
//! [`WeakLabelModel`].

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::attenuation::{amplitude_gain, AtmosphereState};
use crate::audio_io::{clip_samples, write_wav, AudioClip, AudioError};
use crate::datasets::{write_manifest, DatasetError, ManifestEntry, StrongLabels};
use crate::exec::Exec;
use crate::rng::{derive_seed, rng_from, Rng};
use crate::time::Timestamp;
use crate::weather::{WeatherError, WeatherGrid, HOUR_S};

const STREAM_SITE: u64 = 0x5349;
const STREAM_CLIP: u64 = 0x434c;
const STREAM_WEAK: u64 = 0x574b;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Weather(#[from] WeatherError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Spectral recipe for one clip. Amplitudes are relative to 16-bit full scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcousticConfig {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    /// Rain RMS per sqrt(mm/hr).
    pub rain_rms_per_sqrt_mmhr: f64,
    pub rain_corner_hz: f64,
    /// Wind RMS per (m/s)^1.5.
    pub wind_rms_coeff: f64,
    pub wind_corner_hz: f64,
    pub noise_floor_rms: f64,
    /// `(frequency Hz, amplitude)` pairs.
    pub background_tones: Vec<(f64, f64)>,
    pub distance_km: f64,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        AcousticConfig {
            sample_rate: 48_000,
            clip_seconds: 10.0,
            rain_rms_per_sqrt_mmhr: 0.05,
            rain_corner_hz: 1000.0,
            wind_rms_coeff: 0.004,
            wind_corner_hz: 500.0,
            noise_floor_rms: 0.002,
            background_tones: vec![(250.0, 0.004), (1250.0, 0.002), (2700.0, 0.0015)],
            distance_km: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RainProcess {
    pub dry_mean_min: f64,
    pub wet_mean_min: f64,
    /// Median wet-spell rate, mm/hr; spell rates are log-normal.
    pub rate_median_mmhr: f64,
    pub rate_log_sigma: f64,
    pub rate_min_mmhr: f64,
    pub rate_max_mmhr: f64,
    /// Per-site dry-spell mean is scaled by a factor in `[1 - v, 1 + v]`.
    pub site_variability: f64,
}

impl Default for RainProcess {
    fn default() -> Self {
        RainProcess {
            dry_mean_min: 240.0,
            wet_mean_min: 90.0,
            rate_median_mmhr: 0.8,
            rate_log_sigma: 1.0,
            rate_min_mmhr: 0.15,
            rate_max_mmhr: 8.0,
            site_variability: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindProcess {
    pub mean_ms: f64,
    pub ar_coef: f64,
    pub innovation_sd: f64,
    pub gust_log_sigma: f64,
    /// Clip truth `wind = speed > event_threshold_ms`.
    pub event_threshold_ms: f64,
}

impl Default for WindProcess {
    fn default() -> Self {
        WindProcess {
            mean_ms: 3.0,
            ar_coef: 0.9,
            innovation_sd: 0.8,
            gust_log_sigma: 0.3,
            event_threshold_ms: 2.471,
        }
    }
}

/// How hourly grid values are degraded from the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakLabelModel {
    /// When false, rain spells are whole hours so the hourly mean equals the
    /// truth of every clip in the hour.
    pub smear: bool,
    pub sigma_rel: f64,
    /// Probability that a dry hour reports light rain in `(0.01, 0.1]` mm/hr.
    pub false_positive_rate: f64,
    pub temp_noise_c: f64,
    pub rh_noise_pct: f64,
}

impl Default for WeakLabelModel {
    fn default() -> Self {
        WeakLabelModel {
            smear: true,
            sigma_rel: 0.3,
            false_positive_rate: 0.15,
            temp_noise_c: 0.5,
            rh_noise_pct: 2.0,
        }
    }
}

impl WeakLabelModel {
    /// Error-free grid.
    pub fn exact() -> Self {
        WeakLabelModel {
            smear: false,
            sigma_rel: 0.0,
            false_positive_rate: 0.0,
            temp_noise_c: 0.0,
            rh_noise_pct: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_sites: usize,
    pub hours: usize,
    pub clips_per_hour: usize,
    pub start: Timestamp,
    pub lat0: f64,
    pub lon0: f64,
    /// Latitude spacing between sites; each site has its own grid row.
    pub site_spacing_deg: f64,
    pub acoustic: AcousticConfig,
    pub rain: RainProcess,
    pub wind: WindProcess,
    pub weak: WeakLabelModel,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            n_sites: 8,
            hours: 48,
            clips_per_hour: 4,
            start: Timestamp(1_559_347_200),
            lat0: 64.0,
            lon0: -150.0,
            site_spacing_deg: 0.5,
            acoustic: AcousticConfig::default(),
            rain: RainProcess::default(),
            wind: WindProcess::default(),
            weak: WeakLabelModel::default(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Invalid(m.to_string()));
        if self.n_sites == 0 || self.hours == 0 || self.clips_per_hour == 0 {
            return bad("n_sites, hours and clips_per_hour must be at least 1");
        }
        let a = &self.acoustic;
        if a.sample_rate == 0 || !(a.clip_seconds > 0.0) {
            return bad("sample rate and clip length must be positive");
        }
        if (HOUR_S as usize / self.clips_per_hour) < a.clip_seconds.ceil() as usize {
            return bad("clips_per_hour leaves no room for non-overlapping clips");
        }
        if self.start.0 % HOUR_S != 0 {
            return bad("start must be on an hour boundary");
        }
        let r = &self.rain;
        if !(r.dry_mean_min > 0.0 && r.wet_mean_min > 0.0) {
            return bad("spell means must be positive");
        }
        if !(r.rate_min_mmhr >= 0.0 && r.rate_max_mmhr >= r.rate_min_mmhr && r.rate_median_mmhr > 0.0) {
            return bad("rain rates must be non-negative with min <= max");
        }
        if !(0.0..1.0).contains(&r.site_variability) || r.rate_log_sigma < 0.0 {
            return bad("site_variability must be in [0, 1) and rate_log_sigma >= 0");
        }
        let w = &self.wind;
        if !(w.mean_ms >= 0.0 && w.innovation_sd >= 0.0 && w.gust_log_sigma >= 0.0) || !(0.0..1.0).contains(&w.ar_coef) {
            return bad("wind process parameters out of range");
        }
        let e = &self.weak;
        if !(e.sigma_rel >= 0.0 && e.temp_noise_c >= 0.0 && e.rh_noise_pct >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..=1.0).contains(&e.false_positive_rate) {
            return bad("false_positive_rate must be in [0, 1]");
        }
        let rates = [a.rain_rms_per_sqrt_mmhr, a.wind_rms_coeff, a.noise_floor_rms, a.distance_km];
        if rates.iter().any(|&v| !(v >= 0.0)) || a.background_tones.iter().any(|&(_, amp)| !(amp >= 0.0)) {
            return bad("acoustic levels must be non-negative");
        }
        Ok(())
    }

    pub fn site_id(&self, site: usize) -> String {
        format!("S{:02}", site + 1)
    }

    pub fn site_lat(&self, site: usize) -> f64 {
        self.lat0 + site as f64 * self.site_spacing_deg
    }

    pub fn clip_offset_s(&self, k: usize) -> i64 {
        (k * HOUR_S as usize / self.clips_per_hour) as i64
    }
}

/// Clip-level ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipTruth {
    pub rain_mmhr: f64,
    pub wind_ms: f64,
    pub temp_c: f64,
    pub rh_pct: f64,
    pub rain: bool,
    pub wind: bool,
}

impl ClipTruth {
    pub fn strong_labels(&self) -> StrongLabels {
        StrongLabels {
            rain: Some(self.rain),
            wind: Some(self.wind),
        }
    }
}

/// Everything needed to render one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPlan {
    pub clip_id: String,
    pub site_id: String,
    pub start_time: Timestamp,
    pub lat: f64,
    pub lon: f64,
    pub truth: ClipTruth,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: ScenarioConfig,
    pub plans: Vec<ClipPlan>,
    pub weak_grid: WeatherGrid,
    /// Hourly mean truth rain per site, `[site][hour]`.
    pub hourly_rain: Vec<Vec<f64>>,
}

fn hp_gain(f: f64, fc: f64) -> f64 {
    let r = (f / fc).powi(2);
    r / (1.0 + r * r).sqrt()
}

fn lp_gain(f: f64, fc: f64) -> f64 {
    1.0 / (1.0 + (f / fc).powi(4)).sqrt()
}

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn white(n: usize, rng: &mut Rng) -> Vec<Complex<f64>> {
    (0..n)
        .map(|_| Complex::new(StandardNormal.sample(rng), 0.0))
        .collect()
}

/// Renders one clip: high-passed rain noise with RMS ∝ sqrt(rain), low-passed
/// wind noise with RMS ∝ wind^1.5, a white noise floor and fixed tones, all
/// absorbed over the configured distance and quantized to 16 bits. The
/// random draws do not depend on the rates, so a fixed seed gives the same
/// noise realizations at every rate.
pub fn synth_clip(rain_mmhr: f64, wind_ms: f64, temp_c: f64, rh_pct: f64, cfg: &AcousticConfig, rng: &mut Rng) -> Result<AudioClip, SynthError> {
    if !(rain_mmhr >= 0.0 && wind_ms >= 0.0) {
        return Err(SynthError::Invalid(format!(
            "rates must be non-negative (rain {rain_mmhr}, wind {wind_ms})"
        )));
    }
    let atm = AtmosphereState::new(temp_c, rh_pct.clamp(0.0, 100.0)).map_err(|e| SynthError::Invalid(e.to_string()))?;
    let n = clip_samples(cfg.clip_seconds, cfg.sample_rate);
    if n == 0 {
        return Err(SynthError::Invalid("clip has no samples".into()));
    }
    let sr = cfg.sample_rate as f64;
    let mut rain = white(n, rng);
    let mut wind = white(n, rng);
    let mut floor = white(n, rng);
    let phases: Vec<f64> = cfg
        .background_tones
        .iter()
        .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
        .collect();

    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    fwd.process(&mut rain);
    fwd.process(&mut wind);
    fwd.process(&mut floor);

    let freq = |k: usize| k.min(n - k) as f64 * sr / n as f64;
    let mean_sq = |h: &dyn Fn(f64) -> f64| (0..n).map(|k| h(freq(k)).powi(2)).sum::<f64>() / n as f64;
    let rain_shape = |f: f64| hp_gain(f, cfg.rain_corner_hz);
    let wind_shape = |f: f64| lp_gain(f, cfg.wind_corner_hz);
    let rain_scale = cfg.rain_rms_per_sqrt_mmhr * rain_mmhr.sqrt() / mean_sq(&rain_shape).sqrt();
    let wind_scale = cfg.wind_rms_coeff * wind_ms.powf(1.5) / mean_sq(&wind_shape).sqrt();

    let mut spec: Vec<Complex<f64>> = (0..n)
        .map(|k| {
            let f = freq(k);
            let g = amplitude_gain(f, &atm, cfg.distance_km);
            (rain[k] * (rain_scale * rain_shape(f)) + wind[k] * (wind_scale * wind_shape(f)) + floor[k] * cfg.noise_floor_rms) * g
        })
        .collect();
    planner.plan_fft_inverse(n).process(&mut spec);
    let mut x: Vec<f64> = spec.iter().map(|c| c.re / n as f64).collect();
    for (&(f, amp), &ph) in cfg.background_tones.iter().zip(&phases) {
        let a = amp * amplitude_gain(f, &atm, cfg.distance_km);
        let w = std::f64::consts::TAU * f / sr;
        for (i, v) in x.iter_mut().enumerate() {
            *v += a * (w * i as f64 + ph).sin();
        }
    }

    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let limit = (i16::MAX - 1) as f64;
    let scale = if peak * i16::MAX as f64 > limit {
        limit / peak
    } else {
        i16::MAX as f64
    };
    let samples = x
        .iter()
        .map(|v| (v * scale).round().clamp(-limit, limit) as i16)
        .collect();
    Ok(AudioClip::new(samples, cfg.sample_rate, "", Timestamp(0)))
}

/// Minute-resolution rain rates for one site.
fn rain_timeline(cfg: &ScenarioConfig, rng: &mut Rng) -> Vec<f64> {
    let r = &cfg.rain;
    let minutes = cfg.hours * 60;
    let v = r.site_variability;
    let factor = 1.0 - v + 2.0 * v * rng.random::<f64>();
    let dry = Exp::new(1.0 / (r.dry_mean_min * factor)).expect("positive mean");
    let wet = Exp::new(1.0 / r.wet_mean_min).expect("positive mean");
    let rate = Normal::new(r.rate_median_mmhr.ln(), r.rate_log_sigma).expect("finite sigma");
    let p_wet = r.wet_mean_min / (r.wet_mean_min + r.dry_mean_min * factor);
    let mut is_wet = rng.random::<f64>() < p_wet;
    let mut out = Vec::with_capacity(minutes);
    while out.len() < minutes {
        let draw: f64 = if is_wet { wet.sample(rng) } else { dry.sample(rng) };
        let value = rate.sample(rng).exp().clamp(r.rate_min_mmhr, r.rate_max_mmhr);
        let mut len = draw.ceil().max(1.0) as usize;
        if !cfg.weak.smear {
            len = len.div_ceil(60) * 60;
        }
        let v = if is_wet { value } else { 0.0 };
        out.extend(std::iter::repeat_n(v, len.min(minutes - out.len())));
        is_wet = !is_wet;
    }
    out
}

/// Mean of one hour's minute rates; exact when the hour is uniform.
pub fn hour_mean(minute_rates: &[f64]) -> f64 {
    match minute_rates.first() {
        Some(&r) if minute_rates.iter().all(|&v| v == r) => r,
        _ => minute_rates.iter().sum::<f64>() / minute_rates.len() as f64,
    }
}

/// Hourly weak rain from the minute rates of that hour: mean × (1 + N(0, σ))
/// floored at 0, or spurious light rain for a dry hour.
pub fn weak_rain(minute_rates: &[f64], model: &WeakLabelModel, rng: &mut Rng) -> f64 {
    let noise: f64 = StandardNormal.sample(rng);
    let fp = rng.random::<f64>() < model.false_positive_rate;
    let fp_value = 0.1 - 0.09 * rng.random::<f64>();
    let mean = hour_mean(minute_rates);
    if mean > 0.0 {
        (mean * (1.0 + model.sigma_rel * noise)).max(0.0)
    } else if fp {
        fp_value
    } else {
        0.0
    }
}

struct SiteTruth {
    minutes: Vec<f64>,
    wind: Vec<f64>,
    temp: Vec<f64>,
    rh: Vec<f64>,
}

fn site_truth(cfg: &ScenarioConfig, site: usize) -> SiteTruth {
    let mut rng = rng_from(cfg.seed, &[STREAM_SITE, site as u64]);
    let minutes = rain_timeline(cfg, &mut rng);
    let w = &cfg.wind;
    let stationary = w.innovation_sd / (1.0 - w.ar_coef * w.ar_coef).sqrt();
    let mut level = w.mean_ms + stationary * gauss(&mut rng);
    let t0 = 8.0 + 4.0 * (2.0 * rng.random::<f64>() - 1.0);
    let (mut wind, mut temp, mut rh) = (Vec::new(), Vec::new(), Vec::new());
    for h in 0..cfg.hours {
        if h > 0 {
            level = w.mean_ms + w.ar_coef * (level - w.mean_ms) + w.innovation_sd * gauss(&mut rng);
        }
        wind.push(level.max(0.0));
        let hour_of_day = ((cfg.start.0 / HOUR_S) as usize + h) % 24;
        let t = t0 + 5.0 * (std::f64::consts::TAU * (hour_of_day as f64 - 9.0) / 24.0).sin() + 0.5 * gauss(&mut rng);
        let raining = minutes[h * 60..(h + 1) * 60].iter().any(|&r| r > 0.0);
        let humid = 75.0 - 2.5 * (t - t0) + if raining { 15.0 } else { 0.0 } + 3.0 * gauss(&mut rng);
        temp.push(t);
        rh.push(humid.clamp(20.0, 100.0));
    }
    SiteTruth { minutes, wind, temp, rh }
}

/// Builds the clip plans and the weak grid. Audio is rendered on demand by
/// [`SynthCorpus::render`].
pub fn synth_corpus(cfg: &ScenarioConfig) -> Result<SynthCorpus, SynthError> {
    cfg.validate()?;
    let truths: Vec<SiteTruth> = (0..cfg.n_sites).map(|s| site_truth(cfg, s)).collect();
    let (nt, nlat) = (cfg.hours, cfg.n_sites);
    let mut rain = vec![0.0; nt * nlat];
    let mut wind = vec![0.0; nt * nlat];
    let mut temp = vec![0.0; nt * nlat];
    let mut rh = vec![0.0; nt * nlat];
    let mut hourly_rain = vec![vec![0.0; nt]; nlat];
    let mut plans = Vec::with_capacity(cfg.n_sites * cfg.hours * cfg.clips_per_hour);
    for (s, tr) in truths.iter().enumerate() {
        let mut rng = rng_from(cfg.seed, &[STREAM_WEAK, s as u64]);
        for h in 0..nt {
            let hour = &tr.minutes[h * 60..(h + 1) * 60];
            hourly_rain[s][h] = hour_mean(hour);
            let i = h * nlat + s;
            rain[i] = weak_rain(hour, &cfg.weak, &mut rng);
            let n1: f64 = StandardNormal.sample(&mut rng);
            let n2: f64 = StandardNormal.sample(&mut rng);
            let n3: f64 = StandardNormal.sample(&mut rng);
            wind[i] = (tr.wind[h] * (1.0 + cfg.weak.sigma_rel * n1)).max(0.0);
            temp[i] = tr.temp[h] + cfg.weak.temp_noise_c * n2;
            rh[i] = (tr.rh[h] + cfg.weak.rh_noise_pct * n3).clamp(0.0, 100.0);
        }
        let mut gust_rng = rng_from(cfg.seed, &[STREAM_CLIP, s as u64]);
        let site_id = cfg.site_id(s);
        for h in 0..nt {
            for k in 0..cfg.clips_per_hour {
                let off = h as i64 * HOUR_S + cfg.clip_offset_s(k);
                let start_time = cfg.start.offset(off);
                let g = cfg.wind.gust_log_sigma;
                let gust = (g * gauss(&mut gust_rng) - 0.5 * g * g).exp();
                let rain_mmhr = tr.minutes[(off / 60) as usize];
                let wind_ms = tr.wind[h] * gust;
                plans.push(ClipPlan {
                    clip_id: format!("{site_id}_{}", start_time.to_compact()),
                    site_id: site_id.clone(),
                    start_time,
                    lat: cfg.site_lat(s),
                    lon: cfg.lon0,
                    truth: ClipTruth {
                        rain_mmhr,
                        wind_ms,
                        temp_c: tr.temp[h],
                        rh_pct: tr.rh[h],
                        rain: rain_mmhr > 0.0,
                        wind: wind_ms > cfg.wind.event_threshold_ms,
                    },
                    seed: derive_seed(cfg.seed, &[STREAM_CLIP, s as u64, (h * cfg.clips_per_hour + k) as u64]),
                });
            }
        }
    }
    let weak_grid = WeatherGrid::new(
        (0..nlat).map(|s| cfg.site_lat(s)).collect(),
        vec![cfg.lon0],
        (0..nt).map(|h| cfg.start.offset(h as i64 * HOUR_S)).collect(),
        rain,
        wind,
        temp,
        rh,
    )?;
    Ok(SynthCorpus {
        config: cfg.clone(),
        plans,
        weak_grid,
        hourly_rain,
    })
}

impl SynthCorpus {
    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    pub fn render(&self, plan: &ClipPlan) -> Result<AudioClip, SynthError> {
        let t = &plan.truth;
        let mut rng = rng_from(plan.seed, &[]);
        let mut clip = synth_clip(t.rain_mmhr, t.wind_ms, t.temp_c, t.rh_pct, &self.config.acoustic, &mut rng)?;
        clip.site_id = plan.site_id.clone();
        clip.start_time = plan.start_time;
        Ok(clip)
    }

    /// Every clip, in plan order.
    pub fn clips(&self, exec: Exec) -> Result<Vec<AudioClip>, SynthError> {
        exec.try_map(&self.plans, |p| self.render(p))
    }

    /// Writes `audio/SITE_YYYYMMDD_HHMMSS.wav` per clip plus `grid.csv`,
    /// `manifest.csv` (with truth as strong labels), `sites.csv` and
    /// `truth.csv`.
    pub fn write(&self, dir: impl AsRef<Path>, exec: Exec) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        let audio = dir.join("audio");
        std::fs::create_dir_all(&audio)?;
        let comment = format!("seed={}", self.config.seed);
        exec.try_map(&self.plans, |p| -> Result<(), SynthError> {
            let clip = self.render(p)?;
            write_wav(audio.join(format!("{}.wav", p.clip_id)), &clip.samples, clip.sample_rate)?;
            Ok(())
        })?;
        self.weak_grid.write(dir.join("grid.csv"), Some(&comment))?;
        let entries: Vec<ManifestEntry> = self
            .plans
            .iter()
            .map(|p| ManifestEntry {
                clip_id: p.clip_id.clone(),
                site_id: p.site_id.clone(),
                start_time: p.start_time,
                wav_path: format!("audio/{}.wav", p.clip_id),
                lat: p.lat,
                lon: p.lon,
                strong: p.truth.strong_labels(),
            })
            .collect();
        write_manifest(dir.join("manifest.csv"), &entries, Some(&comment))?;

        let mut sites = format!("# {comment}\nsite_id,lat,lon\n");
        for s in 0..self.config.n_sites {
            sites.push_str(&format!("{},{},{}\n", self.config.site_id(s), self.config.site_lat(s), self.config.lon0));
        }
        std::fs::write(dir.join("sites.csv"), sites)?;

        let mut truth = format!("# {comment}\nclip_id,rain_mmhr,wind_ms,temp_c,rh_pct,rain,wind\n");
        for p in &self.plans {
            let t = &p.truth;
            truth.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                p.clip_id, t.rain_mmhr, t.wind_ms, t.temp_c, t.rh_pct, t.rain as u8, t.wind as u8
            ));
        }
        std::fs::write(dir.join("truth.csv"), truth)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureConfig, LogMelExtractor};

    fn acoustic() -> AcousticConfig {
        AcousticConfig {
            sample_rate: 8000,
            clip_seconds: 2.0,
            ..Default::default()
        }
    }

    fn high_band_power(clip: &AudioClip) -> f64 {
        let ex = LogMelExtractor::new(
            &FeatureConfig {
                n_mels: 32,
                ..Default::default()
            },
            clip.sample_rate,
        )
        .unwrap();
        let spec = ex.log_mel(&clip.samples).unwrap();
        let centers = spec.band_centers_hz();
        let rows: Vec<usize> = (0..spec.n_mels).filter(|&m| centers[m] > 1000.0).collect();
        let total: f64 = rows.iter().map(|&m| spec.row(m).iter().sum::<f64>()).sum();
        total / (rows.len() * spec.n_frames) as f64
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_clip(1.0, 3.0, 10.0, 80.0, &acoustic(), &mut rng_from(5, &[])).unwrap();
        let b = synth_clip(1.0, 3.0, 10.0, 80.0, &acoustic(), &mut rng_from(5, &[])).unwrap();
        let c = synth_clip(1.0, 3.0, 10.0, 80.0, &acoustic(), &mut rng_from(6, &[])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples, c.samples);
        assert_eq!(a.clipped_fraction, 0.0);
    }

    #[test]
    fn rain_raises_high_band() {
        let heavy = synth_clip(2.0, 1.0, 10.0, 80.0, &acoustic(), &mut rng_from(1, &[])).unwrap();
        let light = synth_clip(0.1, 1.0, 10.0, 80.0, &acoustic(), &mut rng_from(1, &[])).unwrap();
        assert!(high_band_power(&heavy) > high_band_power(&light));
    }

    #[test]
    fn silent_weather_matches_background_reference() {
        let quiet = synth_clip(0.0, 0.0, 10.0, 80.0, &acoustic(), &mut rng_from(1, &[])).unwrap();
        let reference = synth_clip(0.0, 0.0, 10.0, 80.0, &acoustic(), &mut rng_from(99, &[])).unwrap();
        let db = 10.0 / std::f64::consts::LN_10 * (high_band_power(&quiet) - high_band_power(&reference));
        assert!(db.abs() < 1.0, "{db} dB");
    }

    #[test]
    fn loud_clip_is_scaled_not_clipped() {
        let c = synth_clip(8.0, 25.0, 10.0, 80.0, &acoustic(), &mut rng_from(1, &[])).unwrap();
        assert_eq!(c.clipped_fraction, 0.0);
        assert_eq!(c.samples.iter().map(|s| s.unsigned_abs()).max(), Some(32766));
    }

    #[test]
    fn negative_rate_is_rejected() {
        assert!(synth_clip(-0.1, 0.0, 10.0, 80.0, &acoustic(), &mut rng_from(1, &[])).is_err());
    }

    #[test]
    fn half_hour_of_rain_averages() {
        let mut minutes = vec![0.0; 60];
        minutes[..30].fill(1.0);
        let exact = WeakLabelModel::exact();
        assert_eq!(weak_rain(&minutes, &exact, &mut rng_from(0, &[])), 0.5);
        assert_eq!(weak_rain(&[0.0; 60], &exact, &mut rng_from(0, &[])), 0.0);
        let fp = WeakLabelModel {
            false_positive_rate: 1.0,
            ..WeakLabelModel::exact()
        };
        for s in 0..50 {
            let v = weak_rain(&[0.0; 60], &fp, &mut rng_from(s, &[]));
            assert!(v > 0.01 && v <= 0.1);
        }
    }

    fn small(weak: WeakLabelModel) -> ScenarioConfig {
        ScenarioConfig {
            n_sites: 3,
            hours: 24,
            clips_per_hour: 3,
            acoustic: acoustic(),
            weak,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn exact_model_labels_equal_truth() {
        let c = synth_corpus(&small(WeakLabelModel::exact())).unwrap();
        assert_eq!(c.len(), 3 * 24 * 3);
        for p in &c.plans {
            let w = c.weak_grid.lookup(p.lat, p.lon, p.start_time).unwrap();
            assert_eq!(w.rainfall, p.truth.rain_mmhr);
            let h = ((p.start_time.0 - c.config.start.0) / HOUR_S) as usize;
            let s: usize = p.site_id[1..].parse::<usize>().unwrap() - 1;
            assert_eq!(c.hourly_rain[s][h], w.rainfall);
        }
        assert!(c.plans.iter().any(|p| p.truth.rain) && c.plans.iter().any(|p| !p.truth.rain));
    }

    #[test]
    fn smearing_creates_disagreement() {
        let cfg = ScenarioConfig {
            hours: 96,
            ..small(WeakLabelModel {
                smear: true,
                ..WeakLabelModel::exact()
            })
        };
        let c = synth_corpus(&cfg).unwrap();
        let disagree = c
            .plans
            .iter()
            .filter(|p| (c.weak_grid.lookup(p.lat, p.lon, p.start_time).unwrap().rainfall > 0.0) != p.truth.rain)
            .count();
        assert!(disagree > 0);
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = synth_corpus(&small(WeakLabelModel::default())).unwrap();
        let b = synth_corpus(&small(WeakLabelModel::default())).unwrap();
        assert_eq!(a.plans, b.plans);
        assert_eq!(a.weak_grid, b.weak_grid);
        assert_eq!(a.render(&a.plans[7]).unwrap(), b.render(&b.plans[7]).unwrap());
    }

    #[test]
    fn validation() {
        let mut c = small(WeakLabelModel::default());
        c.n_sites = 0;
        assert!(c.validate().is_err());
        c = small(WeakLabelModel::default());
        c.clips_per_hour = 2000;
        assert!(c.validate().is_err());
        c = small(WeakLabelModel::default());
        c.weak.sigma_rel = -1.0;
        assert!(c.validate().is_err());
    }
}
