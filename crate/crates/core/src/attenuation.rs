//! Atmospheric absorption of sound (ISO 9613-1 pure-tone model).
//!
//! Classical absorption plus the vibrational relaxation of oxygen and
//! nitrogen. Humidity enters through the molar concentration of water vapour,
//! which shifts both relaxation frequencies.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::features::LogMelSpectrogram;

pub const REFERENCE_PRESSURE_KPA: f64 = 101.325;
const REFERENCE_TEMP_K: f64 = 293.15;
const TRIPLE_POINT_K: f64 = 273.16;
const ZERO_CELSIUS_K: f64 = 273.15;

#[derive(Debug, thiserror::Error)]
pub enum AtmosphereError {
    #[error("relative humidity {0} outside [0, 100]")]
    Humidity(f64),
    #[error("pressure {0} kPa must be positive")]
    Pressure(f64),
    #[error("temperature {0} °C is below absolute zero")]
    Temperature(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AtmosphereState {
    pub temperature: f64,
    pub rel_humidity: f64,
    pub pressure: f64,
}

impl AtmosphereState {
    pub fn new(temperature: f64, rel_humidity: f64) -> Result<Self, AtmosphereError> {
        Self::with_pressure(temperature, rel_humidity, REFERENCE_PRESSURE_KPA)
    }

    pub fn with_pressure(temperature: f64, rel_humidity: f64, pressure: f64) -> Result<Self, AtmosphereError> {
        if !(0.0..=100.0).contains(&rel_humidity) {
            return Err(AtmosphereError::Humidity(rel_humidity));
        }
        if !(pressure > 0.0) {
            return Err(AtmosphereError::Pressure(pressure));
        }
        if !(temperature > -ZERO_CELSIUS_K) {
            return Err(AtmosphereError::Temperature(temperature));
        }
        Ok(AtmosphereState {
            temperature,
            rel_humidity,
            pressure,
        })
    }

    /// Molar concentration of water vapour, in percent.
    pub fn water_vapour_molar_pct(&self) -> f64 {
        let t = self.temperature + ZERO_CELSIUS_K;
        let c = -6.8346 * (TRIPLE_POINT_K / t).powf(1.261) + 4.6151;
        let psat_ratio = 10f64.powf(c);
        self.rel_humidity * psat_ratio / (self.pressure / REFERENCE_PRESSURE_KPA)
    }

    /// Oxygen and nitrogen relaxation frequencies in Hz.
    pub fn relaxation_frequencies(&self) -> (f64, f64) {
        let t = self.temperature + ZERO_CELSIUS_K;
        let pa = self.pressure / REFERENCE_PRESSURE_KPA;
        let h = self.water_vapour_molar_pct();
        let fr_o = pa * (24.0 + 4.04e4 * h * (0.02 + h) / (0.391 + h));
        let fr_n = pa
            * (t / REFERENCE_TEMP_K).powf(-0.5)
            * (9.0 + 280.0 * h * (-4.170 * ((t / REFERENCE_TEMP_K).powf(-1.0 / 3.0) - 1.0)).exp());
        (fr_o, fr_n)
    }
}

/// Absorption coefficient in dB/km at frequency `freq` (Hz).
pub fn absorption_db_per_km(freq: f64, atm: &AtmosphereState) -> f64 {
    let t = atm.temperature + ZERO_CELSIUS_K;
    let tr = t / REFERENCE_TEMP_K;
    let pa = atm.pressure / REFERENCE_PRESSURE_KPA;
    let (fr_o, fr_n) = atm.relaxation_frequencies();
    let f2 = freq * freq;
    let classical = 1.84e-11 / pa * tr.sqrt();
    let oxygen = 0.01275 * (-2239.1 / t).exp() / (fr_o + f2 / fr_o);
    let nitrogen = 0.1068 * (-3352.0 / t).exp() / (fr_n + f2 / fr_n);
    let db_per_m = 8.686 * f2 * (classical + tr.powf(-2.5) * (oxygen + nitrogen));
    1000.0 * db_per_m
}

/// Lowers each mel band's log power by the absorption at its center
/// frequency over `distance_km`, never below the spectrogram floor.
pub fn attenuation_filter(spec: &LogMelSpectrogram, atm: &AtmosphereState, distance_km: f64) -> LogMelSpectrogram {
    assert!(distance_km >= 0.0, "distance must be non-negative");
    let mut out = spec.clone();
    let nf = out.n_frames;
    for (m, f) in spec.band_centers_hz().into_iter().enumerate() {
        let drop = absorption_db_per_km(f, atm) * distance_km * std::f64::consts::LN_10 / 10.0;
        for v in &mut out.values[m * nf..(m + 1) * nf] {
            *v = (*v - drop).max(out.floor);
        }
    }
    out
}

/// Amplitude gain `10^(-α·d/20)` for one frequency.
pub fn amplitude_gain(freq: f64, atm: &AtmosphereState, distance_km: f64) -> f64 {
    10f64.powf(-absorption_db_per_km(freq, atm) * distance_km / 20.0)
}

/// Applies the absorption to a real waveform in the frequency domain.
pub fn attenuate_waveform(samples: &[f64], sample_rate: u32, atm: &AtmosphereState, distance_km: f64) -> Vec<f64> {
    let n = samples.len();
    if n == 0 || distance_km == 0.0 {
        return samples.to_vec();
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let bin = k.min(n - k);
        let f = bin as f64 * sample_rate as f64 / n as f64;
        *c *= amplitude_gain(f, atm, distance_km);
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureConfig, LogMelExtractor};

    #[test]
    fn zero_frequency_has_no_absorption() {
        let a = AtmosphereState::new(10.0, 50.0).unwrap();
        assert_eq!(absorption_db_per_km(0.0, &a), 0.0);
    }

    #[test]
    fn reference_table_values() {
        // ISO 9613-1 Table 1 excerpt: 20 °C, 50 % RH, 1 kHz → 4.66 dB/km
        let a = AtmosphereState::new(20.0, 50.0).unwrap();
        let v = absorption_db_per_km(1000.0, &a);
        assert!((v - 4.66).abs() < 0.01, "{v}");
    }

    #[test]
    fn invalid_states() {
        assert!(AtmosphereState::new(0.0, 101.0).is_err());
        assert!(AtmosphereState::with_pressure(0.0, 50.0, 0.0).is_err());
        assert!(AtmosphereState::new(-300.0, 50.0).is_err());
    }

    fn spec() -> LogMelSpectrogram {
        let ex = LogMelExtractor::new(&FeatureConfig { n_mels: 32, ..Default::default() }, 16_000).unwrap();
        let samples: Vec<i16> = (0..16_000).map(|i| ((i * 7919 % 2001) as i16 - 1000) * 10).collect();
        ex.log_mel(&samples).unwrap()
    }

    #[test]
    fn filter_distance_behaviour() {
        let s = spec();
        let a = AtmosphereState::new(0.3, 77.0).unwrap();
        assert_eq!(attenuation_filter(&s, &a, 0.0), s);
        let one = attenuation_filter(&s, &a, 1.0);
        let two = attenuation_filter(&s, &a, 2.0);
        let centers = s.band_centers_hz();
        for m in 0..s.n_mels {
            let d1 = s.get(m, 0) - one.get(m, 0);
            let d2 = s.get(m, 0) - two.get(m, 0);
            if two.get(m, 0) > s.floor {
                assert!((d2 - 2.0 * d1).abs() < 1e-9);
            }
            let expect = absorption_db_per_km(centers[m], &a) * std::f64::consts::LN_10 / 10.0;
            if one.get(m, 0) > s.floor {
                assert!((d1 - expect).abs() < 1e-9);
            }
        }
        assert!(one.values.iter().all(|&v| v >= s.floor));
    }

    #[test]
    fn waveform_attenuation_matches_gain() {
        let sr = 8000;
        let n = 8000;
        let tone: Vec<f64> = (0..n).map(|i| (2.0 * std::f64::consts::PI * 2000.0 * i as f64 / sr as f64).sin()).collect();
        let a = AtmosphereState::new(0.3, 77.0).unwrap();
        let out = attenuate_waveform(&tone, sr, &a, 5.0);
        let g = amplitude_gain(2000.0, &a, 5.0);
        for (o, t) in out.iter().zip(&tone) {
            assert!((o - g * t).abs() < 1e-9);
        }
    }
}
