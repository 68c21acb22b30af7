//! Hourly gridded weather: loading, clip-to-cell-hour alignment and
//! threshold binarization.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

pub const HOUR_S: i64 = 3600;

/// Rain thresholds (mm/hr) studied for binarization.
pub const RAIN_THRESHOLDS: [f64; 3] = [0.0, 0.06, 0.1];
/// Wind thresholds (m/s) studied for binarization.
pub const WIND_THRESHOLDS: [f64; 3] = [0.361, 1.1, 2.471];

/// Half-width (degrees) assumed for an axis with a single cell.
const SINGLE_CELL_HALF_WIDTH: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum WeatherError {
    #[error("time axis gap between {0} and {1}")]
    TimeGap(Timestamp, Timestamp),
    #[error("ragged grid: {0}")]
    Ragged(String),
    #[error("unsorted {0} axis")]
    Unsorted(&'static str),
    #[error("NaN cell at {0}")]
    NanCell(String),
    #[error("bounds violation: {0}")]
    Bounds(String),
    #[error("out of coverage: {0}")]
    OutOfCoverage(String),
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("cannot binarize {0}: only rain and wind are binarized")]
    NotBinarizable(Variable),
    #[error("grid row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    Rain,
    Wind,
    Temperature,
    Humidity,
}

impl Variable {
    pub const ALL: [Variable; 4] = [Variable::Rain, Variable::Wind, Variable::Temperature, Variable::Humidity];

    pub fn name(self) -> &'static str {
        match self {
            Variable::Rain => "rain",
            Variable::Wind => "wind",
            Variable::Temperature => "temperature",
            Variable::Humidity => "humidity",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Variable::Rain => "mm/hr",
            Variable::Wind => "m/s",
            Variable::Temperature => "°C",
            Variable::Humidity => "%",
        }
    }

    /// Rain and wind are audible events and can be binarized.
    pub fn is_event(self) -> bool {
        matches!(self, Variable::Rain | Variable::Wind)
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variable {
    type Err = WeatherError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rain" | "rainfall" => Ok(Variable::Rain),
            "wind" | "wind_speed" => Ok(Variable::Wind),
            "temperature" | "temp" => Ok(Variable::Temperature),
            "humidity" | "rel_humidity" | "rh" => Ok(Variable::Humidity),
            other => Err(WeatherError::UnknownVariable(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellIndex {
    pub time: usize,
    pub lat: usize,
    pub lon: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeatherSample {
    pub rainfall: f64,
    pub wind_speed: f64,
    pub temperature: f64,
    pub rel_humidity: f64,
    pub source_cell: CellIndex,
}

impl WeatherSample {
    pub fn get(&self, v: Variable) -> f64 {
        match v {
            Variable::Rain => self.rainfall,
            Variable::Wind => self.wind_speed,
            Variable::Temperature => self.temperature,
            Variable::Humidity => self.rel_humidity,
        }
    }
}

fn check_bounds(rain: f64, wind: f64, temp: f64, rh: f64, at: &dyn Fn() -> String) -> Result<(), WeatherError> {
    for (name, v) in [("rain", rain), ("wind", wind), ("temperature", temp), ("humidity", rh)] {
        if v.is_nan() {
            return Err(WeatherError::NanCell(format!("{} ({name})", at())));
        }
    }
    if rain < 0.0 {
        return Err(WeatherError::Bounds(format!("rainfall {rain} < 0 at {}", at())));
    }
    if wind < 0.0 {
        return Err(WeatherError::Bounds(format!("wind speed {wind} < 0 at {}", at())));
    }
    if !(0.0..=100.0).contains(&rh) {
        return Err(WeatherError::Bounds(format!("relative humidity {rh} outside [0, 100] at {}", at())));
    }
    if !temp.is_finite() || temp <= -273.15 {
        return Err(WeatherError::Bounds(format!("temperature {temp} at {}", at())));
    }
    Ok(())
}

/// Dense hourly grid, arrays indexed `[time][lat][lon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeatherGrid {
    pub lat_axis: Vec<f64>,
    pub lon_axis: Vec<f64>,
    pub time_axis: Vec<Timestamp>,
    pub rainfall: Vec<f64>,
    pub wind_speed: Vec<f64>,
    pub temperature: Vec<f64>,
    pub rel_humidity: Vec<f64>,
}

impl WeatherGrid {
    /// Validates axes and values and builds the grid.
    pub fn new(
        lat_axis: Vec<f64>,
        lon_axis: Vec<f64>,
        time_axis: Vec<Timestamp>,
        rainfall: Vec<f64>,
        wind_speed: Vec<f64>,
        temperature: Vec<f64>,
        rel_humidity: Vec<f64>,
    ) -> Result<Self, WeatherError> {
        if lat_axis.is_empty() || lon_axis.is_empty() || time_axis.is_empty() {
            return Err(WeatherError::Ragged("empty axis".into()));
        }
        if !lat_axis.windows(2).all(|w| w[0] < w[1]) {
            return Err(WeatherError::Unsorted("latitude"));
        }
        if !lon_axis.windows(2).all(|w| w[0] < w[1]) {
            return Err(WeatherError::Unsorted("longitude"));
        }
        for w in time_axis.windows(2) {
            if w[1] <= w[0] {
                return Err(WeatherError::Unsorted("time"));
            }
            if w[1].0 - w[0].0 != HOUR_S {
                return Err(WeatherError::TimeGap(w[0], w[1]));
            }
        }
        let n = time_axis.len() * lat_axis.len() * lon_axis.len();
        for (name, a) in [
            ("rainfall", &rainfall),
            ("wind_speed", &wind_speed),
            ("temperature", &temperature),
            ("rel_humidity", &rel_humidity),
        ] {
            if a.len() != n {
                return Err(WeatherError::Ragged(format!("{name} has {} cells, axes imply {n}", a.len())));
            }
        }
        let grid = WeatherGrid {
            lat_axis,
            lon_axis,
            time_axis,
            rainfall,
            wind_speed,
            temperature,
            rel_humidity,
        };
        for i in 0..n {
            check_bounds(grid.rainfall[i], grid.wind_speed[i], grid.temperature[i], grid.rel_humidity[i], &|| {
                let c = grid.unflatten(i);
                format!("{} lat {} lon {}", grid.time_axis[c.time], grid.lat_axis[c.lat], grid.lon_axis[c.lon])
            })?;
        }
        Ok(grid)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.time_axis.len(), self.lat_axis.len(), self.lon_axis.len())
    }

    fn flat(&self, c: CellIndex) -> usize {
        (c.time * self.lat_axis.len() + c.lat) * self.lon_axis.len() + c.lon
    }

    fn unflatten(&self, i: usize) -> CellIndex {
        let nlon = self.lon_axis.len();
        let nlat = self.lat_axis.len();
        CellIndex {
            time: i / (nlat * nlon),
            lat: (i / nlon) % nlat,
            lon: i % nlon,
        }
    }

    pub fn sample_at(&self, c: CellIndex) -> WeatherSample {
        let i = self.flat(c);
        WeatherSample {
            rainfall: self.rainfall[i],
            wind_speed: self.wind_speed[i],
            temperature: self.temperature[i],
            rel_humidity: self.rel_humidity[i],
            source_cell: c,
        }
    }

    /// Sample for the cell nearest `(lat, lon)` and the hour containing `t`.
    pub fn lookup(&self, lat: f64, lon: f64, t: Timestamp) -> Result<WeatherSample, WeatherError> {
        let lat_i = nearest_index(&self.lat_axis, lat)
            .ok_or_else(|| WeatherError::OutOfCoverage(format!("latitude {lat}")))?;
        let lon_i = nearest_index(&self.lon_axis, lon)
            .ok_or_else(|| WeatherError::OutOfCoverage(format!("longitude {lon}")))?;
        let t0 = self.time_axis[0].0;
        let offset = t.0 - t0;
        let hour = offset.div_euclid(HOUR_S);
        if offset < 0 || hour as usize >= self.time_axis.len() {
            return Err(WeatherError::OutOfCoverage(format!("time {t}")));
        }
        Ok(self.sample_at(CellIndex {
            time: hour as usize,
            lat: lat_i,
            lon: lon_i,
        }))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WeatherError> {
        let rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)?;
        Self::from_csv(rdr)
    }

    pub fn from_csv<R: std::io::Read>(mut rdr: csv::Reader<R>) -> Result<Self, WeatherError> {
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<GridRow>().enumerate() {
            let r = rec?;
            let t: Timestamp = r.time_utc.parse().map_err(|e: crate::time::TimestampError| WeatherError::Parse {
                row: i + 1,
                msg: e.to_string(),
            })?;
            if t.0 % HOUR_S != 0 {
                return Err(WeatherError::Parse {
                    row: i + 1,
                    msg: format!("timestamp {t} is not on the hour"),
                });
            }
            if r.lat.is_nan() || r.lon.is_nan() {
                return Err(WeatherError::NanCell(format!("row {} coordinates", i + 1)));
            }
            rows.push((t, r));
        }
        if rows.is_empty() {
            return Err(WeatherError::Ragged("no rows".into()));
        }
        let times: Vec<Timestamp> = rows.iter().map(|(t, _)| *t).collect::<BTreeSet<_>>().into_iter().collect();
        let lats = sorted_unique(rows.iter().map(|(_, r)| r.lat));
        let lons = sorted_unique(rows.iter().map(|(_, r)| r.lon));
        for w in times.windows(2) {
            if w[1].0 - w[0].0 != HOUR_S {
                return Err(WeatherError::TimeGap(w[0], w[1]));
            }
        }
        let n = times.len() * lats.len() * lons.len();
        if rows.len() != n {
            return Err(WeatherError::Ragged(format!(
                "{} rows for {}×{}×{} axes",
                rows.len(),
                times.len(),
                lats.len(),
                lons.len()
            )));
        }
        let t_idx: HashMap<Timestamp, usize> = times.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        let lat_idx: HashMap<u64, usize> = lats.iter().enumerate().map(|(i, v)| (v.to_bits(), i)).collect();
        let lon_idx: HashMap<u64, usize> = lons.iter().enumerate().map(|(i, v)| (v.to_bits(), i)).collect();
        let mut filled = vec![false; n];
        let (mut rain, mut wind, mut temp, mut rh) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for (t, r) in &rows {
            let i = (t_idx[t] * lats.len() + lat_idx[&r.lat.to_bits()]) * lons.len() + lon_idx[&r.lon.to_bits()];
            if filled[i] {
                return Err(WeatherError::Ragged(format!("duplicate cell-hour {t} lat {} lon {}", r.lat, r.lon)));
            }
            filled[i] = true;
            rain[i] = r.rain_mmhr;
            wind[i] = r.wind_ms;
            temp[i] = r.temp_c;
            rh[i] = r.rh_pct;
        }
        WeatherGrid::new(lats, lons, times, rain, wind, temp, rh)
    }

    /// Writes the grid CSV, one row per cell-hour in `[time][lat][lon]` order.
    pub fn write(&self, path: impl AsRef<Path>, header_comment: Option<&str>) -> Result<(), WeatherError> {
        let mut file = std::fs::File::create(path)?;
        if let Some(c) = header_comment {
            use std::io::Write;
            writeln!(file, "# {c}")?;
        }
        let mut w = csv::Writer::from_writer(file);
        for i in 0..self.rainfall.len() {
            let c = self.unflatten(i);
            w.serialize(GridRow {
                time_utc: self.time_axis[c.time].to_string(),
                lat: self.lat_axis[c.lat],
                lon: self.lon_axis[c.lon],
                rain_mmhr: self.rainfall[i],
                wind_ms: self.wind_speed[i],
                temp_c: self.temperature[i],
                rh_pct: self.rel_humidity[i],
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GridRow {
    time_utc: String,
    lat: f64,
    lon: f64,
    rain_mmhr: f64,
    wind_ms: f64,
    temp_c: f64,
    rh_pct: f64,
}

fn sorted_unique(it: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = it.collect();
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| a.to_bits() == b.to_bits());
    v
}

/// Nearest axis index, ties resolved to the lower index; `None` when `x`
/// lies more than half a step beyond either end.
fn nearest_index(axis: &[f64], x: f64) -> Option<usize> {
    let half = if axis.len() > 1 {
        0.5 * (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64
    } else {
        SINGLE_CELL_HALF_WIDTH
    };
    let tol = 1e-9 * half.max(f64::MIN_POSITIVE);
    if !(x >= axis[0] - half - tol && x <= axis[axis.len() - 1] + half + tol) {
        return None;
    }
    let mut best = 0;
    let mut best_d = (x - axis[0]).abs();
    for (i, &a) in axis.iter().enumerate().skip(1) {
        let d = (x - a).abs();
        if d < best_d - tol {
            best = i;
            best_d = d;
        }
    }
    Some(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarizationSpec {
    pub variable: Variable,
    pub threshold: f64,
}

impl BinarizationSpec {
    pub fn new(variable: Variable, threshold: f64) -> Result<Self, WeatherError> {
        if !variable.is_event() {
            return Err(WeatherError::NotBinarizable(variable));
        }
        if !(threshold >= 0.0) {
            return Err(WeatherError::Bounds(format!("threshold {threshold} must be ≥ 0")));
        }
        Ok(BinarizationSpec { variable, threshold })
    }

    pub fn label(&self, value: f64) -> bool {
        value > self.threshold
    }
}

/// Positive iff the sample's value is strictly above the threshold.
pub fn binarize(sample: &WeatherSample, spec: &BinarizationSpec) -> bool {
    spec.label(sample.get(spec.variable))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "time_utc,lat,lon,rain_mmhr,wind_ms,temp_c,rh_pct\n";

    fn parse(body: &str) -> Result<WeatherGrid, WeatherError> {
        let text = format!("{HEADER}{body}");
        WeatherGrid::from_csv(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes()))
    }

    fn two_by_two() -> WeatherGrid {
        let mut body = String::new();
        for h in 0..3 {
            for lat in [64.0, 65.0] {
                for lon in [-150.0, -149.0] {
                    let rain = h as f64 + (lat - 64.0) * 10.0 + (lon + 150.0) * 100.0;
                    body += &format!("2019-06-01T{:02}:00:00Z,{lat},{lon},{rain},1.0,5.0,80\n", 10 + h);
                }
            }
        }
        parse(&body).unwrap()
    }

    #[test]
    fn single_cell_grid() {
        let g = parse("2019-06-01T10:00:00Z,64.5,-150.0,0.5,2.0,3.0,77\n").unwrap();
        assert_eq!(g.dims(), (1, 1, 1));
        let s = g.lookup(64.5, -150.0, "2019-06-01T10:30:00Z".parse().unwrap()).unwrap();
        assert_eq!(s.rainfall, 0.5);
    }

    #[test]
    fn load_errors() {
        let gap = "2019-06-01T10:00:00Z,64,-150,0,0,0,50\n2019-06-01T12:00:00Z,64,-150,0,0,0,50\n\
                   2019-06-01T13:00:00Z,64,-150,0,0,0,50\n";
        assert!(parse(gap).unwrap_err().to_string().contains("time axis gap"));
        let rh = "2019-06-01T10:00:00Z,64,-150,0,0,0,105\n";
        assert!(parse(rh).unwrap_err().to_string().contains("bounds violation"));
        let nan = "2019-06-01T10:00:00Z,64,-150,NaN,0,0,50\n";
        assert!(matches!(parse(nan), Err(WeatherError::NanCell(_))));
        let ragged = "2019-06-01T10:00:00Z,64,-150,0,0,0,50\n2019-06-01T10:00:00Z,65,-150,0,0,0,50\n\
                      2019-06-01T11:00:00Z,64,-150,0,0,0,50\n";
        assert!(matches!(parse(ragged), Err(WeatherError::Ragged(_))));
        let neg = "2019-06-01T10:00:00Z,64,-150,-0.1,0,0,50\n";
        assert!(matches!(parse(neg), Err(WeatherError::Bounds(_))));
    }

    #[test]
    fn unsorted_axes_rejected_by_constructor() {
        let r = WeatherGrid::new(vec![65.0, 64.0], vec![0.0], vec![Timestamp(0)], vec![0.0; 2], vec![0.0; 2], vec![0.0; 2], vec![50.0; 2]);
        assert!(matches!(r, Err(WeatherError::Unsorted("latitude"))));
    }

    #[test]
    fn hour_boundaries_are_half_open() {
        let g = two_by_two();
        let at = |s: &str| g.lookup(64.0, -150.0, s.parse().unwrap()).unwrap();
        assert_eq!(at("2019-06-01T11:00:00Z").source_cell.time, 1);
        assert_eq!(at("2019-06-01T10:59:59Z").source_cell.time, 0);
        assert_eq!(at("2019-06-01T10:00:05Z"), at("2019-06-01T10:59:55Z"));
        assert!(g.lookup(64.0, -150.0, "2019-06-01T13:00:00Z".parse().unwrap()).is_err());
        assert!(g.lookup(64.0, -150.0, "2019-06-01T09:59:59Z".parse().unwrap()).is_err());
    }

    #[test]
    fn spatial_ties_go_to_lower_index() {
        let g = two_by_two();
        let t: Timestamp = "2019-06-01T10:00:00Z".parse().unwrap();
        assert_eq!(g.lookup(64.5, -150.0, t).unwrap().source_cell.lat, 0);
        assert_eq!(g.lookup(64.5001, -150.0, t).unwrap().source_cell.lat, 1);
        assert_eq!(g.lookup(64.0, -149.5, t).unwrap().source_cell.lon, 0);
        assert!(g.lookup(65.5, -150.0, t).is_ok());
        assert!(g.lookup(65.6, -150.0, t).is_err());
        assert!(g.lookup(63.4, -150.0, t).is_err());
    }

    #[test]
    fn write_then_load() {
        let g = two_by_two();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        g.write(&p, Some("seed=3")).unwrap();
        assert_eq!(WeatherGrid::load(&p).unwrap(), g);
    }

    #[test]
    fn binarize_examples() {
        let s = |rain: f64, wind: f64| WeatherSample {
            rainfall: rain,
            wind_speed: wind,
            temperature: 0.0,
            rel_humidity: 50.0,
            source_cell: CellIndex { time: 0, lat: 0, lon: 0 },
        };
        let rain0 = BinarizationSpec::new(Variable::Rain, 0.0).unwrap();
        let rain01 = BinarizationSpec::new(Variable::Rain, 0.1).unwrap();
        let wind = BinarizationSpec::new(Variable::Wind, 2.471).unwrap();
        assert!(binarize(&s(0.05, 0.0), &rain0));
        assert!(!binarize(&s(0.0, 0.0), &rain0));
        assert!(!binarize(&s(0.1, 0.0), &rain01));
        assert!(!binarize(&s(0.0, 2.471), &wind));
        assert!(binarize(&s(0.0, 2.472), &wind));
        assert!(BinarizationSpec::new(Variable::Humidity, 50.0).is_err());
        assert!(BinarizationSpec::new(Variable::Rain, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn lookup_piecewise_constant(dt in 0i64..3600, dlat in -0.49f64..0.49, dlon in -0.49f64..0.49, h in 0usize..3, lat_i in 0usize..2, lon_i in 0usize..2) {
            let g = two_by_two();
            let base = g.time_axis[h];
            let s = g.lookup(g.lat_axis[lat_i] + dlat, g.lon_axis[lon_i] + dlon, base.offset(dt)).unwrap();
            prop_assert_eq!(s.source_cell, CellIndex { time: h, lat: lat_i, lon: lon_i });
        }

        #[test]
        fn binarize_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0, th in 0.0f64..5.0) {
            let spec = BinarizationSpec::new(Variable::Rain, th).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(!spec.label(lo) || spec.label(hi));
        }
    }
}
