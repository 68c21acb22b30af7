//! Labeled datasets: joining clips to weak grid labels and optional strong
//! labels, site-exclusive partitioning, and the threshold-sweep baseline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::eval::{self, Confusion, EvalError};
use crate::exec::Exec;
use crate::rng::rng_from;
use crate::time::Timestamp;
use crate::weather::{CellIndex, Variable, WeatherGrid, WeatherSample};

pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];
pub const DEFAULT_SWEEP_STEP: f64 = 0.001;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("duplicate clip id {0:?}")]
    DuplicateClip(String),
    #[error("need at least 3 sites for a train/val/test split, found {0}")]
    TooFewSites(usize),
    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("threshold sweep needs at least one positive label")]
    NoPositives,
    #[error("sweep step must be positive, got {0}")]
    BadStep(f64),
    #[error("{0}")]
    Parse(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Strong (clip-level) ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StrongLabels {
    pub rain: Option<bool>,
    pub wind: Option<bool>,
}

impl StrongLabels {
    pub fn get(&self, v: Variable) -> Option<bool> {
        match v {
            Variable::Rain => self.rain,
            Variable::Wind => self.wind,
            _ => None,
        }
    }

    fn is_empty(&self) -> bool {
        self.rain.is_none() && self.wind.is_none()
    }
}

/// One manifest row: `clip_id,site_id,start_time_utc,wav_path,lat,lon[,rain_strong,wind_strong]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub site_id: String,
    pub start_time: Timestamp,
    pub wav_path: String,
    pub lat: f64,
    pub lon: f64,
    pub strong: StrongLabels,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    clip_id: String,
    site_id: String,
    start_time_utc: String,
    wav_path: String,
    lat: f64,
    lon: f64,
    #[serde(default)]
    rain_strong: Option<String>,
    #[serde(default)]
    wind_strong: Option<String>,
}

fn parse_flag(s: Option<&str>) -> Result<Option<bool>, DatasetError> {
    match s.map(str::trim) {
        None | Some("") => Ok(None),
        Some("1") | Some("true") | Some("yes") => Ok(Some(true)),
        Some("0") | Some("false") | Some("no") => Ok(Some(false)),
        Some(other) => Err(DatasetError::Parse(format!("bad strong label {other:?}"))),
    }
}

fn flag_str(b: Option<bool>) -> String {
    match b {
        Some(true) => "1".into(),
        Some(false) => "0".into(),
        None => String::new(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, DatasetError> {
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?)
}

fn csv_writer(path: &Path, comment: Option<&str>) -> Result<csv::Writer<std::fs::File>, DatasetError> {
    let mut file = std::fs::File::create(path)?;
    if let Some(c) = comment {
        use std::io::Write;
        writeln!(file, "# {c}")?;
    }
    Ok(csv::Writer::from_writer(file))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut rdr = csv_reader(path.as_ref())?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<ManifestRow>() {
        let r = rec?;
        let start_time = r
            .start_time_utc
            .parse()
            .map_err(|e: crate::time::TimestampError| DatasetError::Parse(e.to_string()))?;
        out.push(ManifestEntry {
            strong: StrongLabels {
                rain: parse_flag(r.rain_strong.as_deref())?,
                wind: parse_flag(r.wind_strong.as_deref())?,
            },
            clip_id: r.clip_id,
            site_id: r.site_id,
            start_time,
            wav_path: r.wav_path,
            lat: r.lat,
            lon: r.lon,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry], comment: Option<&str>) -> Result<(), DatasetError> {
    let mut w = csv_writer(path.as_ref(), comment)?;
    let with_strong = entries.iter().any(|e| !e.strong.is_empty());
    for e in entries {
        w.serialize(ManifestRow {
            clip_id: e.clip_id.clone(),
            site_id: e.site_id.clone(),
            start_time_utc: e.start_time.to_string(),
            wav_path: e.wav_path.clone(),
            lat: e.lat,
            lon: e.lon,
            rain_strong: with_strong.then(|| flag_str(e.strong.rain)),
            wind_strong: with_strong.then(|| flag_str(e.strong.wind)),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// A clip joined to its weak grid label. The clip id keys the cached
/// spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledClip {
    pub clip_id: String,
    pub site_id: String,
    pub start_time: Timestamp,
    pub lat: f64,
    pub lon: f64,
    pub weak: WeatherSample,
    pub strong: Option<StrongLabels>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Reject {
    pub clip_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuiltDataset {
    pub clips: Vec<LabeledClip>,
    pub rejects: Vec<Reject>,
}

/// Attaches weak labels from the grid (and strong labels where known).
/// Clips outside the grid's coverage go to `rejects`.
pub fn build_dataset(
    entries: &[ManifestEntry],
    grid: &WeatherGrid,
    strong_labels: Option<&HashMap<String, StrongLabels>>,
) -> Result<BuiltDataset, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = BuiltDataset::default();
    for e in entries {
        if !seen.insert(e.clip_id.as_str()) {
            return Err(DatasetError::DuplicateClip(e.clip_id.clone()));
        }
        let weak = match grid.lookup(e.lat, e.lon, e.start_time) {
            Ok(s) => s,
            Err(err) => {
                out.rejects.push(Reject {
                    clip_id: e.clip_id.clone(),
                    reason: err.to_string(),
                });
                continue;
            }
        };
        let strong = strong_labels
            .and_then(|m| m.get(&e.clip_id).copied())
            .or_else(|| (!e.strong.is_empty()).then_some(e.strong));
        out.clips.push(LabeledClip {
            clip_id: e.clip_id.clone(),
            site_id: e.site_id.clone(),
            start_time: e.start_time,
            lat: e.lat,
            lon: e.lon,
            weak,
            strong,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    clip_id: String,
    site_id: String,
    start_time_utc: String,
    lat: f64,
    lon: f64,
    rain_mmhr: f64,
    wind_ms: f64,
    temp_c: f64,
    rh_pct: f64,
    t_idx: usize,
    lat_idx: usize,
    lon_idx: usize,
    rain_strong: String,
    wind_strong: String,
}

pub fn write_labels(path: impl AsRef<Path>, clips: &[LabeledClip], comment: Option<&str>) -> Result<(), DatasetError> {
    let mut w = csv_writer(path.as_ref(), comment)?;
    for c in clips {
        let s = c.strong.unwrap_or_default();
        w.serialize(LabelRow {
            clip_id: c.clip_id.clone(),
            site_id: c.site_id.clone(),
            start_time_utc: c.start_time.to_string(),
            lat: c.lat,
            lon: c.lon,
            rain_mmhr: c.weak.rainfall,
            wind_ms: c.weak.wind_speed,
            temp_c: c.weak.temperature,
            rh_pct: c.weak.rel_humidity,
            t_idx: c.weak.source_cell.time,
            lat_idx: c.weak.source_cell.lat,
            lon_idx: c.weak.source_cell.lon,
            rain_strong: flag_str(s.rain),
            wind_strong: flag_str(s.wind),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabeledClip>, DatasetError> {
    let mut rdr = csv_reader(path.as_ref())?;
    let mut out = Vec::new();
    for rec in rdr.deserialize::<LabelRow>() {
        let r = rec?;
        let strong = StrongLabels {
            rain: parse_flag(Some(&r.rain_strong))?,
            wind: parse_flag(Some(&r.wind_strong))?,
        };
        out.push(LabeledClip {
            start_time: r
                .start_time_utc
                .parse()
                .map_err(|e: crate::time::TimestampError| DatasetError::Parse(e.to_string()))?,
            clip_id: r.clip_id,
            site_id: r.site_id,
            lat: r.lat,
            lon: r.lon,
            weak: WeatherSample {
                rainfall: r.rain_mmhr,
                wind_speed: r.wind_ms,
                temperature: r.temp_c,
                rel_humidity: r.rh_pct,
                source_cell: CellIndex {
                    time: r.t_idx,
                    lat: r.lat_idx,
                    lon: r.lon_idx,
                },
            },
            strong: (!strong.is_empty()).then_some(strong),
        });
    }
    Ok(out)
}

pub fn write_rejects(path: impl AsRef<Path>, rejects: &[Reject], comment: Option<&str>) -> Result<(), DatasetError> {
    let mut w = csv_writer(path.as_ref(), comment)?;
    w.write_record(["clip_id", "reason"])?;
    for r in rejects {
        w.write_record([&r.clip_id, &r.reason])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Partition {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Partition::Train),
            "val" | "validation" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(DatasetError::Parse(format!("unknown partition {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub assignment: BTreeMap<String, Partition>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn partition_of(&self, site: &str) -> Option<Partition> {
        self.assignment.get(site).copied()
    }

    pub fn sites_in(&self, p: Partition) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &q)| q == p)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Clips of the dataset that fall in partition `p`, in dataset order.
    pub fn select<'a>(&self, clips: &'a [LabeledClip], p: Partition) -> Vec<&'a LabeledClip> {
        clips.iter().filter(|c| self.partition_of(&c.site_id) == Some(p)).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>, comment: Option<&str>) -> Result<(), DatasetError> {
        let mut w = csv_writer(path.as_ref(), comment)?;
        w.write_record(["site_id", "partition"])?;
        for (s, p) in &self.assignment {
            w.write_record([s.as_str(), p.name()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a split file; the seed is taken from a `# seed=N` header when present.
    pub fn read(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let seed = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .and_then(|l| l.split_whitespace().find_map(|kv| kv.strip_prefix("seed=")))
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut assignment = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let site = rec.get(0).unwrap_or_default().to_string();
            let part: Partition = rec.get(1).unwrap_or_default().parse()?;
            if assignment.insert(site.clone(), part).is_some() {
                return Err(DatasetError::Parse(format!("site {site:?} listed twice")));
            }
        }
        Ok(SplitSpec { assignment, seed })
    }
}

/// Site-exclusive split of a dataset, balancing clip counts toward `ratios`.
pub fn site_exclusive_split(clips: &[LabeledClip], ratios: [f64; 3], seed: u64) -> Result<SplitSpec, DatasetError> {
    let mut counts = BTreeMap::new();
    for c in clips {
        *counts.entry(c.site_id.clone()).or_insert(0usize) += 1;
    }
    split_sites(&counts, ratios, seed)
}

/// Shuffles sites with the seeded generator, then assigns each to the
/// partition with the largest remaining clip-count deficit (ties to the
/// earlier partition). A partition still empty when only as many sites
/// remain as there are empty partitions takes the next site.
pub fn split_sites(site_counts: &BTreeMap<String, usize>, ratios: [f64; 3], seed: u64) -> Result<SplitSpec, DatasetError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !(r > 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios));
    }
    if site_counts.len() < 3 {
        return Err(DatasetError::TooFewSites(site_counts.len()));
    }
    let mut sites: Vec<(&String, usize)> = site_counts.iter().map(|(s, &c)| (s, c)).collect();
    sites.shuffle(&mut rng_from(seed, &[0x5911]));
    let total: usize = sites.iter().map(|s| s.1).sum();
    let mut deficit: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut filled = [0usize; 3];
    let mut assignment = BTreeMap::new();
    for (i, (site, count)) in sites.iter().enumerate() {
        let remaining = sites.len() - i;
        let empty: Vec<usize> = (0..3).filter(|&p| filled[p] == 0).collect();
        let p = if !empty.is_empty() && remaining <= empty.len() {
            empty[0]
        } else {
            let mut best = 0;
            for q in 1..3 {
                if deficit[q] > deficit[best] {
                    best = q;
                }
            }
            best
        };
        deficit[p] -= *count as f64;
        filled[p] += 1;
        assignment.insert((*site).clone(), Partition::ALL[p]);
    }
    Ok(SplitSpec { assignment, seed })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepResult {
    pub threshold: f64,
    pub f1: f64,
}

/// Threshold grid `0, step, 2·step, …` up to `max`. When `1/step` is an
/// integer the points are computed as `i / (1/step)` so decimal-grid values
/// compare exactly against identically written data.
pub fn threshold_grid(max: f64, step: f64) -> Vec<f64> {
    let inv = (1.0 / step).round();
    let exact = inv >= 1.0 && ((1.0 / inv) - step).abs() <= 1e-15 * step.max(1.0);
    let point = |i: usize| if exact { i as f64 / inv } else { i as f64 * step };
    let mut n = (max / step).floor() as usize;
    while point(n + 1) <= max {
        n += 1;
    }
    while n > 0 && point(n) > max {
        n -= 1;
    }
    (0..=n).map(point).collect()
}

/// Chooses the threshold whose predictor `value > τ` maximizes F1 on the
/// training data, scanning `τ ∈ {0, step, …, max(values)}`. The smallest
/// maximizing `τ` wins.
pub fn threshold_sweep(values: &[f64], labels: &[bool], step: f64, exec: Exec) -> Result<SweepResult, DatasetError> {
    if !(step > 0.0) {
        return Err(DatasetError::BadStep(step));
    }
    if values.len() != labels.len() {
        return Err(EvalError::LengthMismatch(values.len(), labels.len()).into());
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(DatasetError::NoPositives);
    }
    let mut pos: Vec<f64> = values.iter().zip(labels).filter(|(_, &l)| l).map(|(&v, _)| v).collect();
    let mut neg: Vec<f64> = values.iter().zip(labels).filter(|(_, &l)| !l).map(|(&v, _)| v).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&v| v <= t);
    let max = values.iter().cloned().fold(0.0, f64::max);
    let grid = threshold_grid(max, step);
    let scores = exec.map(&grid, |&t| {
        let tp = above(&pos, t);
        let fp = above(&neg, t);
        Confusion {
            tp,
            fp,
            fn_: n_pos - tp,
            tn: 0,
        }
        .f1()
    });
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(SweepResult {
        threshold: grid[best],
        f1: scores[best],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BaselineResult {
    pub best_threshold: f64,
    pub train_f1: f64,
    pub test_f1: f64,
    pub test_auc: f64,
}

/// Scores the swept threshold on held-out data; AUC uses the raw values.
pub fn baseline_evaluate(sweep: &SweepResult, test_values: &[f64], test_labels: &[bool]) -> Result<BaselineResult, DatasetError> {
    let preds: Vec<bool> = test_values.iter().map(|&v| v > sweep.threshold).collect();
    let test_f1 = eval::f1(&preds, test_labels)?;
    let test_auc = eval::auc(test_values, test_labels)?;
    Ok(BaselineResult {
        best_threshold: sweep.threshold,
        train_f1: sweep.f1,
        test_f1,
        test_auc,
    })
}
