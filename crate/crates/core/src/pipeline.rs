//! File-level pipeline stages shared by the command-line front end and the
//! end-to-end tests: ingest, features, align, split, baseline, train and
//! evaluate. Every CSV written here starts with a `# seed=N` line.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio_io::{self, read_recording, segment, write_wav, AudioError};
use crate::datasets::{
    self, baseline_evaluate, build_dataset, read_labels, read_manifest, threshold_sweep, write_labels, write_manifest, write_rejects,
    BaselineResult, BuiltDataset, DatasetError, LabeledClip, ManifestEntry, Partition, SplitSpec, StrongLabels,
};
use crate::eval::{self, ClassificationReport, ClassificationRow, EvalError, ModelKind, RegressionReport, RegressionRow};
use crate::exec::Exec;
use crate::features::{read_cache, write_cache, FeatureConfig, FeatureError, LogMelExtractor, LogMelSpectrogram};
use crate::nn::{self, Checkpoint, CnnModel, Example, HeadKind, History, ModelConfig, NnError, Task, TrainConfig};
use crate::weather::{BinarizationSpec, Variable, WeatherError, WeatherGrid};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Weather(#[from] WeatherError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(msg: impl Into<String>) -> PipelineError {
    PipelineError::Invalid(msg.into())
}

pub fn seed_comment(seed: u64) -> String {
    format!("seed={seed}")
}

/// Binarization thresholds used to turn weak values into event labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub rain: f64,
    pub wind: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { rain: 0.0, wind: 2.471 }
    }
}

impl Thresholds {
    pub fn spec(&self, v: Variable) -> Result<BinarizationSpec, PipelineError> {
        let t = match v {
            Variable::Rain => self.rain,
            Variable::Wind => self.wind,
            other => return Err(WeatherError::NotBinarizable(other).into()),
        };
        Ok(BinarizationSpec::new(v, t)?)
    }
}

/// Where event-head training labels come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Binarized grid values.
    #[default]
    Weak,
    /// Clip-level ground truth.
    Strong,
}

impl std::str::FromStr for LabelSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "weak" => Ok(LabelSource::Weak),
            "strong" => Ok(LabelSource::Strong),
            _ => Err(format!("unknown label source '{s}' (expected weak or strong)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestSummary {
    pub recordings: usize,
    pub clips: usize,
    pub rejected_clipped: usize,
    pub entries: Vec<ManifestEntry>,
}

/// Reads `site_id,lat,lon`.
pub fn read_sites(path: impl AsRef<Path>) -> Result<BTreeMap<String, (f64, f64)>, PipelineError> {
    #[derive(Deserialize)]
    struct Row {
        site_id: String,
        lat: f64,
        lon: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path.as_ref())?;
    let mut out = BTreeMap::new();
    for r in rdr.deserialize::<Row>() {
        let r = r?;
        out.insert(r.site_id, (r.lat, r.lon));
    }
    Ok(out)
}

/// Segments every `SITE_YYYYMMDD_HHMMSS.wav` under `audio_dir` into clips,
/// drops clipped ones, writes the survivors to `out_dir/clips/` and returns
/// their manifest (also written to `out_dir/manifest.csv`).
pub fn ingest(
    audio_dir: &Path,
    sites: &BTreeMap<String, (f64, f64)>,
    out_dir: &Path,
    clip_seconds: f64,
    max_clipped_fraction: f64,
    seed: u64,
    exec: Exec,
) -> Result<IngestSummary, PipelineError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(audio_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid(format!("no .wav files in {}", audio_dir.display())));
    }
    let clip_dir = out_dir.join("clips");
    std::fs::create_dir_all(&clip_dir)?;
    let per_file = exec.try_map(&files, |path| -> Result<(Vec<ManifestEntry>, usize), PipelineError> {
        let wave = read_recording(path)?;
        let &(lat, lon) = sites
            .get(&wave.site_id)
            .ok_or_else(|| invalid(format!("site {:?} missing from the site table", wave.site_id)))?;
        let clips = segment(&wave, clip_seconds);
        let total = clips.len();
        let kept = audio_io::filter_clipped(clips, max_clipped_fraction);
        let mut entries = Vec::with_capacity(kept.len());
        for c in kept {
            let clip_id = format!("{}_{}", c.site_id, c.start_time.to_compact());
            let rel = format!("clips/{clip_id}.wav");
            write_wav(out_dir.join(&rel), &c.samples, c.sample_rate)?;
            entries.push(ManifestEntry {
                clip_id,
                site_id: c.site_id,
                start_time: c.start_time,
                wav_path: rel,
                lat,
                lon,
                strong: StrongLabels::default(),
            });
        }
        let rejected = total - entries.len();
        Ok((entries, rejected))
    })?;
    let mut entries = Vec::new();
    let mut rejected = 0;
    for (e, r) in per_file {
        entries.extend(e);
        rejected += r;
    }
    write_manifest(out_dir.join("manifest.csv"), &entries, Some(&seed_comment(seed)))?;
    Ok(IngestSummary {
        recordings: files.len(),
        clips: entries.len(),
        rejected_clipped: rejected,
        entries,
    })
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    clip_id: String,
    file: String,
    sample_rate: u32,
    n_mels: usize,
    n_frames: usize,
}

/// Computes log-mel spectrograms for every manifest clip and caches them
/// under `features_dir` with an `index.csv`. WAV paths are relative to the
/// manifest's directory.
pub fn extract_features(manifest_path: &Path, features_dir: &Path, cfg: &FeatureConfig, seed: u64, exec: Exec) -> Result<usize, PipelineError> {
    let entries = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(features_dir)?;
    let rows = exec.try_map(&entries, |e| -> Result<IndexRow, PipelineError> {
        let wave = audio_io::read_wav(resolve(base, &e.wav_path))?;
        let ex = LogMelExtractor::new(cfg, wave.sample_rate)?;
        let spec = ex.log_mel(&wave.samples)?;
        let file = format!("{}.lmel", e.clip_id);
        write_cache(features_dir.join(&file), &spec)?;
        Ok(IndexRow {
            clip_id: e.clip_id.clone(),
            file,
            sample_rate: wave.sample_rate,
            n_mels: spec.n_mels,
            n_frames: spec.n_frames,
        })
    })?;
    let mut file = std::fs::File::create(features_dir.join("index.csv"))?;
    {
        use std::io::Write;
        writeln!(file, "# {}", seed_comment(seed))?;
    }
    let mut w = csv::Writer::from_writer(file);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows.len())
}

/// Loads cached spectrograms for `clip_ids`, in that order.
pub fn load_features(features_dir: &Path, clip_ids: &[&str], cfg: &FeatureConfig, exec: Exec) -> Result<Vec<LogMelSpectrogram>, PipelineError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(features_dir.join("index.csv"))?;
    let mut index: HashMap<String, IndexRow> = HashMap::new();
    for r in rdr.deserialize::<IndexRow>() {
        let r = r?;
        index.insert(r.clip_id.clone(), r);
    }
    let mut extractors: BTreeMap<u32, LogMelExtractor> = BTreeMap::new();
    for r in index.values() {
        if let std::collections::btree_map::Entry::Vacant(e) = extractors.entry(r.sample_rate) {
            e.insert(LogMelExtractor::new(cfg, r.sample_rate)?);
        }
    }
    exec.try_map(clip_ids, |id| {
        let r = index
            .get(*id)
            .ok_or_else(|| invalid(format!("no cached features for clip {id:?}")))?;
        Ok(read_cache(features_dir.join(&r.file), &extractors[&r.sample_rate])?)
    })
}

/// Reads strong labels keyed by clip id from a manifest-format CSV.
pub fn read_strong_labels(path: &Path) -> Result<HashMap<String, StrongLabels>, PipelineError> {
    Ok(read_manifest(path)?
        .into_iter()
        .map(|e| (e.clip_id, e.strong))
        .collect())
}

/// Joins manifest clips to the grid and writes `labels.csv` and
/// `rejects.csv` into `out_dir`.
pub fn align(
    manifest_path: &Path,
    grid_path: &Path,
    strong: Option<&HashMap<String, StrongLabels>>,
    out_dir: &Path,
    seed: u64,
) -> Result<BuiltDataset, PipelineError> {
    let entries = read_manifest(manifest_path)?;
    let grid = WeatherGrid::load(grid_path)?;
    let built = build_dataset(&entries, &grid, strong)?;
    std::fs::create_dir_all(out_dir)?;
    let c = seed_comment(seed);
    write_labels(out_dir.join("labels.csv"), &built.clips, Some(&c))?;
    write_rejects(out_dir.join("rejects.csv"), &built.rejects, Some(&c))?;
    Ok(built)
}

pub fn split(labels_path: &Path, ratios: [f64; 3], seed: u64, out_path: &Path) -> Result<SplitSpec, PipelineError> {
    let clips = read_labels(labels_path)?;
    let spec = datasets::site_exclusive_split(&clips, ratios, seed)?;
    spec.write(out_path, Some(&seed_comment(seed)))?;
    Ok(spec)
}

fn strong_of(c: &LabeledClip, v: Variable) -> Result<bool, PipelineError> {
    c.strong
        .and_then(|s| s.get(v))
        .ok_or_else(|| invalid(format!("clip {} has no strong {} label", c.clip_id, v.name())))
}

/// Picks the F1-optimal threshold on the training partition's weak values
/// against strong labels and scores it on the test partition.
pub fn baseline(clips: &[LabeledClip], split: &SplitSpec, variable: Variable, step: f64, exec: Exec) -> Result<BaselineResult, PipelineError> {
    if !variable.is_event() {
        return Err(WeatherError::NotBinarizable(variable).into());
    }
    let part = |p| -> Result<(Vec<f64>, Vec<bool>), PipelineError> {
        let sel = split.select(clips, p);
        let values = sel.iter().map(|c| c.weak.get(variable)).collect();
        let labels = sel.iter().map(|c| strong_of(c, variable)).collect::<Result<_, _>>()?;
        Ok((values, labels))
    };
    let (tv, tl) = part(Partition::Train)?;
    let (sv, sl) = part(Partition::Test)?;
    let sweep = threshold_sweep(&tv, &tl, step, exec)?;
    Ok(baseline_evaluate(&sweep, &sv, &sl)?)
}

/// Per-head targets: 0/1 event labels for probability heads, weak values in
/// physical units for linear heads.
pub fn targets_for(clip: &LabeledClip, config: &ModelConfig, thresholds: &Thresholds, source: LabelSource) -> Result<Vec<f64>, PipelineError> {
    config
        .heads
        .iter()
        .enumerate()
        .map(|(i, &v)| match config.head_kind(i) {
            HeadKind::Probability => {
                let positive = match source {
                    LabelSource::Weak => thresholds.spec(v)?.label(clip.weak.get(v)),
                    LabelSource::Strong => strong_of(clip, v)?,
                };
                Ok(if positive { 1.0 } else { 0.0 })
            }
            HeadKind::Linear => Ok(clip.weak.get(v)),
        })
        .collect()
}

/// Clips, split and spectrograms of one prepared dataset, aligned by index.
pub struct Prepared {
    pub clips: Vec<LabeledClip>,
    pub split: SplitSpec,
    pub specs: Vec<LogMelSpectrogram>,
}

impl Prepared {
    pub fn load(labels: &Path, split: &Path, features_dir: &Path, cfg: &FeatureConfig, exec: Exec) -> Result<Self, PipelineError> {
        let clips = read_labels(labels)?;
        let split = SplitSpec::read(split)?;
        let clips: Vec<LabeledClip> = clips
            .into_iter()
            .filter(|c| split.partition_of(&c.site_id).is_some())
            .collect();
        let ids: Vec<&str> = clips.iter().map(|c| c.clip_id.as_str()).collect();
        let specs = load_features(features_dir, &ids, cfg, exec)?;
        Ok(Prepared { clips, split, specs })
    }

    pub fn indices(&self, p: Partition) -> Vec<usize> {
        (0..self.clips.len())
            .filter(|&i| self.split.partition_of(&self.clips[i].site_id) == Some(p))
            .collect()
    }
}

/// Trains on the train partition with model selection on the val partition.
pub fn train(
    data: &Prepared,
    config: ModelConfig,
    thresholds: &Thresholds,
    source: LabelSource,
    train_cfg: &TrainConfig,
    exec: Exec,
) -> Result<(Checkpoint, History), PipelineError> {
    let n_mels = data.specs.first().map(|s| s.n_mels).unwrap_or(config.n_mels);
    if n_mels != config.n_mels {
        return Err(invalid(format!(
            "model expects {} mel bands, features have {n_mels}",
            config.n_mels
        )));
    }
    let targets = data
        .clips
        .iter()
        .map(|c| targets_for(c, &config, thresholds, source))
        .collect::<Result<Vec<_>, _>>()?;
    let examples = |p| -> Vec<Example<'_>> {
        data.indices(p)
            .into_iter()
            .map(|i| Example {
                spec: &data.specs[i],
                target: &targets[i],
            })
            .collect()
    };
    let (tr, va) = (examples(Partition::Train), examples(Partition::Val));
    let model = CnnModel::init(config, train_cfg.seed)?;
    Ok(nn::train(model, &tr, &va, train_cfg, exec)?)
}

fn capitalized(v: Variable) -> String {
    let n = v.name();
    n[..1].to_uppercase() + &n[1..]
}

fn kind_of(config: &ModelConfig, source: LabelSource) -> ModelKind {
    match (source, config.is_shared()) {
        (LabelSource::Strong, _) => ModelKind::StrongLabel,
        (LabelSource::Weak, true) => ModelKind::Shared,
        (LabelSource::Weak, false) => ModelKind::Individual,
    }
}

/// Test-partition classification rows for every event head of the
/// checkpoint, preceded by the threshold-sweep baseline where strong labels
/// exist. Scores are compared with strong labels when every test clip has
/// them, otherwise with the binarized weak labels.
pub fn evaluate_classification(
    checkpoint: &Checkpoint,
    data: &Prepared,
    thresholds: &Thresholds,
    source: LabelSource,
    step: f64,
    exec: Exec,
) -> Result<ClassificationReport, PipelineError> {
    let config = &checkpoint.config;
    let test = data.indices(Partition::Test);
    let specs: Vec<&LogMelSpectrogram> = test.iter().map(|&i| &data.specs[i]).collect();
    let out = nn::predict(checkpoint, &specs, exec)?;
    let mut report = ClassificationReport::default();
    for (h, &v) in config.heads.iter().enumerate() {
        if config.head_kind(h) != HeadKind::Probability {
            continue;
        }
        let spec = thresholds.spec(v)?;
        let strong: Option<Vec<bool>> = test.iter().map(|&i| data.clips[i].strong.and_then(|s| s.get(v))).collect();
        let training = match source {
            LabelSource::Weak => "Satellite",
            LabelSource::Strong => "Strong",
        };
        if strong.is_some() {
            if let Ok(b) = baseline(&data.clips, &data.split, v, step, exec) {
                report.rows.push(ClassificationRow {
                    class: capitalized(v),
                    training: "Satellite".into(),
                    model_kind: ModelKind::Baseline,
                    threshold: Some(b.best_threshold),
                    unit: v.unit().into(),
                    auc: b.test_auc,
                    f1: b.test_f1,
                });
            }
        }
        let labels = strong.unwrap_or_else(|| test.iter().map(|&i| spec.label(data.clips[i].weak.get(v))).collect());
        let scores: Vec<f64> = out.iter().map(|o| o[h]).collect();
        let preds: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
        report.rows.push(ClassificationRow {
            class: capitalized(v),
            training: training.into(),
            model_kind: kind_of(config, source),
            threshold: (source == LabelSource::Weak).then_some(spec.threshold),
            unit: v.unit().into(),
            auc: eval::auc(&scores, &labels)?,
            f1: eval::f1(&preds, &labels)?,
        });
    }
    Ok(report)
}

/// Test-partition RMSE of every linear head against the weak values, next to
/// the constant train-mean baseline.
pub fn evaluate_regression(checkpoint: &Checkpoint, data: &Prepared, exec: Exec) -> Result<RegressionReport, PipelineError> {
    let config = &checkpoint.config;
    let test = data.indices(Partition::Test);
    let train_idx = data.indices(Partition::Train);
    let specs: Vec<&LogMelSpectrogram> = test.iter().map(|&i| &data.specs[i]).collect();
    let out = nn::predict(checkpoint, &specs, exec)?;
    let mut report = RegressionReport::default();
    for (h, &v) in config.heads.iter().enumerate() {
        if config.head_kind(h) != HeadKind::Linear {
            continue;
        }
        let truth: Vec<f64> = test.iter().map(|&i| data.clips[i].weak.get(v)).collect();
        let train_vals: Vec<f64> = train_idx.iter().map(|&i| data.clips[i].weak.get(v)).collect();
        let preds: Vec<f64> = out.iter().map(|o| o[h]).collect();
        let baseline_rmse = eval::constant_baseline_rmse(&train_vals, &truth)?;
        let model_rmse = eval::rmse(&preds, &truth)?;
        report.rows.push(RegressionRow {
            variable: capitalized(v),
            unit: v.unit().into(),
            min: truth.iter().cloned().fold(f64::INFINITY, f64::min),
            median: eval::median(&truth),
            max: truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            baseline_rmse,
            model_kind: if config.is_shared() { ModelKind::Shared } else { ModelKind::Individual },
            model_rmse,
            change_pct: eval::change_pct(model_rmse, baseline_rmse)?,
        });
    }
    Ok(report)
}

/// Model architecture and head choice for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelChoice {
    /// `None` trains the shared four-head model.
    pub variable: Option<Variable>,
    pub task: Task,
    pub conv_channels: [usize; 4],
    pub fc_hidden: usize,
}

impl Default for ModelChoice {
    fn default() -> Self {
        ModelChoice {
            variable: Some(Variable::Rain),
            task: Task::Classification,
            conv_channels: nn::DEFAULT_CONV_CHANNELS,
            fc_hidden: nn::DEFAULT_FC_HIDDEN,
        }
    }
}

impl ModelChoice {
    pub fn config(&self, n_mels: usize) -> ModelConfig {
        let base = match self.variable {
            Some(v) => ModelConfig::individual(v, self.task, n_mels),
            None => ModelConfig::shared(self.task, n_mels),
        };
        base.with_channels(self.conv_channels, self.fc_hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::Timestamp;
    use crate::weather::{CellIndex, WeatherSample};

    fn clip(id: &str, site: &str, rain: f64, strong: Option<bool>) -> LabeledClip {
        LabeledClip {
            clip_id: id.into(),
            site_id: site.into(),
            start_time: Timestamp(0),
            lat: 0.0,
            lon: 0.0,
            weak: WeatherSample {
                rainfall: rain,
                wind_speed: 3.0,
                temperature: 5.0,
                rel_humidity: 70.0,
                source_cell: CellIndex { time: 0, lat: 0, lon: 0 },
            },
            strong: strong.map(|r| StrongLabels { rain: Some(r), wind: None }),
        }
    }

    #[test]
    fn targets_by_head_kind() {
        let c = clip("a", "S1", 0.05, Some(false));
        let cfg = ModelConfig::shared(Task::Classification, 32);
        let t = targets_for(&c, &cfg, &Thresholds::default(), LabelSource::Weak).unwrap();
        assert_eq!(t, vec![1.0, 1.0, 5.0, 70.0]);
        let rain = ModelConfig::individual(Variable::Rain, Task::Classification, 32);
        assert_eq!(targets_for(&c, &rain, &Thresholds::default(), LabelSource::Strong).unwrap(), vec![0.0]);
        let wind = ModelConfig::individual(Variable::Wind, Task::Classification, 32);
        assert!(targets_for(&c, &wind, &Thresholds::default(), LabelSource::Strong).is_err());
        let reg = ModelConfig::individual(Variable::Rain, Task::Regression, 32);
        assert_eq!(targets_for(&c, &reg, &Thresholds::default(), LabelSource::Weak).unwrap(), vec![0.05]);
    }

    #[test]
    fn baseline_uses_strong_labels() {
        let mut clips = Vec::new();
        for (s, site) in ["A", "B", "C"].iter().enumerate() {
            for i in 0..10 {
                let rain = if i < 5 { 0.0 } else { 0.2 + 0.1 * s as f64 };
                clips.push(clip(&format!("{site}{i}"), site, rain, Some(i >= 5)));
            }
        }
        let split = SplitSpec {
            assignment: [("A", Partition::Train), ("B", Partition::Val), ("C", Partition::Test)]
                .into_iter()
                .map(|(s, p)| (s.to_string(), p))
                .collect(),
            seed: 0,
        };
        let b = baseline(&clips, &split, Variable::Rain, 0.001, Exec::Sequential).unwrap();
        assert_eq!(b.best_threshold, 0.0);
        assert_eq!(b.test_f1, 1.0);
        assert_eq!(b.test_auc, 1.0);
        assert!(baseline(&clips, &split, Variable::Temperature, 0.001, Exec::Sequential).is_err());
        clips[0].strong = None;
        assert!(baseline(&clips, &split, Variable::Rain, 0.001, Exec::Sequential).is_err());
    }
}
