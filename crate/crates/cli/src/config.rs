use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use geophony::audio_io::{DEFAULT_CLIP_SECONDS, DEFAULT_MAX_CLIPPED_FRACTION};
use geophony::datasets::{DEFAULT_SPLIT_RATIOS, DEFAULT_SWEEP_STEP};
use geophony::features::FeatureConfig;
use geophony::nn::TrainConfig;
use geophony::pipeline::{LabelSource, ModelChoice, Thresholds};
use geophony::synth::ScenarioConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub audio_dir: Option<PathBuf>,
    pub sites: Option<PathBuf>,
    pub grid: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub strong: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub clip_seconds: f64,
    pub max_clipped_fraction: f64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        IngestConfig {
            clip_seconds: DEFAULT_CLIP_SECONDS,
            max_clipped_fraction: DEFAULT_MAX_CLIPPED_FRACTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: DEFAULT_SPLIT_RATIOS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub step: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            step: DEFAULT_SWEEP_STEP,
        }
    }
}

/// Whole-run configuration; every section is optional in the TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// 0 lets the thread pool pick.
    pub workers: usize,
    pub label_source: LabelSource,
    pub paths: Paths,
    pub ingest: IngestConfig,
    pub features: FeatureConfig,
    pub model: ModelChoice,
    pub train: TrainConfig,
    pub thresholds: Thresholds,
    pub split: SplitConfig,
    pub baseline: BaselineConfig,
    pub synth: ScenarioConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            workers: 0,
            label_source: LabelSource::Weak,
            paths: Paths::default(),
            ingest: IngestConfig::default(),
            features: FeatureConfig::default(),
            model: ModelChoice::default(),
            train: TrainConfig::default(),
            thresholds: Thresholds::default(),
            split: SplitConfig::default(),
            baseline: BaselineConfig::default(),
            synth: ScenarioConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    pub fn manifest(&self) -> PathBuf {
        self.paths.manifest.clone().unwrap_or_else(|| self.out("manifest.csv"))
    }

    pub fn labels(&self) -> PathBuf {
        self.paths.labels.clone().unwrap_or_else(|| self.out("labels.csv"))
    }

    pub fn split_file(&self) -> PathBuf {
        self.paths.split.clone().unwrap_or_else(|| self.out("split.csv"))
    }

    pub fn features_dir(&self) -> PathBuf {
        self.paths.features.clone().unwrap_or_else(|| self.out("features"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.out("checkpoint.gwx"))
    }

    /// Seeds every stage from the run seed.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.n_mels == 0 {
            bail!("features.n_mels must be positive");
        }
        let r = self.split.ratios;
        if r.iter().any(|&x| !(x > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            bail!("split ratios {r:?} must be positive and sum to 1");
        }
        if !(self.baseline.step > 0.0) {
            bail!("baseline step must be positive");
        }
        if !(self.ingest.clip_seconds > 0.0) {
            bail!("ingest.clip_seconds must be positive");
        }
        self.train.validate()?;
        self.model.config(self.features.n_mels).validate()?;
        self.thresholds.spec(geophony::weather::Variable::Rain)?;
        self.thresholds.spec(geophony::weather::Variable::Wind)?;
        Ok(())
    }
}

pub fn require_file(what: &str, p: &Path) -> Result<()> {
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(())
}
