mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};

use geophony::attenuation::{absorption_db_per_km, AtmosphereState};
use geophony::datasets::{read_labels, SplitSpec};
use geophony::nn::{Checkpoint, Task};
use geophony::pipeline::{self, LabelSource, Prepared};
use geophony::synth::synth_corpus;
use geophony::weather::Variable;
use geophony::Exec;

use config::{require_file, RunConfig};

/// Frequencies and atmospheres of the attenuation reference table.
const TABLE_FREQS: [f64; 2] = [125.0, 4000.0];
const TABLE_ATMOSPHERES: [(f64, f64); 4] = [(0.3, 77.0), (9.3, 77.0), (0.3, 91.0), (9.3, 91.0)];

#[derive(Parser, Debug)]
#[command(name = "geophony", version, about = "Rain and wind detection from soundscape recordings")]
struct Cli {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut SITE_YYYYMMDD_HHMMSS.wav recordings into clips and write a manifest.
    Ingest {
        #[arg(long)]
        audio_dir: Option<PathBuf>,
        /// CSV with site_id,lat,lon.
        #[arg(long)]
        sites: Option<PathBuf>,
        #[arg(long)]
        clip_seconds: Option<f64>,
        #[arg(long)]
        max_clipped: Option<f64>,
    },
    /// Cache log-mel spectrograms for every manifest clip.
    Features {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        n_mels: Option<usize>,
    },
    /// Attach hourly grid values (and optional strong labels) to clips.
    Align {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Manifest-format CSV with rain_strong/wind_strong columns.
        #[arg(long)]
        strong: Option<PathBuf>,
    },
    /// Assign whole sites to train/val/test.
    Split {
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Three comma-separated ratios, e.g. 0.6,0.2,0.2.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Threshold-sweep baseline of the grid values against strong labels.
    Baseline {
        #[arg(long)]
        variable: Variable,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Train a model on the train partition, selecting on val.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on the test partition.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Labels the checkpoint was trained on.
        #[arg(long)]
        label_source: Option<LabelSource>,
    },
    /// Atmospheric absorption in dB/km.
    Attenuation {
        /// Frequency in Hz; without it the reference table is printed.
        #[arg(long)]
        freq: Option<f64>,
        #[arg(long, allow_hyphen_values = true, requires = "rh")]
        temp: Option<f64>,
        #[arg(long, requires = "temp")]
        rh: Option<f64>,
        /// Pressure in kPa.
        #[arg(long)]
        pressure: Option<f64>,
    },
    /// Write a synthetic corpus (audio, manifest, grid, sites, truth).
    Synth {
        #[arg(long)]
        sites: Option<usize>,
        #[arg(long)]
        hours: Option<usize>,
        #[arg(long)]
        clips_per_hour: Option<usize>,
        #[arg(long)]
        sample_rate: Option<u32>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Individual model for this variable.
    #[arg(long, conflicts_with = "shared")]
    variable: Option<Variable>,
    /// Shared model over all four variables.
    #[arg(long)]
    shared: bool,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    label_source: Option<LabelSource>,
}

/// Errors found before any stage work starts exit with 1, failures while
/// running with 2.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Stage<T> {
    fn runtime(self) -> Result<T, Failure>;
    fn validation(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }

    fn validation(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Validation(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn settle_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn set_opt<T: Clone>(slot: &mut Option<T>, v: &Option<T>) {
    if v.is_some() {
        *slot = v.clone();
    }
}

fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
    if let Some(v) = v {
        *slot = v.clone();
    }
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    set_opt(&mut cfg.paths.labels, &d.labels);
    set_opt(&mut cfg.paths.split, &d.split);
    set_opt(&mut cfg.paths.features, &d.features);
}

/// Folds subcommand flags into the configuration.
fn apply_flags(cfg: &mut RunConfig, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Ingest {
            audio_dir,
            sites,
            clip_seconds,
            max_clipped,
        } => {
            set_opt(&mut cfg.paths.audio_dir, audio_dir);
            set_opt(&mut cfg.paths.sites, sites);
            set(&mut cfg.ingest.clip_seconds, clip_seconds);
            set(&mut cfg.ingest.max_clipped_fraction, max_clipped);
        }
        Command::Features { manifest, n_mels } => {
            set_opt(&mut cfg.paths.manifest, manifest);
            set(&mut cfg.features.n_mels, n_mels);
        }
        Command::Align { manifest, grid, strong } => {
            set_opt(&mut cfg.paths.manifest, manifest);
            set_opt(&mut cfg.paths.grid, grid);
            set_opt(&mut cfg.paths.strong, strong);
        }
        Command::Split { labels, ratios } => {
            set_opt(&mut cfg.paths.labels, labels);
            if let Some(r) = ratios {
                cfg.split.ratios = r
                    .as_slice()
                    .try_into()
                    .map_err(|_| anyhow!("--ratios takes three values, got {}", r.len()))?;
            }
        }
        Command::Baseline { data, step, .. } => {
            apply_data(cfg, data);
            set(&mut cfg.baseline.step, step);
        }
        Command::Train {
            data,
            model,
            epochs,
            patience,
            batch_size,
            lr,
            checkpoint,
        } => {
            apply_data(cfg, data);
            if model.shared {
                cfg.model.variable = None;
            } else if model.variable.is_some() {
                cfg.model.variable = model.variable;
            }
            set(&mut cfg.model.task, &model.task);
            set(&mut cfg.label_source, &model.label_source);
            set(&mut cfg.train.max_epochs, epochs);
            set(&mut cfg.train.patience, patience);
            set(&mut cfg.train.batch_size, batch_size);
            set(&mut cfg.train.learning_rate, lr);
            set_opt(&mut cfg.paths.checkpoint, checkpoint);
        }
        Command::Evaluate {
            data,
            checkpoint,
            label_source,
        } => {
            apply_data(cfg, data);
            set_opt(&mut cfg.paths.checkpoint, checkpoint);
            set(&mut cfg.label_source, label_source);
        }
        Command::Attenuation { .. } => {}
        Command::Synth {
            sites,
            hours,
            clips_per_hour,
            sample_rate,
        } => {
            set(&mut cfg.synth.n_sites, sites);
            set(&mut cfg.synth.hours, hours);
            set(&mut cfg.synth.clips_per_hour, clips_per_hour);
            set(&mut cfg.synth.acoustic.sample_rate, sample_rate);
        }
    }
    Ok(())
}

#[cfg(feature = "parallel")]
fn setup_workers(n: usize) -> Result<()> {
    use anyhow::Context;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn setup_workers(_: usize) -> Result<()> {
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = settle_config(&cli).validation()?;
    apply_flags(&mut cfg, &cli.command).validation()?;
    cfg.propagate_seed();
    cfg.validate().validation()?;
    setup_workers(cfg.workers).validation()?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.command {
        Command::Attenuation {
            freq,
            temp,
            rh,
            pressure,
        } => attenuation(*freq, *temp, *rh, *pressure),
        Command::Synth { .. } => {
            let corpus = synth_corpus(&cfg.synth).validation()?;
            std::fs::create_dir_all(&cfg.out_dir).runtime()?;
            corpus.write(&cfg.out_dir, exec).runtime()?;
            let rain = corpus.plans.iter().filter(|p| p.truth.rain).count();
            println!(
                "synth: {} clips from {} sites written to {} ({} with rain)",
                corpus.len(),
                cfg.synth.n_sites,
                cfg.out_dir.display(),
                rain
            );
            Ok(())
        }
        Command::Ingest { .. } => {
            let audio = cfg.paths.audio_dir.clone().ok_or_else(|| anyhow!("--audio-dir is required")).validation()?;
            let sites = cfg.paths.sites.clone().ok_or_else(|| anyhow!("--sites is required")).validation()?;
            require_file("audio directory", &audio).validation()?;
            require_file("site table", &sites).validation()?;
            let table = pipeline::read_sites(&sites).validation()?;
            std::fs::create_dir_all(&cfg.out_dir).runtime()?;
            let s = pipeline::ingest(
                &audio,
                &table,
                &cfg.out_dir,
                cfg.ingest.clip_seconds,
                cfg.ingest.max_clipped_fraction,
                cfg.seed,
                exec,
            )
            .runtime()?;
            println!(
                "ingest: {} recordings -> {} clips ({} rejected for clipping), manifest {}",
                s.recordings,
                s.clips,
                s.rejected_clipped,
                cfg.out("manifest.csv").display()
            );
            Ok(())
        }
        Command::Features { .. } => {
            let manifest = cfg.manifest();
            require_file("manifest", &manifest).validation()?;
            let dir = cfg.out("features");
            let n = pipeline::extract_features(&manifest, &dir, &cfg.features, cfg.seed, exec).runtime()?;
            println!("features: {n} spectrograms cached in {}", dir.display());
            Ok(())
        }
        Command::Align { .. } => {
            let manifest = cfg.manifest();
            let grid = cfg.paths.grid.clone().ok_or_else(|| anyhow!("--grid is required")).validation()?;
            require_file("manifest", &manifest).validation()?;
            require_file("grid", &grid).validation()?;
            let strong = match &cfg.paths.strong {
                Some(p) => {
                    require_file("strong-label file", p).validation()?;
                    Some(pipeline::read_strong_labels(p).runtime()?)
                }
                None => None,
            };
            let built = pipeline::align(&manifest, &grid, strong.as_ref(), &cfg.out_dir, cfg.seed).runtime()?;
            println!(
                "align: {} clips labeled, {} rejected, written to {}",
                built.clips.len(),
                built.rejects.len(),
                cfg.out("labels.csv").display()
            );
            Ok(())
        }
        Command::Split { .. } => {
            let labels = cfg.labels();
            require_file("labels", &labels).validation()?;
            std::fs::create_dir_all(&cfg.out_dir).runtime()?;
            let out = cfg.out("split.csv");
            let s = pipeline::split(&labels, cfg.split.ratios, cfg.seed, &out).runtime()?;
            println!(
                "split: {} train / {} val / {} test sites, written to {}",
                s.sites_in(geophony::datasets::Partition::Train).len(),
                s.sites_in(geophony::datasets::Partition::Val).len(),
                s.sites_in(geophony::datasets::Partition::Test).len(),
                out.display()
            );
            Ok(())
        }
        Command::Baseline { variable, .. } => {
            cfg.thresholds.spec(*variable).validation()?;
            let (labels, split) = (cfg.labels(), cfg.split_file());
            require_file("labels", &labels).validation()?;
            require_file("split", &split).validation()?;
            let clips = read_labels(&labels).runtime()?;
            let split = SplitSpec::read(&split).runtime()?;
            let b = pipeline::baseline(&clips, &split, *variable, cfg.baseline.step, exec).runtime()?;
            println!(
                "baseline {}: threshold {} {} train F1 {:.4} test F1 {:.4} test AUC {:.4}",
                variable.name(),
                b.best_threshold,
                variable.unit(),
                b.train_f1,
                b.test_f1,
                b.test_auc
            );
            Ok(())
        }
        Command::Train { .. } => {
            let data = prepared(&cfg, exec)?;
            let model = cfg.model.config(cfg.features.n_mels);
            let (ck, history) =
                pipeline::train(&data, model, &cfg.thresholds, cfg.label_source, &cfg.train, exec).runtime()?;
            let path = cfg.checkpoint();
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).runtime()?;
            }
            ck.save(&path).runtime()?;
            let hist = cfg.out("history.csv");
            std::fs::write(&hist, format!("# {}\n{}", pipeline::seed_comment(cfg.seed), history.to_csv())).runtime()?;
            println!(
                "train: {} epochs, best epoch {} (val metric {:.4}), checkpoint {}",
                history.len(),
                ck.epoch,
                ck.metric,
                path.display()
            );
            Ok(())
        }
        Command::Evaluate { .. } => {
            let path = cfg.checkpoint();
            require_file("checkpoint", &path).validation()?;
            let ck = Checkpoint::load(&path).runtime()?;
            let data = prepared(&cfg, exec)?;
            let comment = pipeline::seed_comment(cfg.seed);
            let class = pipeline::evaluate_classification(&ck, &data, &cfg.thresholds, cfg.label_source, cfg.baseline.step, exec)
                .runtime()?;
            let reg = pipeline::evaluate_regression(&ck, &data, exec).runtime()?;
            if !class.rows.is_empty() {
                class.write_csv(cfg.out("classification.csv"), Some(&comment)).runtime()?;
                print!("{}", class.to_table());
            }
            if !reg.rows.is_empty() {
                reg.write_csv(cfg.out("regression.csv"), Some(&comment)).runtime()?;
                print!("{}", reg.to_table());
            }
            println!(
                "evaluate: {} classification and {} regression rows written to {}",
                class.rows.len(),
                reg.rows.len(),
                cfg.out_dir.display()
            );
            Ok(())
        }
    }
}

fn prepared(cfg: &RunConfig, exec: Exec) -> Result<Prepared, Failure> {
    let (labels, split, features) = (cfg.labels(), cfg.split_file(), cfg.features_dir());
    require_file("labels", &labels).validation()?;
    require_file("split", &split).validation()?;
    require_file("feature index", &features.join("index.csv")).validation()?;
    Prepared::load(&labels, &split, &features, &cfg.features, exec).runtime()
}

fn attenuation(freq: Option<f64>, temp: Option<f64>, rh: Option<f64>, pressure: Option<f64>) -> Result<(), Failure> {
    let atm = |t: f64, h: f64| -> Result<AtmosphereState, Failure> {
        match pressure {
            Some(p) => AtmosphereState::with_pressure(t, h, p),
            None => AtmosphereState::new(t, h),
        }
        .validation()
    };
    match (freq, temp, rh) {
        (Some(f), Some(t), Some(h)) => {
            if !(f > 0.0) {
                return Err(Failure::Validation(anyhow!("frequency must be positive")));
            }
            println!("{:.3}", absorption_db_per_km(f, &atm(t, h)?));
        }
        (Some(_), _, _) => return Err(Failure::Validation(anyhow!("--freq needs --temp and --rh"))),
        (None, ..) => {
            let rows: Vec<(f64, f64)> = match (temp, rh) {
                (Some(t), Some(h)) => vec![(t, h)],
                _ => TABLE_ATMOSPHERES.to_vec(),
            };
            println!("{:<8} {:<8} {:>10} {:>10}", "T (°C)", "RH (%)", "125 Hz", "4000 Hz");
            for (t, h) in rows {
                let a = atm(t, h)?;
                println!(
                    "{:<8} {:<8} {:>10.3} {:>10.3}",
                    t,
                    h,
                    absorption_db_per_km(TABLE_FREQS[0], &a),
                    absorption_db_per_km(TABLE_FREQS[1], &a)
                );
            }
        }
    }
    Ok(())
}
