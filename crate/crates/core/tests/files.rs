use std::collections::HashMap;

use geophony::audio_io::{read_recording, read_wav, segment, write_wav};
use geophony::datasets::{read_labels, read_manifest};
use geophony::features::{read_cache, write_cache, FeatureConfig, LogMelExtractor};
use geophony::nn::{Checkpoint, CnnModel, ModelConfig, Task};
use geophony::pipeline::{self, Prepared};
use geophony::synth::{synth_corpus, AcousticConfig, RainProcess, ScenarioConfig, WeakLabelModel};
use geophony::weather::{Variable, WeatherGrid};
use geophony::Exec;

fn scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_sites: 4,
        hours: 3,
        clips_per_hour: 2,
        seed,
        acoustic: AcousticConfig {
            sample_rate: 8000,
            clip_seconds: 2.0,
            ..Default::default()
        },
        rain: RainProcess {
            dry_mean_min: 60.0,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn wav_round_trip_and_segmentation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("S07_20200102_030405.wav");
    let samples: Vec<i16> = (0..25_000).map(|i| ((i * 37) % 2000) as i16 - 1000).collect();
    write_wav(&path, &samples, 8000).unwrap();
    assert_eq!(read_wav(&path).unwrap().samples, samples);
    let rec = read_recording(&path).unwrap();
    let clips = segment(&rec, 1.0);
    assert_eq!(clips.len(), 3);
    assert_eq!(clips[1].samples, samples[8000..16000]);
    assert_eq!(clips[2].start_time.0 - clips[0].start_time.0, 2);
}

#[test]
fn written_corpus_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&scenario(1)).unwrap();
    corpus.write(dir.path(), Exec::Parallel).unwrap();
    let manifest = read_manifest(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest.len(), corpus.len());
    for (e, p) in manifest.iter().zip(&corpus.plans) {
        assert_eq!(e.clip_id, p.clip_id);
        assert_eq!(e.strong.get(Variable::Rain), Some(p.truth.rain));
        let wave = read_wav(dir.path().join(&e.wav_path)).unwrap();
        assert_eq!(wave.samples, corpus.render(p).unwrap().samples);
    }
    let grid = WeatherGrid::load(dir.path().join("grid.csv")).unwrap();
    for p in &corpus.plans {
        let a = grid.lookup(p.lat, p.lon, p.start_time).unwrap();
        let b = corpus.weak_grid.lookup(p.lat, p.lon, p.start_time).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn exact_weak_labels_match_truth() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = scenario(2);
    cfg.weak = WeakLabelModel::exact();
    let corpus = synth_corpus(&cfg).unwrap();
    corpus.write(dir.path(), Exec::Sequential).unwrap();
    let strong = pipeline::read_strong_labels(&dir.path().join("manifest.csv")).unwrap();
    let work = dir.path().join("work");
    std::fs::create_dir_all(&work).unwrap();
    pipeline::align(&dir.path().join("manifest.csv"), &dir.path().join("grid.csv"), Some(&strong), &work, 2).unwrap();
    let clips = read_labels(work.join("labels.csv")).unwrap();
    assert_eq!(clips.len(), corpus.len());
    for c in &clips {
        let weak_rain = c.weak.get(Variable::Rain) > 0.0;
        assert_eq!(Some(weak_rain), c.strong.unwrap().get(Variable::Rain), "{}", c.clip_id);
    }
}

#[test]
fn feature_cache_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&scenario(3)).unwrap();
    let clip = corpus.render(&corpus.plans[0]).unwrap();
    let ex = LogMelExtractor::new(&FeatureConfig { n_mels: 24, ..Default::default() }, 8000).unwrap();
    let spec = ex.log_mel(&clip.samples).unwrap();
    let path = dir.path().join("x.lmel");
    write_cache(&path, &spec).unwrap();
    let back = read_cache(&path, &ex).unwrap();
    assert_eq!(back.shape(), spec.shape());
    for (a, b) in back.values.iter().zip(&spec.values) {
        assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
    }
}

#[test]
fn checkpoint_file_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::shared(Task::Classification, 16).with_channels([2, 2, 4, 4], 8);
    let model = CnnModel::init(cfg, 4).unwrap();
    let ck = Checkpoint::untrained(&model, 4);
    let path = dir.path().join("m.gwx");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.params, ck.params);
    let corpus = synth_corpus(&scenario(4)).unwrap();
    let ex = LogMelExtractor::new(&FeatureConfig { n_mels: 16, ..Default::default() }, 8000).unwrap();
    let specs: Vec<_> = corpus.plans[..3]
        .iter()
        .map(|p| ex.log_mel(&corpus.render(p).unwrap().samples).unwrap())
        .collect();
    let refs: Vec<_> = specs.iter().collect();
    assert_eq!(
        geophony::nn::predict(&ck, &refs, Exec::Sequential).unwrap(),
        geophony::nn::predict(&back, &refs, Exec::Parallel).unwrap()
    );
}

#[test]
fn prepared_data_matches_split() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_corpus(&scenario(5)).unwrap().write(d, Exec::Parallel).unwrap();
    let features = FeatureConfig { n_mels: 16, ..Default::default() };
    let n = pipeline::extract_features(&d.join("manifest.csv"), &d.join("features"), &features, 5, Exec::Parallel).unwrap();
    assert_eq!(n, 24);
    pipeline::align(&d.join("manifest.csv"), &d.join("grid.csv"), None, d, 5).unwrap();
    let split = pipeline::split(&d.join("labels.csv"), [0.5, 0.25, 0.25], 5, &d.join("split.csv")).unwrap();
    let data = Prepared::load(&d.join("labels.csv"), &d.join("split.csv"), &d.join("features"), &features, Exec::Parallel).unwrap();
    assert_eq!(data.specs.len(), data.clips.len());
    let mut per_site: HashMap<&str, usize> = HashMap::new();
    for c in &data.clips {
        *per_site.entry(c.site_id.as_str()).or_default() += 1;
        assert!(split.partition_of(&c.site_id).is_some());
    }
    assert_eq!(per_site.len(), 4);
    assert!(pipeline::baseline(&data.clips, &data.split, Variable::Rain, 0.001, Exec::Sequential).is_err());
}
