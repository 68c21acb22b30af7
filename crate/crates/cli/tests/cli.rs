use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
seed = 11
[synth]
n_sites = 5
hours = 6
clips_per_hour = 2
[synth.rain]
dry_mean_min = 90.0
wet_mean_min = 120.0
[synth.acoustic]
sample_rate = 8000
clip_seconds = 2.0
[ingest]
clip_seconds = 2.0
[features]
n_mels = 16
[model]
variable = "rain"
conv_channels = [2, 2, 2, 2]
fc_hidden = 4
[train]
max_epochs = 2
patience = 1
"#;

fn geophony(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geophony"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = geophony(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn attenuation_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["attenuation", "--freq", "4000", "--temp", "9.3", "--rh", "91"]);
    let a: f64 = out.trim().parse().unwrap();
    assert!((a - 26.46).abs() <= 0.15 * 26.46, "{a}");
}

#[test]
fn attenuation_table_lists_four_atmospheres() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["attenuation"]);
    assert_eq!(out.lines().count(), 5);
    assert!(out.contains("4000 Hz"));
}

#[test]
fn negative_temperature_parses() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["attenuation", "--freq", "125", "--temp", "-3.1", "--rh", "90"]);
    assert!(out.trim().parse::<f64>().unwrap() > 0.0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(geophony(dir.path(), &["--bogus"]).status.code(), Some(1));
    assert_eq!(geophony(dir.path(), &["attenuation", "--freq", "1000", "--temp", "5", "--rh", "150"]).status.code(), Some(1));
    assert_eq!(geophony(dir.path(), &["baseline", "--variable", "temp"]).status.code(), Some(1));
    assert_eq!(geophony(dir.path(), &["split", "--ratios", "0.5,0.5"]).status.code(), Some(1));
    assert_eq!(geophony(dir.path(), &["features"]).status.code(), Some(1));
    assert_eq!(geophony(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "seeed = 3\n").unwrap();
    assert_eq!(geophony(dir.path(), &["--config", "bad.toml", "attenuation"]).status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    ok(d, &["--config", "run.toml", "--out", "corpus", "synth"]);
    ok(d, &["--config", "run.toml", "--out", "w", "features", "--manifest", "corpus/manifest.csv"]);
    ok(d, &["--config", "run.toml", "--out", "w", "align", "--manifest", "corpus/manifest.csv", "--grid", "corpus/grid.csv"]);
    ok(d, &["--config", "run.toml", "--out", "w", "split"]);
    std::fs::write(d.join("w/checkpoint.gwx"), b"GWX1garbage").unwrap();
    assert_eq!(geophony(d, &["--config", "run.toml", "--out", "w", "evaluate"]).status.code(), Some(2));
}

fn full_run(d: &Path) -> Vec<(String, Vec<u8>)> {
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    let c = ["--config", "run.toml"];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };
    let run = |rest: &[&str]| {
        let args = with(rest);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(d, &refs)
    };
    run(&["--out", "corpus", "synth"]);
    let s = run(&["--out", "w", "ingest", "--audio-dir", "corpus/audio", "--sites", "corpus/sites.csv"]);
    assert!(s.starts_with("ingest: 60 recordings -> 60 clips"), "{s}");
    run(&["--out", "w", "features"]);
    run(&["--out", "w", "align", "--grid", "corpus/grid.csv", "--strong", "corpus/manifest.csv"]);
    run(&["--out", "w", "split", "--ratios", "0.6,0.2,0.2"]);
    let b = run(&["--out", "w", "baseline", "--variable", "rain"]);
    assert!(b.starts_with("baseline rain: threshold"), "{b}");
    run(&["--out", "w", "train"]);
    let e = run(&["--out", "w", "evaluate"]);
    assert!(e.contains("Baseline") && e.contains("Individual"), "{e}");
    let mut files = Vec::new();
    for name in [
        "manifest.csv",
        "labels.csv",
        "rejects.csv",
        "split.csv",
        "features/index.csv",
        "checkpoint.gwx",
        "history.csv",
        "classification.csv",
    ] {
        files.push((name.to_string(), std::fs::read(d.join("w").join(name)).unwrap()));
    }
    files.push(("baseline".into(), b.into_bytes()));
    files
}

#[test]
fn pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = full_run(a.path());
    let rb = full_run(b.path());
    for ((name, x), (_, y)) in ra.iter().zip(&rb) {
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn sequential_flag_matches_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();
    ok(d, &["--config", "run.toml", "--out", "corpus", "synth"]);
    let m = "corpus/manifest.csv";
    ok(d, &["--config", "run.toml", "--out", "p", "features", "--manifest", m]);
    ok(d, &["--config", "run.toml", "--out", "s", "--sequential", "features", "--manifest", m]);
    let idx = std::fs::read(d.join("p/features/index.csv")).unwrap();
    assert_eq!(idx, std::fs::read(d.join("s/features/index.csv")).unwrap());
    for entry in std::fs::read_dir(d.join("p/features")).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(d.join("p/features").join(&name)).unwrap(),
            std::fs::read(d.join("s/features").join(&name)).unwrap()
        );
    }
}
