use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfqlab::experiment::{compare, ExperimentConfig};

const TINY: &str = r#"
strategies = ["real", "single", "mixup"]
seeds = [0, 1]
calibration_size = 40

[world]
image_size = 8
train_per_class = 20
test_per_class = 10

[model]
input = [1, 8, 8]
conv_channels = [4]
d_feat = 8

[train]
epochs = 2

[quant]
steps = 6
batch_size = 8

[rpcfid]
n_half = 12
resamples = 1
"#;

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn dfqlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfqlab"))
        .current_dir(dir)
        .env_remove("DFQLAB_OUT")
        .args(args)
        .output()
        .unwrap()
}

fn run_root(dir: &Path) -> PathBuf {
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    dir.join("out").join(cfg.short_hash())
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn report_is_idempotent_and_matches_the_library() {
    let (dir, _) = setup();
    let first = dfqlab(dir.path(), &["--config", "tiny.toml", "report"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let root = run_root(dir.path());
    let report = fs::read(root.join("compare/report.json")).unwrap();
    let md = fs::read(root.join("report/report.md")).unwrap();
    assert_eq!(first.stdout, md);

    let again = dfqlab(dir.path(), &["--config", "tiny.toml", "report"]);
    assert!(again.status.success());
    assert!(!stderr(&again).contains("running"), "{}", stderr(&again));
    assert_eq!(again.stdout, first.stdout);

    let forced = dfqlab(dir.path(), &["--config", "tiny.toml", "--force", "report"]);
    assert!(forced.status.success());
    assert!(stderr(&forced).contains("calibrate: running"));
    assert_eq!(fs::read(root.join("compare/report.json")).unwrap(), report);
    assert_eq!(fs::read(root.join("report/report.md")).unwrap(), md);

    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    let lib = compare(&cfg, |_| ()).unwrap().to_json().unwrap() + "\n";
    assert_eq!(String::from_utf8(report).unwrap(), lib);

    for f in ["manifest.json", "config.toml", "compare/summary.csv", "gradtrace/trace_mixup_act_scale.dat", "rpcfid/rpcfid.csv"] {
        assert!(root.join(f).exists(), "{f}");
    }
    assert!(!root.join(".lock").exists());
}

#[test]
fn missing_checkpoint_before_calibrate_exits_4() {
    let (dir, _) = setup();
    for stage in ["gen-prompts", "synth"] {
        assert!(dfqlab(dir.path(), &["--config", "tiny.toml", stage]).status.success());
    }
    let o = dfqlab(dir.path(), &["--config", "tiny.toml", "calibrate"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("train/seed0/reference.ckpt"), "{}", stderr(&o));
}

#[test]
fn tampered_artifact_exits_4() {
    let (dir, _) = setup();
    for stage in ["gen-prompts", "synth"] {
        assert!(dfqlab(dir.path(), &["--config", "tiny.toml", stage]).status.success());
    }
    let victim = run_root(dir.path()).join("synth/seed1/calib_single.json");
    let mut text = fs::read_to_string(&victim).unwrap();
    text.push(' ');
    fs::write(&victim, text).unwrap();
    let o = dfqlab(dir.path(), &["--config", "tiny.toml", "train-ref"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("calib_single.json"), "{}", stderr(&o));
}

#[test]
fn config_and_usage_errors_have_distinct_codes() {
    let (dir, _) = setup();
    fs::write(dir.path().join("typo.toml"), "seedz = [1]\n").unwrap();
    assert_eq!(dfqlab(dir.path(), &["--config", "typo.toml", "synth"]).status.code(), Some(3));
    assert_eq!(dfqlab(dir.path(), &["--config", "absent.toml", "synth"]).status.code(), Some(3));
    fs::write(dir.path().join("bits.toml"), "[quant]\nweight_bits = 1\n").unwrap();
    assert_eq!(dfqlab(dir.path(), &["--config", "bits.toml", "synth"]).status.code(), Some(3));
    assert_eq!(dfqlab(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(dfqlab(dir.path(), &["synth", "--seed", "x"]).status.code(), Some(2));
    assert_eq!(dfqlab(dir.path(), &["--jobs", "0", "synth"]).status.code(), Some(3));
}

#[test]
fn seed_override_and_output_env() {
    let (dir, _) = setup();
    let base = dir.path().join("elsewhere");
    let o = Command::new(env!("CARGO_BIN_EXE_dfqlab"))
        .current_dir(dir.path())
        .env("DFQLAB_OUT", &base)
        .args(["--config", "tiny.toml", "--seed", "7", "gen-prompts"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = ExperimentConfig { seeds: vec![7], ..ExperimentConfig::from_toml(TINY).unwrap() };
    let root = base.join(cfg.short_hash());
    assert!(root.join("prompts/seed7/mixup.jsonl").exists());
    assert!(!root.join("prompts/seed0").exists());
}

#[test]
fn locked_directory_is_refused() {
    let (dir, _) = setup();
    let root = run_root(dir.path());
    fs::create_dir_all(&root).unwrap();
    fs::write(root.join(".lock"), "1\n").unwrap();
    let o = dfqlab(dir.path(), &["--config", "tiny.toml", "gen-prompts"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("locked"));
}
