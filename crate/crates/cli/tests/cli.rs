use std::path::Path;
use std::process::{Command, Output};

use sijgrade::volume::{save_volume, CtVolume, Grid};

const TINY: &str = r#"
seed = 5

[unet]
base_channels = 4
learning_rate = 0.001
pos_weight = 5.0
patch_size = 32
batch_size = 4
patches_per_epoch = 16
epochs = 1
seed = 0

[grader]
num_classes = 3
channels = [4, 8, 8]
hidden = 16
input_rows = 100
input_cols = 200
learning_rate = 0.01
momentum = 0.9
batch_size = 16
epochs = 1
seed = 0

[case]
n_aug = 1
ensemble = false
"#;

fn sijgrade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sijgrade"))
        .args(args)
        .env("SIJGRADE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&sijgrade(&[])), 2);
    assert_eq!(code(&sijgrade(&["grade", "--volume", "v", "--models", "m", "--alpha", "0.1"])), 2);
    assert_eq!(code(&sijgrade(&["frobnicate"])), 2);
}

#[test]
fn missing_and_malformed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    let out = dir.path().join("out");
    let o = sijgrade(&["phantom-gen", "--spec", s(&missing), "--out", s(&out)]);
    assert_eq!(code(&o), 3);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "n = \"many\"").unwrap();
    let o = sijgrade(&["phantom-gen", "--spec", s(&bad), "--out", s(&out)]);
    assert_eq!(code(&o), 2);

    let o = sijgrade(&["grade", "--volume", s(&bad), "--models", s(dir.path())]);
    assert_eq!(code(&o), 7, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = root.join("spec.toml");
    std::fs::write(&spec, "n = 6\nseed = 3\n").unwrap();
    let cohort = root.join("cohort");
    let o = sijgrade(&["phantom-gen", "--spec", s(&spec), "--out", s(&cohort)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = cohort.join("cohort.json");
    assert!(manifest.exists());
    assert!(cohort.join("case005_labels.json").exists());

    let overlap = root.join("overlap.toml");
    std::fs::write(&overlap, format!("{TINY}\n[split]\ntrain = [0, 1, 2]\nval = [2]\ntest = [5]\n")).unwrap();
    let models = root.join("models");
    let o = sijgrade(&["train", "--cohort", s(&manifest), "--config", s(&overlap), "--out", s(&models)]);
    assert_eq!(code(&o), 2);
    assert!(!models.join("models.json").exists());

    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, format!("{TINY}\n[split]\ntrain = [0, 1, 2, 3]\nval = [4]\ntest = [5]\n")).unwrap();
    let o = sijgrade(&["train", "--cohort", s(&manifest), "--config", s(&cfg), "--out", s(&models)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["models.json", "unet.bin", "grader.bin", "case3.json", "training_log.json", "test_manifest.json"] {
        assert!(models.join(f).exists(), "{f}");
    }

    let report = root.join("case005.report.json");
    let vol = cohort.join("case005.json");
    let o = sijgrade(&["grade", "--volume", s(&vol), "--models", s(&models), "--tau", "0.3", "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["case"], "case005");
    assert_eq!(r["joints"].as_array().unwrap().len(), 2);
    assert_eq!(r["thresholds"]["tau"], 0.3);

    let test_manifest = models.join("test_manifest.json");
    let eval_out = root.join("eval.json");
    let o = sijgrade(&["eval", "--models", s(&models), "--manifest", s(&test_manifest), "--out", s(&eval_out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let e: serde_json::Value = serde_json::from_slice(&std::fs::read(&eval_out).unwrap()).unwrap();
    assert_eq!(e["n_joints"], 2);

    let air = root.join("air.json");
    let grid = Grid::new([40, 40, 12], [2.0, 2.0, 3.0]).unwrap();
    save_volume(&CtVolume::filled(grid, -1000).unwrap(), &air).unwrap();
    let o = sijgrade(&["grade", "--volume", s(&air), "--models", s(&models)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!root.join("air.report.json").exists());
}
