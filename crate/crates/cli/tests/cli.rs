use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset.phantom]
image_size = 32
n_subjects = 6
slices_per_subject = 2

[synthesis]
epochs = 1

[segmentation]
epochs = 1

[matrix]
folds = 2
workers = 1

[matrix.split]
train = 0.3
validation = 0.2
test = 0.5
"#;

fn synthseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthseg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = synthseg(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn default_config_round_trips_and_lists_the_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let toml = ok(&["config"]);
    let path = dir.path().join("run.toml");
    std::fs::write(&path, toml).unwrap();
    let list = ok(&["matrix", "list", "--config", s(&path)]);
    assert_eq!(list.lines().count(), 18);
    assert!(list.lines().any(|l| l.starts_with("single_F3from1\t")));
}

#[test]
fn unknown_config_keys_and_bad_tasks_fail() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[synthesis]\nepoch = 3\n").unwrap();
    let out = synthseg(&["matrix", "list", "--config", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let work = dir.path().join("work");
    let out = synthseg(&["synth", "train", "--config", s(&cfg), "--workdir", s(&work), "--task", "MRI2:MRI2", "--fold", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synthesize_segment_and_score_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let work = dir.path().join("work");
    let c = s(&cfg);
    let w = s(&work);

    let raw = dir.path().join("raw");
    ok(&["phantom", "generate", "--config", c, "--out", s(&raw)]);
    let again = dir.path().join("raw_again");
    ok(&["phantom", "generate", "--spec", s(&raw.join("phantom.json")), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(raw.join("sub-001/slice01_MRI2.nii")).unwrap(),
        std::fs::read(again.join("sub-001/slice01_MRI2.nii")).unwrap()
    );
    let pre = dir.path().join("pre");
    ok(&["preprocess", "--config", c, "--in", s(&raw), "--out", s(&pre)]);
    assert!(pre.join("catalog.json").exists());

    let quality: serde_json::Value =
        serde_json::from_str(&ok(&["synth", "train", "--config", c, "--workdir", w, "--task", "MRI1:MRI3", "--fold", "0"])).unwrap();
    assert!(quality["ssim"].as_f64().is_some());

    let slice = pre.join("sub-000").join("slice00_MRI1.nii");
    let fake = dir.path().join("fake_MRI3.nii");
    let model = work.join("models/synthesis/MRI1-MRI3/fold0.ckpt");
    let curves = std::fs::read_to_string(model.with_extension("curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,discriminator,"));
    assert_eq!(curves.lines().count(), 2);
    ok(&["synth", "apply", "--model", s(&model), "--in", s(&slice), "--out", s(&fake)]);
    assert!(fake.exists());

    let report: serde_json::Value =
        serde_json::from_str(&ok(&["seg", "train", "--config", c, "--workdir", w, "--experiment", "single_R2", "--fold", "1"])).unwrap();
    assert_eq!(report["fold"], 1);
    let seg_model = work.join("models/segmentation/single_R2/fold1.ckpt");
    let pred = dir.path().join("pred.nii");
    let mri2 = pre.join("sub-000").join("slice00_MRI2.nii");
    ok(&["seg", "predict", "--model", s(&seg_model), "--in", s(&mri2), "--out", s(&pred)]);
    let wrong = synthseg(&["seg", "predict", "--model", s(&seg_model), "--in", s(&slice), "--out", s(&pred)]);
    assert!(!wrong.status.success());

    let gt = pre.join("sub-000").join("slice00_labels.nii");
    let csv = ok(&["metrics", "eval", "--pred", s(&gt), "--gt", s(&gt), "--classes", "muscle,marrow"]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "image,MUSCLE DSC,MUSCLE ACC,MUSCLE SENS,MUSCLE SPEC,BONE MARROW DSC,BONE MARROW ACC,BONE MARROW SENS,BONE MARROW SPEC");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("mean,1,1,1,1,1,"), "{csv}");

    // Directory mode pairs files by relative path.
    let (pd, gd) = (dir.path().join("pred_dir"), dir.path().join("gt_dir"));
    for d in [&pd, &gd] {
        std::fs::create_dir_all(d.join("a")).unwrap();
        std::fs::copy(&gt, d.join("a").join("x.nii")).unwrap();
    }
    std::fs::copy(&pred, pd.join("b.nii")).unwrap();
    std::fs::copy(&gt, gd.join("b.nii")).unwrap();
    let report = dir.path().join("report.csv");
    ok(&["metrics", "eval", "--pred", s(&pd), "--gt", s(&gd), "--out", s(&report)]);
    let text = std::fs::read_to_string(&report).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("a/x.nii,1,1,1,1,"));
    assert!(rows[2].starts_with("b.nii,"));
    assert_eq!(rows[0].split(',').count(), 17);

    ok(&["matrix", "run", "--config", c, "--workdir", w, "--only", "single_R1"]);
    let table = ok(&["matrix", "report", "--config", c, "--workdir", w]);
    assert!(table.contains("MUSCLE DSC"));
    ok(&["matrix", "audit", "--config", c, "--workdir", w]);
}
