use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use progseg_cli::pipeline::{RunManifest, RunStatus};

fn progseg(args: &[&str], cache: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progseg"))
        .args(args)
        .env("PROGSEG_CACHE", cache)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("JSON record on stderr");
    serde_json::from_str(line).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const RUN_CONFIG: &str = r#"
seed = 2
out_dir = "run"
bands = "RGBN"

[data.synth]
n_tiles = 6
seed = 4

[data.synth.scene]
size = [64, 64]
n_pivots = 1
n_floods = 1
pivot_radius = [8, 14]
flood_side = [12, 24]

[model]
widths = [4, 8]

[model.head]
width = 4

[[plan.stages]]
patch_size = 32
frozen_epochs = 1
finetune_epochs = 1
batch_size = 4

[[plan.stages]]
patch_size = 64
frozen_epochs = 1
finetune_epochs = 1
batch_size = 4

[predict]
max_images = 1
"#;

#[test]
fn subcommands_chain_from_synth_to_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cache = d.join("cache");
    let (raw, pre, patches, run, report) = (d.join("raw"), d.join("pre"), d.join("patches"), d.join("train"), d.join("report"));

    ok(&progseg(&["synth", "--tiles", "6", "--seed", "3", "--pivots", "3", "--floods", "3", "--out", p(&raw)], &cache));
    assert!(raw.join("tiles.json").is_file());
    ok(&progseg(&["preprocess", "--input", p(&raw), "--out", p(&pre)], &cache));
    ok(&progseg(&["patchify", "--input", p(&pre), "--out", p(&patches), "--size", "32,64"], &cache));
    assert!(patches.join("patches_32/manifest.jsonl").is_file());
    assert!(patches.join("patches_64/manifest.jsonl").is_file());

    let train = [
        "train", "--data", p(&patches), "--out", p(&run), "--plan", "32,64", "--bands", "RGBN", "--widths", "4,8", "--head-width", "4",
        "--frozen-epochs", "1", "--finetune-epochs", "1", "--batch-size", "4", "--seed", "1",
    ];
    ok(&progseg(&train, &cache));
    for f in ["stage0_32.psck", "stage1_64.psck", "final.psck", "history.csv", "metrics.json", "config.toml", "run_manifest.json"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let refused = progseg(&train, &cache);
    assert_eq!(refused.status.code(), Some(2));
    let mut forced = train.to_vec();
    forced.push("--force");
    ok(&progseg(&forced, &cache));

    let ckpt = run.join("final.psck");
    let metrics = d.join("eval.json");
    ok(&progseg(&["eval", "--ckpt", p(&ckpt), "--val", p(&patches.join("patches_64/manifest.jsonl")), "--out", p(&metrics)], &cache));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&m["miou"].as_f64().unwrap()));

    let mask = d.join("pred.png");
    ok(&progseg(&["predict", "--ckpt", p(&ckpt), "--image", p(&raw.join("tile_0000.pseg")), "--out", p(&mask)], &cache));
    let pred = progseg_cli::render::read_mask_png(&mask).unwrap();
    assert_eq!((pred.height(), pred.width()), (256, 256));
    assert!(d.join("pred.preview.png").is_file());

    ok(&progseg(&["report", "--runs", p(&run), "--out", p(&report)], &cache));
    let md = fs::read_to_string(report.join("report.md")).unwrap();
    assert_eq!(md.lines().filter(|l| l.starts_with("| train")).count(), 1);
    assert!(fs::read_to_string(report.join("curves.svg")).unwrap().contains("<polyline"));
}

#[test]
fn run_records_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, RUN_CONFIG).unwrap();
    let cache = dir.path().join("cache");
    ok(&progseg(&["run", "--config", p(&cfg)], &cache));
    let run = dir.path().join("run");
    let manifest = RunManifest::load(&run).unwrap();
    assert_eq!(manifest.status, RunStatus::Complete);
    for a in &manifest.artifacts {
        let path = if a.is_absolute() { a.clone() } else { run.join(a) };
        assert!(path.exists(), "{}", path.display());
    }
    assert!(manifest.artifacts.iter().any(|a| a.starts_with("predictions")));
    let first = fs::read(run.join("metrics.json")).unwrap();

    let again = progseg(&["run", "--config", p(&cfg)], &cache);
    assert_eq!(again.status.code(), Some(2));
    assert_eq!(error_record(&again)["error"]["kind"], "config");
    ok(&progseg(&["run", "--config", p(&cfg), "--force"], &cache));
    assert_eq!(fs::read(run.join("metrics.json")).unwrap(), first);

    let other = dir.path().join("seed9");
    ok(&progseg(&["run", "--config", p(&cfg), "--seed", "9", "--out", p(&other)], &cache));
    let report = dir.path().join("report");
    ok(&progseg(&["report", "--runs", p(&run), p(&other), "--out", p(&report)], &cache));
    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn failures_exit_with_their_class() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");

    let no_plan = dir.path().join("no_plan.toml");
    fs::write(&no_plan, "seed = 1\n").unwrap();
    let out = progseg(&["run", "--config", p(&no_plan)], &cache);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["exit_code"], 2);
    assert!(rec["error"]["message"].as_str().unwrap().contains("plan"));
    assert!(!dir.path().join("runs").exists(), "work started before validation");

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let out = progseg(&["report", "--runs", p(&empty), "--out", p(&dir.path().join("r"))], &cache);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["error"]["kind"], "data");

    let out = progseg(&["train", "--data", p(&empty), "--out", p(&dir.path().join("t")), "--plan", "64"], &cache);
    assert_eq!(out.status.code(), Some(3));

    let out = progseg(&["train", "--data", p(&empty), "--out", p(&dir.path().join("t")), "--plan", "64", "--alpha", "0", "--beta", "0"], &cache);
    assert_eq!(out.status.code(), Some(2));

    let out = progseg(&["synth", "--tiles", "0", "--out", p(&dir.path().join("s"))], &cache);
    assert_eq!(out.status.code(), Some(2));
}
