use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fdgan");

const TINY: [&str; 11] = [
    "model.z_dim=8",
    "model.base_spatial=4",
    "model.num_base_blocks=2",
    "model.base_channels=16",
    "model.embed_dim=8",
    "model.text_hidden=8",
    "model.condition_dim=8",
    "model.disc_base_channels=4",
    "model.disc_max_channels=8",
    "batch_size=8",
    "checkpoint_every=2",
];

fn fdgan(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).env_remove("FDGAN_OUT").output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tiny_sets() -> Vec<String> {
    TINY.iter().flat_map(|s| ["--set".to_string(), s.to_string()]).collect()
}

fn make_data(dir: &Path, n: usize) -> PathBuf {
    let out = dir.join("data");
    let o = fdgan(&["make-data", "--n", &n.to_string(), "--seed", "7", "--resolution", "32", "--out", out.to_str().unwrap()], dir);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    out
}

fn train(dir: &Path, data: &Path, out: &str, steps: usize, extra: &[&str]) -> Output {
    let mut args: Vec<String> =
        vec!["train".into(), "--data".into(), data.to_str().unwrap().into(), "--out".into(), out.into(), "--steps".into(), steps.to_string()];
    args.extend(tiny_sets());
    args.extend(extra.iter().map(|s| s.to_string()));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    fdgan(&refs, dir)
}

#[test]
fn make_data_writes_a_reproducible_dataset_and_rejects_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fdgan(&["make-data", "--n", "2400", "--seed", "7", "--out", "a"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(std::fs::read_dir(tmp.path().join("a/images")).unwrap().count(), 2400);
    assert!(text(&o).contains("red circle"), "histogram printed");
    let o = fdgan(&["make-data", "--n", "2400", "--seed", "7", "--out", "b"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let meta = |d: &str| std::fs::read(tmp.path().join(d).join("metadata.csv")).unwrap();
    assert_eq!(meta("a"), meta("b"));

    let o = fdgan(&["make-data", "--n", "0", "--out", "c"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = fdgan(&["make-data", "--n", "5", "--resolution", "48", "--out", "d"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_a_self_describing_run_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_data(tmp.path(), 64);
    let o = train(tmp.path(), &data, "r1", 6, &["--variant", "fdgan", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(text(&o).contains("finished at step 6"));
    let r1 = tmp.path().join("r1");
    for f in ["config.toml", "manifest.json", "metrics.jsonl", "checkpoints/step_000006.fdckpt"] {
        assert!(r1.join(f).exists(), "{f}");
    }
    let ledger = std::fs::read_to_string(r1.join("metrics.jsonl")).unwrap();
    assert_eq!(ledger.lines().count(), 6);

    let o = train(tmp.path(), &data, "r2", 6, &["--variant", "fdgan", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(ledger, std::fs::read_to_string(tmp.path().join("r2/metrics.jsonl")).unwrap());

    // The stored config alone reproduces the run.
    let o = fdgan(
        &["train", "--data", data.to_str().unwrap(), "--config", r1.join("config.toml").to_str().unwrap(), "--out", "r3"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(ledger, std::fs::read_to_string(tmp.path().join("r3/metrics.jsonl")).unwrap());
}

#[test]
fn train_rejects_bad_input_with_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_data(tmp.path(), 16);
    let o = train(tmp.path(), &data, "r", 4, &["--variant", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let msg = text(&o);
    for v in ["baseline", "baseline+adain", "baseline+fdbg", "baseline+fdjd", "fdgan"] {
        assert!(msg.contains(v), "{msg}");
    }
    assert_eq!(train(tmp.path(), &data, "r", 4, &["--set", "nope=1"]).status.code(), Some(2));
    assert_eq!(train(tmp.path(), &data, "r", 4, &["--device", "gpu"]).status.code(), Some(2));
    assert_eq!(train(tmp.path(), &tmp.path().join("missing"), "r", 4, &[]).status.code(), Some(2));
}

#[test]
fn numerical_abort_exits_3_and_names_the_last_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_data(tmp.path(), 32);
    let o = train(tmp.path(), &data, "r", 6, &["--poison-after", "20"]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("step_000002.fdckpt"), "{}", text(&o));
}

#[test]
fn eval_scores_the_oracle_draws_grids_and_validates_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_data(tmp.path(), 160);
    let d = data.to_str().unwrap();
    let small = ["--fid-samples", "100", "--r-queries", "100", "--pool-size", "20", "--matcher-steps", "50"];
    let mut args = vec!["eval", "--oracle", "--oracle-resolution", "32", "--data", d, "--grid", "4x6", "--out", "oracle"];
    args.extend(small);
    let o = fdgan(&args, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("oracle/metrics.json")).unwrap()).unwrap();
    assert!(report["disent_caption_accuracy"].as_f64().unwrap() >= 0.98, "{report}");
    let grid: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("oracle/grid.json")).unwrap()).unwrap();
    assert!(tmp.path().join("oracle/grid.png").exists());
    assert_eq!(grid["rows"].as_array().unwrap().len() * grid["columns"].as_u64().unwrap() as usize, 24, "{grid}");

    let o = fdgan(&["eval", "--checkpoint", "missing.fdckpt", "--data", d], tmp.path());
    assert_eq!(o.status.code(), Some(2));

    let o = train(tmp.path(), &data, "run", 4, &["--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let ckpt = tmp.path().join("run/checkpoints/step_000004.fdckpt");
    let ckpt = ckpt.to_str().unwrap();
    let o = fdgan(&["eval", "--checkpoint", ckpt, "--data", d, "--variant", "baseline"], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let other = tmp.path().join("other.toml");
    let cfg = std::fs::read_to_string(tmp.path().join("run/config.toml")).unwrap().replace("seed = 3", "seed = 4");
    std::fs::write(&other, cfg).unwrap();
    let o = fdgan(&["eval", "--checkpoint", ckpt, "--data", d, "--config", other.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("seed"), "{}", text(&o));

    let mut args = vec!["eval", "--checkpoint", ckpt, "--data", d, "--config", "run/config.toml", "--grid", "2x3", "--out", "scored"];
    args.extend(small);
    let o = fdgan(&args, tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("scored/metrics.json")).unwrap()).unwrap();
    assert!(report["param_counts"]["total"].as_u64().unwrap() > 0);
}

#[test]
fn check_grads_passes_and_detects_a_corrupted_backward() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fdgan(&["check-grads", "--seeds", "0"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout).to_string();
    for name in ["instance_norm", "adain", "addin", "apply_condition_transform", "generator[add_in]", "discriminator[add_in]"] {
        assert!(out.lines().any(|l| l.starts_with(name) && l.ends_with("PASS")), "{name}: {out}");
    }
    let o = fdgan(&["check-grads", "--seeds", "0", "--inject-fault", "addin-backward"], tmp.path());
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).lines().any(|l| l.starts_with("addin ") && l.ends_with("FAIL")));
}

#[test]
fn ablate_emits_five_rows_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = make_data(tmp.path(), 120);
    let run = |out: &str| {
        let mut args: Vec<String> = ["ablate", "--data", data.to_str().unwrap(), "--steps", "2", "--seed", "5", "--out", out]
            .iter()
            .map(|s| s.to_string())
            .collect();
        args.extend(tiny_sets());
        args.extend(
            ["--fid-samples", "60", "--r-queries", "60", "--pool-size", "10", "--matcher-steps", "20"].iter().map(|s| s.to_string()),
        );
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        fdgan(&refs, tmp.path())
    };
    let o = run("a");
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(tmp.path().join("a/ablation.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 5);
    let total = |v: &str| {
        rows.iter().find(|r| r["variant"] == v).unwrap()["report"]["param_counts"]["total"].as_u64().unwrap()
    };
    assert!(total("fdgan") < total("baseline"));
    let table = std::fs::read_to_string(tmp.path().join("a/ablation.md")).unwrap();
    assert_eq!(table.lines().count(), 7);

    let o = run("b");
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(table, std::fs::read_to_string(tmp.path().join("b/ablation.md")).unwrap());
}
