//! End-to-end CLI coverage: generate -> train -> eval plus the error
//! surfaces and the config-echo reproducibility contract.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_partalign"))
}

fn tiny_dataset(dir: &Path) {
    let status = bin()
        .args(["generate", "--ids", "8", "--per-id", "4", "--seed", "2", "--out"])
        .arg(dir)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn generate_writes_dataset_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    tiny_dataset(&out);
    assert!(out.join("manifest.csv").exists());
    assert!(out.join("config.echo").exists());
    let pngs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .ends_with(".png")
        })
        .count();
    assert_eq!(pngs, 32);
    // Each image carries three mask sidecars.
    assert!(out.join("0000_c0_00.mask2.pgm").exists());
}

#[test]
fn generate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    tiny_dataset(&a);
    tiny_dataset(&b);
    for name in ["0000_c0_00.png", "0007_c1_01.png", "manifest.csv"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between identical runs");
    }
}

#[test]
fn generate_zero_ids_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["generate", "--ids", "0", "--out"])
        .arg(dir.path().join("x"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn generate_refuses_nonempty_dir_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    tiny_dataset(&out);
    let status = bin()
        .args(["generate", "--ids", "2", "--per-id", "2", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
    // --force overwrites.
    let status = bin()
        .args(["generate", "--ids", "2", "--per-id", "2", "--force", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn train_eval_chain_produces_reports_and_maps() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);

    let run = dir.path().join("run");
    let status = bin()
        .args([
            "train", "--head", "partnet", "--parts", "4", "--iters", "20", "--batch-p", "3",
            "--batch-k", "2", "--seed", "1", "--deterministic", "--data",
        ])
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(run.join("final.ckpt").exists());
    assert!(run.join("final.ckpt.json").exists());
    assert!(run.join("metrics.csv").exists());
    assert!(run.join("config.echo").exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("iteration,lr,active_triplets,mean_loss\n"));
    assert_eq!(metrics.lines().count(), 21);

    let evald = dir.path().join("eval");
    let output = bin()
        .args(["eval", "--max-rank", "10", "--export-maps", "--checkpoint"])
        .arg(run.join("final.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&evald)
        .output()
        .unwrap();
    assert!(output.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(evald.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["cmc"].as_array().unwrap().len(), 10);
    assert!(report["map"].as_f64().unwrap() >= 0.0);
    assert!(evald.join("cmc.csv").exists());
    // 4 parts per exported image, plus a montage.
    let maps = std::fs::read_dir(evald.join("maps")).unwrap().count();
    assert!(maps > 0 && maps % 5 == 0, "map exports come in groups of K+1");
}

#[test]
fn config_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);

    let first = dir.path().join("first");
    let status = bin()
        .args([
            "train", "--head", "pool", "--iters", "15", "--batch-p", "3", "--batch-k", "2",
            "--seed", "9", "--deterministic", "--data",
        ])
        .arg(&data)
        .arg("--out")
        .arg(&first)
        .status()
        .unwrap();
    assert!(status.success());

    let second = dir.path().join("second");
    let status = bin()
        .args(["train", "--config"])
        .arg(first.join("config.echo"))
        .arg("--out")
        .arg(&second)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read(first.join("metrics.csv")).unwrap(),
        std::fs::read(second.join("metrics.csv")).unwrap()
    );
}

#[test]
fn eval_rejects_missing_and_corrupt_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tiny_dataset(&data);

    let status = bin()
        .args(["eval", "--checkpoint"])
        .arg(dir.path().join("nope.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("e1"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // Train, then corrupt the sidecar so shapes disagree.
    let run = dir.path().join("run");
    bin()
        .args([
            "train", "--head", "partnet", "--parts", "2", "--iters", "5", "--batch-p", "3",
            "--batch-k", "2", "--data",
        ])
        .arg(&data)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    let sidecar = run.join("final.ckpt.json");
    let text = std::fs::read_to_string(&sidecar)
        .unwrap()
        .replace("\"parts\": 2", "\"parts\": 6");
    std::fs::write(&sidecar, text).unwrap();
    let output = bin()
        .args(["eval", "--checkpoint"])
        .arg(run.join("final.ckpt"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("e2"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("detector"), "diagnostic names shapes: {stderr}");
}

#[test]
fn bench_emits_csv_with_matching_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let output = bin()
        .args(["bench", "--batch-sizes", "8", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let csv = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "M,triplets,active,ms_naive,ms_aggregated,max_grad_diff"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "8");
    let diff: f64 = row[5].parse().unwrap();
    assert!(diff < 1e-10, "gradient paths diverge: {diff}");
}

#[test]
fn sweep_parts_tabulates_each_k() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let status = bin()
        .args(["generate", "--ids", "12", "--per-id", "4", "--seed", "4", "--out"])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());

    let out = dir.path().join("sweep");
    let status = bin()
        .args([
            "sweep-parts", "--k-list", "1,2", "--seeds", "1", "--iters", "10", "--batch-p",
            "2", "--batch-k", "2", "--data",
        ])
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per K: {csv}");
    assert!(csv.starts_with("k,rank1,rank5,rank10,rank20\n"));
}

#[test]
fn unknown_head_lists_choices_and_exits_2() {
    let output = bin()
        .args(["train", "--data", "x", "--out", "y", "--head", "banana"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("partnet") && stderr.contains("fixed-mask"), "{stderr}");
}
