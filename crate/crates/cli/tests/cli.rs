//! End-to-end runs of the retreg binary over a small synthetic dataset.

use std::path::Path;
use std::process::Command;

fn retreg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_retreg"))
}

fn run_ok(cmd: &mut Command) -> String {
    let output = cmd.output().expect("binary runs");
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn gen_dataset(dir: &Path, pairs: usize, seed: u64) {
    run_ok(
        retreg()
            .args(["synth-gen", "--pairs"])
            .arg(pairs.to_string())
            .arg("--seed")
            .arg(seed.to_string())
            .args(["--keypoints", "30", "--canvas", "160x160"])
            .arg("--output-dir")
            .arg(dir),
    );
}

#[test]
fn synth_gen_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 3, 10);
    assert!(dir.path().join("pairings.csv").exists());
    assert!(dir.path().join("pair_0000_hm_f.tns").exists());

    let out = dir.path().join("report");
    let stdout = run_ok(
        retreg()
            .arg("evaluate")
            .arg("--pairings")
            .arg(dir.path().join("pairings.csv"))
            .arg("--output-dir")
            .arg(&out)
            .args(["--seed", "5"]),
    );
    assert!(stdout.contains("3 of 3 pairs registered"), "{stdout}");
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["total_pairs"], 3);
    assert!(summary["registration_score"].as_f64().unwrap() > 0.99);
    let csv = std::fs::read_to_string(out.join("pairs.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4); // header + 3 pairs
}

#[test]
fn evaluate_is_deterministic_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 3, 77);
    let mut summaries = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("report_{threads}"));
        run_ok(
            retreg()
                .arg("evaluate")
                .arg("--pairings")
                .arg(dir.path().join("pairings.csv"))
                .arg("--output-dir")
                .arg(&out)
                .args(["--seed", "9", "--threads", threads]),
        );
        summaries.push(std::fs::read(out.join("summary.json")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1]);
}

#[test]
fn extract_match_register_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 1, 3);

    let kps_f = dir.path().join("kps_f.csv");
    run_ok(
        retreg()
            .arg("extract-keypoints")
            .arg("--heatmaps")
            .arg(dir.path().join("pair_0000_hm_f.tns"))
            .arg("--output")
            .arg(&kps_f),
    );
    let kps_m = dir.path().join("kps_m.csv");
    run_ok(
        retreg()
            .arg("extract-keypoints")
            .arg("--heatmaps")
            .arg(dir.path().join("pair_0000_hm_m.tns"))
            .arg("--output")
            .arg(&kps_m),
    );
    let text = std::fs::read_to_string(&kps_f).unwrap();
    assert!(text.lines().count() > 10, "{text}");

    let matches = dir.path().join("matches.csv");
    run_ok(
        retreg()
            .arg("match")
            .arg("--fixed-keypoints")
            .arg(&kps_f)
            .arg("--fixed-descriptors")
            .arg(dir.path().join("pair_0000_desc_f.tns"))
            .arg("--moving-keypoints")
            .arg(&kps_m)
            .arg("--moving-descriptors")
            .arg(dir.path().join("pair_0000_desc_m.tns"))
            .arg("--output")
            .arg(&matches),
    );
    let match_lines = std::fs::read_to_string(&matches).unwrap();
    assert!(match_lines.lines().count() > 4, "{match_lines}");

    let overlay = dir.path().join("overlay.png");
    let stdout = run_ok(
        retreg()
            .arg("register")
            .arg("--pairings")
            .arg(dir.path().join("pairings.csv"))
            .arg("--overlay")
            .arg(&overlay),
    );
    let record: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(record["registered"], true);
    assert!(record["cp_error_px"].as_f64().unwrap() < 0.1);
    assert!(overlay.exists());
}

#[test]
fn loss_check_reports_small_errors() {
    for loss in ["supcon", "mp-infonce", "mp-npair", "fastap"] {
        let stdout = run_ok(retreg().args([
            "loss-check",
            "--loss",
            loss,
            "--seed",
            "11",
            "--views",
            "2",
            "--keypoints",
            "4",
            "--dim",
            "8",
        ]));
        let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
        assert_eq!(report["loss"], loss);
        assert_eq!(report["instance_seed"], 11);
        let err = report["max_fd_rel_error"].as_f64().unwrap();
        let tolerance = if loss == "fastap" { 1e-3 } else { 1e-4 };
        assert!(err < tolerance, "{loss}: {err}");
    }
}

#[test]
fn train_embed_reports_accuracy() {
    let stdout = run_ok(retreg().args([
        "train-embed",
        "--loss",
        "mp-infonce",
        "--views",
        "3",
        "--keypoints",
        "10",
        "--dim",
        "16",
        "--steps",
        "300",
        "--learning-rate",
        "0.1",
        "--seed",
        "4",
    ]));
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let acc = report["view01_matching_accuracy"].as_f64().unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
    assert!(report["final_loss"].as_f64().unwrap() < report["initial_loss"].as_f64().unwrap());
}

#[test]
fn strict_mode_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("pairings.csv"),
        "fixed,moving,category\na.png,,S\n",
    )
    .unwrap();
    let status = retreg()
        .arg("evaluate")
        .arg("--pairings")
        .arg(dir.path().join("pairings.csv"))
        .arg("--output-dir")
        .arg(dir.path().join("out"))
        .arg("--strict")
        .status()
        .unwrap();
    assert!(!status.success());
}
