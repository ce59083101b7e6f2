use std::path::Path;
use std::process::{Command, Output};

fn gridseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridseg"))
        .args(args)
        .env("GRIDSEG_DETERMINISTIC", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("run gridseg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let o = gridseg(&["generate-data", "--out", s(&data), "--n", "8", "--size", "64", "--seed", "3", "--prevalence", "0.5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.tsv").exists());
    assert!(data.join("sample_00000.gsa").exists());

    let cfg = dir.path().join("train.toml");
    std::fs::write(
        &cfg,
        format!(
            "dataset = {:?}\nrun_dir = {:?}\nepochs = 2\nside = 16\nbatch_size = 2\nensemble = 1\n[model]\nwidth = 4\ntile_size = 8\n",
            s(&data),
            s(&run)
        ),
    )
    .unwrap();
    let o = gridseg(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "config.toml", "best.gsa", "last.gsa"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let csv = dir.path().join("eval.csv");
    let best = run.join("best.gsa");
    let o = gridseg(&["eval", "--checkpoint", s(&best), "--checkpoint", s(&best), "--dataset", s(&data), "--split", "val", "--out", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("ensemble val:"), "{stdout}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("image_id,iou,dice,coverage_pred,coverage_target\n"));

    let out = dir.path().join("pred");
    let o = gridseg(&["infer", "--checkpoint", s(&best), "--out", s(&out), "--overlay", s(&data.join("sample_00001.gsa"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["sample_00001_prob.png", "sample_00001_mask.png", "sample_00001_overlay.png", "sample_00001_prob.gsa"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // Same seed, same history.
    let run2 = dir.path().join("run2");
    let o = gridseg(&["train", "--config", s(&cfg), "--run-dir", s(&run2)]);
    assert_eq!(code(&o), 0);
    let strip = |t: String| t.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect::<Vec<_>>();
    assert_eq!(strip(metrics), strip(std::fs::read_to_string(run2.join("metrics.csv")).unwrap()));
}

#[test]
fn benchmark_prints_csv() {
    let o = gridseg(&["benchmark", "--side", "64", "--scales", "1,0.5,0.25", "--tile", "16"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "side,scales,T,tiles,gridded_entries,full_entries,ratio,measured_peak");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[3], "21");
    assert_eq!(row[6].parse::<f64>().unwrap(), 21.0 / 256.0);
    assert_eq!(row[7], "65536");
}

#[test]
fn exit_codes() {
    assert_eq!(code(&gridseg(&["--help"])), 0);
    assert_eq!(code(&gridseg(&[])), 1);
    assert_eq!(code(&gridseg(&["no-such-command"])), 1);
    assert_eq!(code(&gridseg(&["benchmark", "--scales", "1,0.3"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    assert_eq!(code(&gridseg(&["train", "--dataset", s(&missing), "--run-dir", s(&dir.path().join("r"))])), 1);
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "epochs = \"many\"\n").unwrap();
    assert_eq!(code(&gridseg(&["train", "--config", s(&bad_cfg)])), 1);
    let corrupt = dir.path().join("corrupt.gsa");
    std::fs::write(&corrupt, b"GSEGARR1\x05\x00").unwrap();
    let o = gridseg(&["infer", "--checkpoint", s(&corrupt), "--out", s(dir.path()), s(&corrupt)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}
