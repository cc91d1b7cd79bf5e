use std::path::Path;
use std::process::{Command, Output};

fn partasm(args: &[&str]) -> Output {
    partasm_threads(args, "1")
}

fn partasm_threads(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partasm"))
        .args(args)
        .env("SPA_THREADS", threads)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"d": 16, "layers": 1, "heads": 2, "enc_widths": [8, 16], "points": 16},
            "train": {"lr": 0.001, "epochs": 2, "batch": 4, "seed": 3}}"#,
    )
    .unwrap();
    cfg
}

#[test]
fn gt_predictions_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let report = dir.path().join("report.json");
    let out = partasm(&[
        "gen-data",
        "--kind",
        "mixed",
        "--count",
        "9",
        "--seed",
        "4",
        "--sidecar",
        "--out",
        path(&data),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = partasm(&[
        "eval",
        "--gt-as-prediction",
        "--split",
        "all",
        "--data",
        path(&data),
        "--report",
        path(&report),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let o = &r["overall"];
    assert_eq!(o["scd"].as_f64(), Some(0.0));
    assert_eq!(o["pa"].as_f64(), Some(1.0));
    assert_eq!(o["ca"].as_f64(), Some(1.0));
    assert_eq!(o["sr"].as_f64(), Some(1.0));
    assert_eq!(r["per_object"].as_array().unwrap().len(), 9);
}

#[test]
fn training_twice_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = tiny_config(dir.path());
    assert!(partasm(&[
        "gen-data",
        "--kind",
        "table",
        "--count",
        "10",
        "--out",
        path(&data)
    ])
    .status
    .success());
    let runs: Vec<_> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for run in &runs {
        let out = partasm(&[
            "train",
            "--config",
            path(&cfg),
            "--data",
            path(&data),
            "--out",
            path(run),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for file in [
        "checkpoint.spac",
        "last.spac",
        "history.json",
        "report.json",
    ] {
        let a = std::fs::read(runs[0].join(file)).unwrap();
        let b = std::fs::read(runs[1].join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
    let history: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(runs[0].join("history.json")).unwrap())
            .unwrap();
    let first = &history.as_array().unwrap()[0];
    for key in ["epoch", "lr", "train_loss", "val_pa"] {
        assert!(first.get(key).is_some(), "history lacks {key}");
    }

    let ckpt = runs[0].join("checkpoint.spac");
    let object = std::fs::read_dir(data.join("objects"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "json"))
        .unwrap();
    let ply = dir.path().join("shape.ply");
    let out = partasm(&[
        "assemble",
        "--ckpt",
        path(&ckpt),
        "--object",
        path(&object),
        "--export",
        path(&ply),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(std::fs::read_to_string(&ply).unwrap().starts_with("ply"));

    let report = dir.path().join("eval.json");
    let out = partasm(&[
        "eval",
        "--ckpt",
        path(&ckpt),
        "--data",
        path(&data),
        "--report",
        path(&report),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        std::fs::read(&report).unwrap(),
        std::fs::read(runs[0].join("report.json")).unwrap()
    );

    let threaded = dir.path().join("eval3.json");
    let out = partasm_threads(
        &[
            "eval",
            "--ckpt",
            path(&ckpt),
            "--data",
            path(&data),
            "--report",
            path(&threaded),
        ],
        "3",
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        std::fs::read(&threaded).unwrap(),
        std::fs::read(&report).unwrap()
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"model": {"depth": 3}}"#).unwrap();
    let out = partasm(&[
        "train",
        "--config",
        path(&bad_cfg),
        "--data",
        path(&data),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = tiny_config(dir.path());
    let missing = dir.path().join("nope");
    let out = partasm(&[
        "train",
        "--config",
        path(&cfg),
        "--data",
        path(&missing),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));

    assert!(partasm(&[
        "gen-data",
        "--kind",
        "shelf",
        "--count",
        "3",
        "--out",
        path(&data)
    ])
    .status
    .success());
    let obj = data.join("objects");
    let first = std::fs::read_dir(&obj)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    std::fs::write(&first, "{\"id\": 5}").unwrap();
    let out = partasm(&[
        "eval",
        "--gt-as-prediction",
        "--data",
        path(&data),
        "--report",
        path(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = partasm(&["gen-data", "--pattern", "sideways", "--out", path(&data)]);
    assert!(!out.status.success());
    let out = partasm(&["train", "--bogus"]);
    assert!(!out.status.success());
}

#[test]
fn nonfinite_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(partasm(&[
        "gen-data",
        "--kind",
        "table",
        "--count",
        "10",
        "--out",
        path(&data)
    ])
    .status
    .success());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"d": 16, "layers": 1, "heads": 2, "enc_widths": [8, 16], "points": 16},
            "train": {"lr": 1e300, "epochs": 3, "batch": 4}}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let out = partasm(&[
        "train",
        "--config",
        path(&cfg),
        "--data",
        path(&data),
        "--out",
        path(&run),
    ]);
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(run.join("nonfinite.json").exists());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.json", "smoke.json"] {
        partasm::config::RunConfig::load(&dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
