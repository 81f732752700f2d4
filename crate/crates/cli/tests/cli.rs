use std::path::PathBuf;
use std::process::{Command, Output};

fn mtctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtctl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn demo_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.json")
}

#[test]
fn demo_config_validates() {
    let out = mtctl(&["validate", "--config", demo_config().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        String::from_utf8_lossy(&out.stdout).trim(),
        "ok: 2 station(s)"
    );
}

#[test]
fn validate_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(demo_config()).unwrap()).unwrap();
    doc["tests"][0]["pid"]["kp"] = (-1.0).into();
    doc["tests"][1]["log_decimation"] = 0.into();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    let out = mtctl(&["validate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("tests[0].pid.kp"), "{err}");
    assert!(err.contains("tests[1].log_decimation"), "{err}");
}

#[test]
fn render_hold_is_flat() {
    let out = mtctl(&[
        "render",
        "--segment",
        r#"{"kind":"hold","value":3,"duration_ticks":10}"#,
        "--ticks",
        "5",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("tick,setpoint"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 5);
    for (i, row) in rows.iter().enumerate() {
        let (tick, v) = row.split_once(',').unwrap();
        assert_eq!(tick.parse::<usize>().unwrap(), i);
        assert_eq!(v.parse::<f64>().unwrap(), 3.0);
    }
}

#[test]
fn export_matches_csv_written_by_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = mtctl(&[
        "run",
        "--config",
        demo_config().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--duration-ticks",
        "20000",
        "--csv",
        "--stations",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let station = &summary["stations"][0];
    assert_eq!(station["station"], 1);
    assert_eq!(station["ticks"], 20000);
    assert_eq!(station["samples_logged"], station["samples_emitted"]);
    let log = dir.path().join(station["log_file"].as_str().unwrap());
    let exported = mtctl(&["export", "--log", log.to_str().unwrap()]);
    assert_eq!(exported.status.code(), Some(0));
    let written = std::fs::read(dir.path().join(station["csv_file"].as_str().unwrap())).unwrap();
    assert_eq!(exported.stdout, written);
}

#[test]
fn bench_rejects_seventeen_stations() {
    let out = mtctl(&["bench", "--stations", "17", "--ticks", "10"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_render_matches_pinned_golden() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/sweep_sine.csv");
    let args = [
        "render",
        "--segment",
        r#"{"kind":"sweep_sine","amplitude":2,"mean":0.5,"f_start_hz":50,"f_end_hz":5000,"sweep_law":"logarithmic","duration_ticks":4000}"#,
        "--ticks",
        "4000",
    ];
    let first = mtctl(&args);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(first.stdout, mtctl(&args).stdout);
    if std::env::var_os("MTCTL_RECORD_GOLDEN").is_some() {
        std::fs::write(&path, &first.stdout).unwrap();
    }
    let pinned = std::fs::read(&path).expect("golden render present");
    assert!(
        first.stdout == pinned,
        "sweep render drifted from {}",
        path.display()
    );
}
