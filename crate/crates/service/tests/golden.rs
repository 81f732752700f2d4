//! Replays every `docs/golden/*.jsonl` transcript against a live server.
//!
//! Each line is `{"dir":"meta"|"send"|"recv", ...}`. Servers run with a frozen clock so
//! status ticks are reproducible. `MTCTL_RECORD_GOLDEN=1` rewrites the `recv` lines from
//! what the server actually answers.

mod common;

use std::path::PathBuf;
use std::time::Duration;

use serde_json::{json, Value};

use common::Client;
use mtctl_service::{demo_document, serve, Pacing, ServeOptions};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/golden")
}

async fn replay(path: &PathBuf, record: bool) -> Result<Vec<Value>, String> {
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<Value> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let meta = lines
        .iter()
        .find(|l| l["dir"] == "meta")
        .cloned()
        .unwrap_or(json!({}));
    let stations = meta["stations"].as_u64().unwrap_or(16) as usize;
    let mut opts = ServeOptions::local(0);
    opts.pacing = Pacing::Frozen;
    opts.token = meta["token"].as_str().map(String::from);
    let server = serve(demo_document(stations), opts).await.unwrap();
    let mut client = Client::connect(server.addr).await;

    let mut out = Vec::new();
    let mut result = Ok(());
    for line in &lines {
        match line["dir"].as_str().unwrap() {
            "meta" => out.push(line.clone()),
            "send" => {
                out.push(line.clone());
                match &line["msg"] {
                    Value::String(raw) => client.send_raw(raw).await,
                    v => client.send(v).await,
                }
                if record {
                    while let Some(v) = client.recv_within(Duration::from_millis(300)).await {
                        out.push(json!({"dir": "recv", "msg": v}));
                    }
                }
            }
            "recv" if !record => {
                let got = client.recv_within(Duration::from_secs(5)).await;
                if got.as_ref() != Some(&line["msg"]) {
                    result = Err(format!(
                        "{}: expected {}\n got {}",
                        path.display(),
                        line["msg"],
                        got.map(|g| g.to_string()).unwrap_or("nothing".into())
                    ));
                    break;
                }
            }
            _ => {}
        }
    }
    if result.is_ok() && !record {
        if let Some(extra) = client.recv_within(Duration::from_millis(200)).await {
            result = Err(format!(
                "{}: unexpected trailing message {extra}",
                path.display()
            ));
        }
    }
    client.close().await;
    server.shutdown().await;
    result.map(|_| out)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn golden_transcripts_replay_exactly() {
    let record = std::env::var("MTCTL_RECORD_GOLDEN").is_ok_and(|v| v == "1");
    let mut files: Vec<_> = std::fs::read_dir(golden_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    assert!(files.len() >= 4, "golden transcripts missing");
    for path in &files {
        let out = replay(path, record).await.unwrap_or_else(|e| panic!("{e}"));
        if record {
            let text: String = out.iter().map(|v| format!("{v}\n")).collect();
            std::fs::write(path, text).unwrap();
        }
    }
}
