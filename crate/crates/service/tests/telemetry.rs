mod common;

use std::time::{Duration, Instant};

use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;

use common::{sine_test, Client};
use mtctl_service::{demo_document, serve, ServeOptions, ServerHandle};

async fn server(stations: usize) -> ServerHandle {
    serve(demo_document(stations), ServeOptions::local(0))
        .await
        .unwrap()
}

async fn start_station(c: &mut Client, station: usize, test: Value, seq: u64) {
    c.send(&json!({"type": "configure", "station": station, "seq": seq, "payload": test}))
        .await;
    assert_eq!(c.recv_reply().await, json!({"type": "ack", "seq": seq}));
    c.send(&json!({"type": "start", "station": station, "seq": seq + 1}))
        .await;
    assert_eq!(c.recv_reply().await, json!({"type": "ack", "seq": seq + 1}));
}

async fn collect_frames(c: &mut Client, channel: u64, for_: Duration) -> Vec<Value> {
    let end = Instant::now() + for_;
    let mut frames = Vec::new();
    while Instant::now() < end {
        match c.recv_within(Duration::from_millis(50)).await {
            Some(v) if v["type"] == "samples" && v["channel"] == channel => frames.push(v),
            _ => {}
        }
    }
    frames
}

fn assert_contiguous(frames: &[Value], decimation: u64) {
    assert!(!frames.is_empty());
    let mut next: Option<u64> = None;
    for f in frames {
        let t0 = f["t0_tick"].as_u64().unwrap();
        let n = f["values"].as_array().unwrap().len() as u64;
        assert!((1..=256).contains(&n));
        assert_eq!(f["decimation"], decimation);
        assert_eq!(t0 % decimation, 0);
        assert!(f.get("dropped").is_none());
        if let Some(expect) = next {
            assert_eq!(t0, expect, "gap in telemetry");
        }
        next = Some(t0 + n * decimation);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn subscribed_frames_are_bounded_and_aligned() {
    let srv = server(2).await;
    let mut c = Client::connect(srv.addr).await;
    start_station(&mut c, 0, sine_test(1), 1).await;
    c.send(&json!({"type": "subscribe", "station": 0, "channel": 0, "decimation": 1000, "seq": 3}))
        .await;
    assert_eq!(c.recv_reply().await, json!({"type": "ack", "seq": 3}));
    let frames = collect_frames(&mut c, 0, Duration::from_millis(1500)).await;
    assert!(frames.len() >= 5, "only {} frames", frames.len());
    assert_contiguous(&frames, 1000);
    assert!(frames.iter().all(|f| f["station"] == 0));
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn unsubscribed_channels_stay_silent() {
    let srv = server(2).await;
    let mut c = Client::connect(srv.addr).await;
    start_station(&mut c, 0, sine_test(1), 1).await;
    c.send(&json!({"type": "subscribe", "station": 0, "channel": 1, "decimation": 500, "seq": 3}))
        .await;
    assert_eq!(c.recv_reply().await, json!({"type": "ack", "seq": 3}));
    let end = Instant::now() + Duration::from_millis(600);
    let mut seen = 0;
    while Instant::now() < end {
        if let Some(v) = c.recv_within(Duration::from_millis(50)).await {
            if v["type"] == "samples" {
                assert_eq!(v["channel"], 1);
                seen += 1;
            }
        }
    }
    assert!(seen > 0);
    c.send(&json!({"type": "unsubscribe", "station": 0, "channel": 1, "seq": 4}))
        .await;
    assert_eq!(c.recv_reply().await, json!({"type": "ack", "seq": 4}));
    // allow in-flight frames to drain
    collect_frames(&mut c, 1, Duration::from_millis(300)).await;
    assert!(collect_frames(&mut c, 1, Duration::from_millis(500))
        .await
        .is_empty());
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn slow_client_does_not_disturb_fast_client() {
    let srv = server(1).await;
    let mut fast = Client::connect(srv.addr).await;
    let mut slow = Client::connect(srv.addr).await;
    start_station(&mut fast, 0, sine_test(3), 1).await;
    for (c, seq) in [(&mut fast, 10), (&mut slow, 20)] {
        for ch in [0u8, 1, 2, 254, 255] {
            c.send(&json!({"type": "subscribe", "station": 0, "channel": ch, "decimation": 100, "seq": seq + ch as u64}))
                .await;
        }
    }
    // slow never reads during the window
    let frames = collect_frames(&mut fast, 255, Duration::from_secs(2)).await;
    assert!(frames.len() >= 10);
    assert_contiguous(&frames, 100);
    let got = slow.recv().await;
    assert!(got["type"] == "ack" || got["type"] == "status");
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn estop_reaches_every_session() {
    let srv = server(4).await;
    let mut a = Client::connect(srv.addr).await;
    let mut b = Client::connect(srv.addr).await;
    start_station(&mut a, 2, sine_test(5), 1).await;
    tokio::time::sleep(Duration::from_millis(100)).await;
    b.send(&json!({"type": "estop", "seq": 99})).await;
    // b may first see a's lifecycle changes
    assert_eq!(b.recv_reply().await, json!({"type": "ack", "seq": 99}));
    for i in 0..4 {
        let s = b.recv().await;
        assert_eq!(s["type"], "status");
        assert_eq!(s["station"], i);
        assert_eq!(s["lifecycle"], "faulted");
        assert_eq!(s["fault"]["kind"], "estop");
    }
    let mut faulted = std::collections::BTreeSet::new();
    while faulted.len() < 4 {
        let s = a.recv().await;
        if s["type"] == "status" && s["lifecycle"] == "faulted" {
            if s["station"] == 2 {
                assert!(s["tick"].as_u64().unwrap() > 0);
                assert_eq!(s["fault"]["tick"], s["tick"]);
            }
            faulted.insert(s["station"].as_u64().unwrap());
        }
    }
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn completion_is_pushed() {
    let srv = server(1).await;
    let mut c = Client::connect(srv.addr).await;
    let test = json!({
        "control_mode": "open_loop",
        "program": [{"kind": "ramp", "end_value": 0.1, "duration_ticks": 5000}]
    });
    start_station(&mut c, 0, test, 1).await;
    loop {
        let s = c.recv().await;
        if s["type"] == "status" && s["lifecycle"] == "completed" {
            assert_eq!(s["completion"], "program_done");
            assert_eq!(s["tick"], 5000);
            break;
        }
    }
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn tcp_line_mode_speaks_the_same_protocol() {
    let mut opts = ServeOptions::local(0);
    opts.tcp_addr = Some("127.0.0.1:0".parse().unwrap());
    let srv = serve(demo_document(2), opts).await.unwrap();
    let stream = TcpStream::connect(srv.tcp_addr.unwrap()).await.unwrap();
    let (r, mut w) = stream.into_split();
    let mut lines = BufReader::new(r).lines();
    w.write_all(
        b"{\"type\":\"start\",\"station\":99,\"seq\":1}\n\n{\"type\":\"status\",\"seq\":2}\n",
    )
    .await
    .unwrap();
    let first: Value = serde_json::from_str(&lines.next_line().await.unwrap().unwrap()).unwrap();
    assert_eq!(
        first,
        json!({"type": "err", "seq": 1, "code": "bad_station", "message": "unknown station 99"})
    );
    let ack: Value = serde_json::from_str(&lines.next_line().await.unwrap().unwrap()).unwrap();
    assert_eq!(ack, json!({"type": "ack", "seq": 2}));
    for i in 0..2 {
        let s: Value = serde_json::from_str(&lines.next_line().await.unwrap().unwrap()).unwrap();
        assert_eq!(s["station"], i);
    }
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn health_and_bearer_token() {
    let mut opts = ServeOptions::local(0);
    opts.token = Some("tok".into());
    let srv = serve(demo_document(3), opts).await.unwrap();

    let mut s = TcpStream::connect(srv.addr).await.unwrap();
    s.write_all(b"GET /health HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).await.unwrap();
    assert!(body.starts_with("HTTP/1.1 200"));
    assert!(body.contains(r#"{"stations":3,"status":"ok"}"#) || body.contains(r#""status":"ok""#));

    let mut c = Client::connect_with(srv.addr, Some("tok")).await;
    c.send(&json!({"type": "status", "seq": 1})).await;
    assert_eq!(c.recv().await, json!({"type": "ack", "seq": 1}));

    let bad = format!("ws://{}/ws?token=nope", srv.addr);
    assert!(tokio_tungstenite::connect_async(bad).await.is_err());
    srv.shutdown().await;
}
