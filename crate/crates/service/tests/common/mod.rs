#![allow(dead_code)]

use std::time::Duration;

use futures::{SinkExt, StreamExt};
use serde_json::Value;
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::client::IntoClientRequest;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl Client {
    pub async fn connect(addr: std::net::SocketAddr) -> Self {
        Self::connect_with(addr, None).await
    }

    pub async fn connect_with(addr: std::net::SocketAddr, bearer: Option<&str>) -> Self {
        let mut req = format!("ws://{addr}/ws").into_client_request().unwrap();
        if let Some(t) = bearer {
            req.headers_mut()
                .insert("Authorization", format!("Bearer {t}").parse().unwrap());
        }
        let (ws, _) = tokio_tungstenite::connect_async(req).await.unwrap();
        Self { ws }
    }

    pub async fn send(&mut self, v: &Value) {
        self.ws
            .send(Message::Text(v.to_string().into()))
            .await
            .unwrap();
    }

    pub async fn send_raw(&mut self, text: &str) {
        self.ws
            .send(Message::Text(text.to_string().into()))
            .await
            .unwrap();
    }

    /// Next text message, or None after `timeout` of silence.
    pub async fn recv_within(&mut self, timeout: Duration) -> Option<Value> {
        loop {
            match tokio::time::timeout(timeout, self.ws.next()).await {
                Ok(Some(Ok(Message::Text(t)))) => return Some(serde_json::from_str(&t).unwrap()),
                Ok(Some(Ok(_))) => continue,
                _ => return None,
            }
        }
    }

    pub async fn recv(&mut self) -> Value {
        self.recv_within(Duration::from_secs(5))
            .await
            .expect("server reply within 5 s")
    }

    /// Next message that is not telemetry.
    pub async fn recv_reply(&mut self) -> Value {
        loop {
            let v = self.recv().await;
            if v["type"] != "samples" && v["type"] != "status" {
                return v;
            }
        }
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

pub fn sine_test(seed: u64) -> Value {
    serde_json::json!({
        "control_mode": "closed_loop",
        "control_variable": "force",
        "pid": {"kp": 0.02, "ki": 2.0, "kd": 0.0},
        "program": [{"kind": "sine", "amplitude": 10.0, "mean": 0.0, "frequency_hz": 2.0, "cycles": 1000}],
        "log_decimation": 100,
        "rng_seed": seed
    })
}
