//! One client connection, independent of transport.
//!
//! The reader handles one request at a time, so a session's commands reach the engine in
//! order. The writer always prefers replies over telemetry.

use std::future::Future;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use futures::{Stream, StreamExt};
use tokio::sync::{broadcast, mpsc};

use crate::controller::{Controller, Outbox};
use crate::protocol::{parse_request, Request, ServerMessage, WireError};

static NEXT_SESSION: AtomicU64 = AtomicU64::new(1);

/// Outbound half of a transport.
pub trait FrameSink: Send + 'static {
    fn send_text(&mut self, text: String) -> impl Future<Output = std::io::Result<()>> + Send;
}

pub struct Session {
    id: u64,
    controller: Arc<Controller>,
    token: Option<String>,
    authed: bool,
    outbox: Arc<Outbox>,
}

impl Session {
    pub fn new(controller: Arc<Controller>, token: Option<String>, preauthorized: bool) -> Self {
        let id = NEXT_SESSION.fetch_add(1, Ordering::Relaxed);
        Self {
            id,
            controller,
            authed: token.is_none() || preauthorized,
            token,
            outbox: Outbox::new(id),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Handles one inbound message and returns the replies in send order.
    pub async fn handle(&mut self, text: &str) -> Vec<ServerMessage> {
        let (seq, request) = match parse_request(text) {
            Ok(r) => r,
            Err(e) => return vec![e.into_message()],
        };
        if let Request::Auth { token } = &request {
            let ok = self.token.as_deref().is_none_or(|t| t == token);
            self.authed |= ok;
            return vec![if ok {
                ServerMessage::Ack { seq }
            } else {
                WireError::new(Some(seq), "unauthorized", "bad token").into_message()
            }];
        }
        if !self.authed {
            return vec![
                WireError::new(Some(seq), "unauthorized", "authenticate first").into_message(),
            ];
        }
        match request {
            Request::Auth { .. } => unreachable!("handled above"),
            Request::Command { station, kind } => {
                match self.controller.command(station, kind, self.id).await {
                    Ok(statuses) => {
                        let mut out = vec![ServerMessage::Ack { seq }];
                        out.extend(statuses.into_iter().map(ServerMessage::Status));
                        out
                    }
                    Err(e) => vec![WireError::from_command(seq, &e).into_message()],
                }
            }
            Request::Subscribe {
                station,
                channel,
                decimation,
            } => match self
                .controller
                .subscribe(seq, station, channel, decimation, &self.outbox)
            {
                Ok(()) => vec![ServerMessage::Ack { seq }],
                Err(e) => vec![e.into_message()],
            },
            Request::Unsubscribe { station, channel } => {
                if station >= self.controller.station_count() {
                    return vec![WireError::new(
                        Some(seq),
                        "bad_station",
                        format!("unknown station {station}"),
                    )
                    .into_message()];
                }
                if self.controller.unsubscribe(station, channel, &self.outbox) {
                    vec![ServerMessage::Ack { seq }]
                } else {
                    vec![WireError::new(Some(seq), "bad_channel", "not subscribed").into_message()]
                }
            }
            Request::Status => {
                let mut out = vec![ServerMessage::Ack { seq }];
                out.extend(
                    self.controller
                        .statuses()
                        .into_iter()
                        .map(ServerMessage::Status),
                );
                out
            }
            Request::Describe => vec![
                ServerMessage::Ack { seq },
                ServerMessage::Machine {
                    config: self.controller.machine().clone(),
                },
            ],
        }
    }

    /// Runs the session until the inbound stream ends or the peer goes away.
    pub async fn run<I, W>(mut self, mut inbound: I, sink: W)
    where
        I: Stream<Item = String> + Unpin + Send,
        W: FrameSink,
    {
        let (reply_tx, reply_rx) = mpsc::unbounded_channel::<Vec<String>>();
        let writer = tokio::spawn(write_loop(
            sink,
            reply_rx,
            self.controller.events(),
            self.outbox.clone(),
            self.id,
        ));
        while let Some(text) = inbound.next().await {
            let replies = self.handle(&text).await;
            let batch = replies.iter().map(ServerMessage::to_json).collect();
            if reply_tx.send(batch).is_err() {
                break;
            }
        }
        drop(reply_tx);
        self.controller.drop_session(self.id);
        let _ = writer.await;
    }
}

async fn write_loop<W: FrameSink>(
    mut sink: W,
    mut replies: mpsc::UnboundedReceiver<Vec<String>>,
    mut events: broadcast::Receiver<crate::controller::StatusEvent>,
    outbox: Arc<Outbox>,
    session: u64,
) {
    loop {
        tokio::select! {
            biased;
            batch = replies.recv() => {
                let Some(batch) = batch else { return };
                for text in batch {
                    if sink.send_text(text).await.is_err() {
                        return;
                    }
                }
            }
            ev = events.recv() => match ev {
                Ok(ev) if ev.origin != Some(session) => {
                    if sink.send_text(ServerMessage::Status(ev.status).to_json()).await.is_err() {
                        return;
                    }
                }
                Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => {}
                Err(broadcast::error::RecvError::Closed) => return,
            },
            _ = outbox.notify.notified() => {
                loop {
                    while let Ok(batch) = replies.try_recv() {
                        for text in batch {
                            if sink.send_text(text).await.is_err() {
                                return;
                            }
                        }
                    }
                    let frames = outbox.take_round();
                    if frames.is_empty() {
                        break;
                    }
                    for f in frames {
                        if sink.send_text(ServerMessage::Samples(f).to_json()).await.is_err() {
                            return;
                        }
                    }
                }
            }
        }
    }
}
