//! Wire messages: one JSON object per WebSocket text message or TCP line.

use serde::Serialize;
use serde_json::{Map, Value};

use mtctl_core::config::{parse_test, Limit, Violation};
use mtctl_core::engine::{CommandError, CommandKind, GainsPatch, Lifecycle, StationStatus};

/// Largest number of values carried by one samples frame.
pub const MAX_FRAME_VALUES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Auth {
        token: String,
    },
    Command {
        station: Option<usize>,
        kind: CommandKind,
    },
    Subscribe {
        station: usize,
        channel: u8,
        decimation: u64,
    },
    Unsubscribe {
        station: usize,
        channel: u8,
    },
    Status,
    Describe,
}

/// A reply that the client can correlate by `seq`.
#[derive(Debug, Clone, PartialEq)]
pub struct WireError {
    pub seq: Option<u64>,
    pub code: &'static str,
    pub message: Option<String>,
    pub lifecycle: Option<Lifecycle>,
    pub violations: Vec<Violation>,
}

impl WireError {
    pub fn new(seq: Option<u64>, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            seq,
            code,
            message: Some(message.into()),
            lifecycle: None,
            violations: Vec::new(),
        }
    }

    pub fn from_command(seq: u64, e: &CommandError) -> Self {
        let mut w = WireError::new(Some(seq), e.code(), e.to_string());
        match e {
            CommandError::IllegalTransition { from, .. } => w.lifecycle = Some(*from),
            CommandError::Invalid(v) => w.violations = v.clone(),
            _ => {}
        }
        w
    }

    pub fn into_message(self) -> ServerMessage {
        ServerMessage::Err {
            seq: self.seq,
            code: self.code,
            message: self.message,
            lifecycle: self.lifecycle,
            violations: self.violations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplesFrame {
    pub station: usize,
    pub channel: u8,
    pub t0_tick: u64,
    pub decimation: u64,
    pub values: Vec<f64>,
    /// Frames discarded for this subscription since the previous delivered frame.
    #[serde(skip_serializing_if = "is_zero")]
    pub dropped: u64,
}

fn is_zero(v: &u64) -> bool {
    *v == 0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Ack {
        seq: u64,
    },
    Err {
        seq: Option<u64>,
        code: &'static str,
        #[serde(skip_serializing_if = "Option::is_none")]
        message: Option<String>,
        #[serde(skip_serializing_if = "Option::is_none")]
        lifecycle: Option<Lifecycle>,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        violations: Vec<Violation>,
    },
    Status(StationStatus),
    Samples(SamplesFrame),
    Machine {
        config: mtctl_core::config::MachineConfig,
    },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

const STATION_COMMANDS: [&str; 7] = [
    "configure",
    "start",
    "stop",
    "hold",
    "resume",
    "set_gains",
    "set_limits",
];

fn field_u64(obj: &Map<String, Value>, key: &str, seq: Option<u64>) -> Result<u64, WireError> {
    match obj.get(key) {
        Some(v) => v.as_u64().ok_or_else(|| {
            WireError::new(
                seq,
                "malformed",
                format!("`{key}` must be a nonnegative integer"),
            )
        }),
        None => Err(WireError::new(seq, "malformed", format!("missing `{key}`"))),
    }
}

fn station_of(obj: &Map<String, Value>, seq: u64) -> Result<usize, WireError> {
    match obj.get("station") {
        None => Err(WireError::new(Some(seq), "malformed", "missing `station`")),
        Some(v) => v.as_u64().map(|s| s as usize).ok_or_else(|| {
            WireError::new(
                Some(seq),
                "bad_station",
                "station must be a nonnegative integer",
            )
        }),
    }
}

fn channel_of(obj: &Map<String, Value>, seq: u64) -> Result<u8, WireError> {
    let c = field_u64(obj, "channel", Some(seq))?;
    u8::try_from(c).map_err(|_| WireError::new(Some(seq), "bad_channel", format!("no channel {c}")))
}

fn payload(obj: &Map<String, Value>, seq: u64) -> Result<Value, WireError> {
    obj.get("payload")
        .cloned()
        .ok_or_else(|| WireError::new(Some(seq), "malformed", "missing `payload`"))
}

fn invalid(seq: u64, message: String) -> WireError {
    WireError::new(Some(seq), "invalid_config", message)
}

/// Parses one client message. Anything that fails here never reaches the engine.
pub fn parse_request(text: &str) -> Result<(u64, Request), WireError> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| WireError::new(None, "malformed", format!("not JSON: {e}")))?;
    let Value::Object(obj) = value else {
        return Err(WireError::new(
            None,
            "malformed",
            "message must be a JSON object",
        ));
    };
    let seq = obj.get("seq").and_then(Value::as_u64);
    let ty = obj
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| WireError::new(seq, "malformed", "missing `type`"))?;
    let known = STATION_COMMANDS.contains(&ty)
        || matches!(
            ty,
            "auth" | "estop" | "subscribe" | "unsubscribe" | "status" | "describe"
        );
    if !known {
        return Err(WireError::new(
            seq,
            "unknown_type",
            format!("unknown type `{ty}`"),
        ));
    }
    let seq = field_u64(&obj, "seq", None)?;

    let request = match ty {
        "auth" => Request::Auth {
            token: obj
                .get("token")
                .and_then(Value::as_str)
                .ok_or_else(|| WireError::new(Some(seq), "malformed", "missing `token`"))?
                .to_string(),
        },
        "estop" => Request::Command {
            station: None,
            kind: CommandKind::Estop,
        },
        "status" => Request::Status,
        "describe" => Request::Describe,
        "subscribe" => Request::Subscribe {
            station: station_of(&obj, seq)?,
            channel: channel_of(&obj, seq)?,
            decimation: match obj.get("decimation") {
                None => 0,
                Some(_) => field_u64(&obj, "decimation", Some(seq))?,
            },
        },
        "unsubscribe" => Request::Unsubscribe {
            station: station_of(&obj, seq)?,
            channel: channel_of(&obj, seq)?,
        },
        _ => {
            let station = station_of(&obj, seq)?;
            let kind = match ty {
                "configure" => {
                    let test =
                        parse_test(payload(&obj, seq)?).map_err(|e| invalid(seq, e.to_string()))?;
                    CommandKind::Configure(Box::new(test))
                }
                "start" => CommandKind::Start,
                "stop" => CommandKind::Stop,
                "hold" => CommandKind::Hold,
                "resume" => CommandKind::Resume,
                "set_gains" => {
                    let patch: GainsPatch = serde_json::from_value(payload(&obj, seq)?)
                        .map_err(|e| invalid(seq, e.to_string()))?;
                    CommandKind::SetGains(patch)
                }
                "set_limits" => {
                    let limits: Vec<Limit> = serde_json::from_value(payload(&obj, seq)?)
                        .map_err(|e| invalid(seq, e.to_string()))?;
                    CommandKind::SetLimits(limits)
                }
                _ => unreachable!("filtered by the known-type check"),
            };
            Request::Command {
                station: Some(station),
                kind,
            }
        }
    };
    Ok((seq, request))
}
