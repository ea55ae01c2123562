//! Wire protocol: one UTF-8 JSON object per line (or per WebSocket text
//! frame), each carrying `"v": 1`.

use std::path::PathBuf;

use avse_core::engine::{AudioSource, EmbeddingSource};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const PROTOCOL_VERSION: u64 = 1;
/// Width of the downsampled spectrum and mask views.
pub const VIEW_BANDS: usize = 64;
pub const DB_FLOOR: f64 = -80.0;
/// Magnitude of a full-scale sinusoid's peak bin: half the window sum.
pub const FULL_SCALE_MAGNITUDE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandType {
    SetEnhancement,
    SetSession,
    Start,
    Stop,
    Subscribe,
    Ping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Telemetry,
    Spectrum,
    Mask,
    Stall,
    Ack,
    Error,
}

impl EventType {
    /// Droppable events may be discarded under backpressure; all others are
    /// delivered in order or the connection is closed.
    pub fn is_droppable(self) -> bool {
        matches!(self, EventType::Spectrum | EventType::Mask)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlMessage {
    pub kind: CommandType,
    pub id: Option<String>,
    pub payload: Value,
}

/// A message that could not be accepted; `id` is echoed when recoverable.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub id: Option<String>,
    pub message: String,
}

fn reject(id: Option<String>, message: impl Into<String>) -> Rejection {
    Rejection {
        id,
        message: message.into(),
    }
}

pub fn parse_message(text: &str) -> Result<ControlMessage, Rejection> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| reject(None, format!("malformed JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(reject(None, "message must be a JSON object"));
    };
    let id = match obj.remove("id") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s),
        Some(_) => return Err(reject(None, "`id` must be a string")),
    };
    match obj.get("v").and_then(Value::as_u64) {
        Some(PROTOCOL_VERSION) => {}
        Some(v) => return Err(reject(id, format!("unsupported protocol version {v}"))),
        None => return Err(reject(id, "missing protocol version `v`")),
    }
    let kind = match obj.remove("type") {
        Some(Value::String(t)) => serde_json::from_value(Value::String(t.clone()))
            .map_err(|_| reject(id.clone(), format!("unknown message type `{t}`")))?,
        _ => return Err(reject(id, "missing message `type`")),
    };
    let payload = match obj.remove("payload") {
        None | Some(Value::Null) => json!({}),
        Some(p @ Value::Object(_)) => p,
        Some(_) => return Err(reject(id, "`payload` must be an object")),
    };
    Ok(ControlMessage { kind, id, payload })
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetEnhancement {
    pub enabled: bool,
}

/// Fields left out keep their current value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionUpdate {
    #[serde(default)]
    pub audio_source: Option<AudioSource>,
    #[serde(default)]
    pub embedding_source: Option<EmbeddingSource>,
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    #[serde(default)]
    pub enhancement_enabled: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Telemetry,
    Spectrum,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Subscribe {
    #[serde(default = "all_streams")]
    pub streams: Vec<Stream>,
    /// Send full-resolution frames instead of the 64-band views.
    #[serde(default)]
    pub verbose: bool,
}

fn all_streams() -> Vec<Stream> {
    vec![Stream::Telemetry, Stream::Spectrum, Stream::Mask]
}

pub fn payload<T: serde::de::DeserializeOwned>(msg: &ControlMessage) -> Result<T, Rejection> {
    serde_json::from_value(msg.payload.clone())
        .map_err(|e| reject(msg.id.clone(), format!("bad payload for {:?}: {e}", msg.kind)))
}

/// Serialise one outgoing event line (without the trailing newline).
pub fn event_json(kind: EventType, seq: u64, id: Option<&str>, payload: Value) -> String {
    let mut v = json!({ "v": PROTOCOL_VERSION, "type": kind, "seq": seq, "payload": payload });
    if let Some(id) = id {
        v["id"] = Value::String(id.to_string());
    }
    v.to_string()
}

/// `bands + 1` strictly increasing bin edges, log spaced from 0 to `bins`.
pub fn band_edges(bins: usize, bands: usize) -> Vec<usize> {
    assert!(bands >= 1 && bins >= bands);
    let mut edges = vec![0usize];
    for k in 1..bands {
        let ideal = ((bins as f64).powf(k as f64 / bands as f64) - 1.0).round() as usize;
        let lo = edges[k - 1] + 1;
        let hi = bins - (bands - k);
        edges.push(ideal.clamp(lo, hi));
    }
    edges.push(bins);
    edges
}

fn band_means(values: &[f64], bands: usize) -> Vec<f64> {
    let e = band_edges(values.len(), bands);
    e.windows(2)
        .map(|w| values[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64)
        .collect()
}

/// Noisy magnitude frame as 64 log-spaced bands in dB re full scale,
/// clamped to [-80, 0].
pub fn spectrum_view(magnitudes: &[f64]) -> Vec<f64> {
    band_means(magnitudes, VIEW_BANDS)
        .into_iter()
        .map(|m| {
            if m > 0.0 {
                (20.0 * (m / FULL_SCALE_MAGNITUDE).log10()).clamp(DB_FLOOR, 0.0)
            } else {
                DB_FLOOR
            }
        })
        .collect()
}

/// Mask frame averaged into 64 log-spaced bands.
pub fn mask_view(mask: &[f64]) -> Vec<f64> {
    band_means(mask, VIEW_BANDS)
}
