//! Live-session control: a processor thread that owns the streaming
//! pipeline, and a JSON-lines / WebSocket endpoint that lets consoles steer
//! it and watch telemetry, spectrum and mask frames.
//!
//! Protocol version 1; see `docs/protocol.md` for the message schema.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::PROTOCOL_VERSION;
pub use server::{serve, Service};
pub use session::{snapshot, Session, SessionHandle, SessionOptions, SessionSnapshot, SessionState, Sink};
