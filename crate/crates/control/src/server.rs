//! TCP endpoint. Each connection speaks newline-delimited JSON unless its
//! first bytes are an HTTP `GET`, in which case it is upgraded to a
//! WebSocket carrying the same messages as text frames.

use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, select, tick, Sender};
use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

use crate::protocol::{
    mask_view, parse_message, payload, spectrum_view, CommandType, EventType, Rejection, SessionUpdate,
    SetEnhancement, Stream, Subscribe,
};
use crate::session::{Event, SessionHandle, Subscriber, Subscription};

const RELIABLE_CAPACITY: usize = 256;
/// About one second of spectrum and mask frames.
const DROPPABLE_CAPACITY: usize = 64;
const MAX_LINE: usize = 1 << 20;

/// A running control endpoint.
pub struct Service {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Service {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting connections. Open connections end when their peers
    /// disconnect.
    pub fn shutdown(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.halt();
    }
}

pub fn serve(bind: &str, session: SessionHandle) -> io::Result<Service> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = std::thread::Builder::new()
        .name("avse-accept".into())
        .spawn(move || {
            while !flag.load(Ordering::Acquire) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let s = session.clone();
                        let _ = std::thread::Builder::new()
                            .name("avse-conn".into())
                            .spawn(move || handle_connection(stream, s));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(_) => std::thread::sleep(Duration::from_millis(5)),
                }
            }
        })?;
    Ok(Service {
        addr,
        stop,
        thread: Some(thread),
    })
}

fn is_websocket(stream: &TcpStream) -> io::Result<bool> {
    const GET: &[u8] = b"GET ";
    let deadline = Instant::now() + Duration::from_secs(2);
    let mut buf = [0u8; 4];
    loop {
        let n = stream.peek(&mut buf)?;
        if n == 0 {
            return Ok(false);
        }
        if buf[..n] != GET[..n] {
            return Ok(false);
        }
        if n == GET.len() {
            return Ok(true);
        }
        if Instant::now() > deadline {
            return Ok(false);
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn handle_connection(stream: TcpStream, session: SessionHandle) {
    let _ = stream.set_nodelay(true);
    let Ok(ws) = is_websocket(&stream) else {
        return;
    };
    let hub = session.hub().clone();
    let sub = hub.register(RELIABLE_CAPACITY, DROPPABLE_CAPACITY);
    let id = sub.subscriber.id;
    if ws {
        if let Ok(socket) = tungstenite::accept(stream) {
            run_websocket(socket, &session, sub);
        }
    } else {
        run_lines(stream, &session, sub);
    }
    hub.unregister(id);
}

/// Outgoing message before sequencing.
enum Outgoing {
    Reply { kind: EventType, id: Option<String>, payload: Value },
    Pushed(Event),
}

struct Writer {
    seq: u64,
    session: SessionHandle,
    subscriber: Arc<Subscriber>,
}

impl Writer {
    fn encode(&mut self, out: Outgoing) -> String {
        let (kind, id, payload) = match out {
            Outgoing::Reply { kind, id, payload } => (kind, id, payload),
            Outgoing::Pushed(ev) => {
                let verbose = self.subscriber.verbose();
                match ev {
                    Event::Spectrum { frame, values } => {
                        let bins = if verbose { values.to_vec() } else { spectrum_view(&values) };
                        (EventType::Spectrum, None, json!({ "frame": frame, "bins": bins }))
                    }
                    Event::Mask { frame, values } => {
                        let bins = if verbose { values.to_vec() } else { mask_view(&values) };
                        (EventType::Mask, None, json!({ "frame": frame, "bins": bins }))
                    }
                    Event::Stall { tick, stalls } => (EventType::Stall, None, json!({ "tick": tick, "stalls": stalls })),
                }
            }
        };
        self.seq += 1;
        crate::protocol::event_json(kind, self.seq, id.as_deref(), payload)
    }

    fn telemetry(&mut self) -> Option<String> {
        if !self.subscriber.wants(Stream::Telemetry) {
            return None;
        }
        let snap = self.session.snapshot();
        let payload = serde_json::to_value(&*snap).expect("snapshot serialises");
        Some(self.encode(Outgoing::Reply {
            kind: EventType::Telemetry,
            id: None,
            payload,
        }))
    }
}

/// Handle one inbound message; always yields exactly one ack or error.
fn dispatch(text: &str, session: &SessionHandle, sub: &Subscriber) -> Outgoing {
    let reply = |id: Option<String>, r: Result<Value, String>| match r {
        Ok(payload) => Outgoing::Reply {
            kind: EventType::Ack,
            id,
            payload,
        },
        Err(message) => Outgoing::Reply {
            kind: EventType::Error,
            id,
            payload: json!({ "message": message }),
        },
    };
    let msg = match parse_message(text) {
        Ok(m) => m,
        Err(Rejection { id, message }) => return reply(id, Err(message)),
    };
    let id = msg.id.clone();
    let result = (|| -> Result<Value, Rejection> {
        let err = |message: String| Rejection {
            id: msg.id.clone(),
            message,
        };
        match msg.kind {
            CommandType::Ping => Ok(json!({})),
            CommandType::Subscribe => {
                let s: Subscribe = payload(&msg)?;
                sub.set_streams(&s.streams, s.verbose);
                Ok(json!({ "streams": s.streams, "verbose": s.verbose }))
            }
            CommandType::SetEnhancement => {
                let p: SetEnhancement = payload(&msg)?;
                session.set_enhancement(p.enabled).map_err(err)?;
                Ok(json!({ "enabled": p.enabled }))
            }
            CommandType::SetSession => {
                let u: SessionUpdate = payload(&msg)?;
                session.update(u).map_err(err)?;
                Ok(json!({}))
            }
            CommandType::Start => session.start().map(|_| json!({})).map_err(err),
            CommandType::Stop => session.stop().map(|_| json!({})).map_err(err),
        }
    })();
    reply(id, result.map_err(|r| r.message))
}

fn run_lines(stream: TcpStream, session: &SessionHandle, sub: Subscription) {
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let (reply_tx, reply_rx) = bounded::<Outgoing>(RELIABLE_CAPACITY);
    let (done_tx, done_rx) = bounded::<()>(0);
    let subscriber = sub.subscriber.clone();
    let reader_session = session.clone();
    let reader = std::thread::spawn(move || {
        read_lines(read_half, &reader_session, &subscriber, &reply_tx);
        drop(done_tx);
    });
    let mut writer = Writer {
        seq: 0,
        session: session.clone(),
        subscriber: sub.subscriber.clone(),
    };
    let mut out = BufWriter::new(&stream);
    let ticker = tick(session.telemetry_period());
    let mut write = |line: String| -> io::Result<()> {
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
        out.flush()
    };
    loop {
        if sub.subscriber.is_closed() {
            break;
        }
        let line = select! {
            recv(reply_rx) -> m => match m {
                Ok(m) => Some(writer.encode(m)),
                Err(_) => break,
            },
            recv(sub.reliable) -> ev => ev.ok().map(|e| writer.encode(Outgoing::Pushed(e))),
            recv(sub.droppable) -> ev => ev.ok().map(|e| writer.encode(Outgoing::Pushed(e))),
            recv(ticker) -> _ => writer.telemetry(),
            recv(done_rx) -> _ => {
                // Flush replies queued before the peer hung up.
                for m in reply_rx.try_iter() {
                    let _ = write(writer.encode(m));
                }
                break;
            }
        };
        if let Some(line) = line {
            if write(line).is_err() {
                break;
            }
        }
    }
    let _ = stream.shutdown(std::net::Shutdown::Both);
    let _ = reader.join();
}

fn read_lines(stream: TcpStream, session: &SessionHandle, sub: &Subscriber, replies: &Sender<Outgoing>) {
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        buf.clear();
        match reader.by_ref().take(MAX_LINE as u64 + 1).read_until(b'\n', &mut buf) {
            Ok(0) | Err(_) => return,
            Ok(_) => {}
        }
        if buf.len() > MAX_LINE {
            let _ = replies.send(Outgoing::Reply {
                kind: EventType::Error,
                id: None,
                payload: json!({ "message": "message exceeds 1 MiB" }),
            });
            return;
        }
        let text = String::from_utf8_lossy(&buf);
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        if replies.send(dispatch(text, session, sub)).is_err() {
            return;
        }
    }
}

fn run_websocket(mut ws: WebSocket<TcpStream>, session: &SessionHandle, sub: Subscription) {
    if ws.get_mut().set_read_timeout(Some(Duration::from_millis(10))).is_err() {
        return;
    }
    let mut writer = Writer {
        seq: 0,
        session: session.clone(),
        subscriber: sub.subscriber.clone(),
    };
    let period = session.telemetry_period();
    let mut next_telemetry = Instant::now() + period;
    let mut pending: Vec<String> = Vec::new();
    loop {
        if sub.subscriber.is_closed() {
            break;
        }
        match ws.read() {
            Ok(Message::Text(t)) => pending.push(writer.encode(dispatch(t.as_str(), session, &sub.subscriber))),
            Ok(Message::Binary(_)) => pending.push(writer.encode(Outgoing::Reply {
                kind: EventType::Error,
                id: None,
                payload: json!({ "message": "binary frames are not supported" }),
            })),
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
        for ev in sub.reliable.try_iter().chain(sub.droppable.try_iter()) {
            pending.push(writer.encode(Outgoing::Pushed(ev)));
        }
        if Instant::now() >= next_telemetry {
            next_telemetry += period;
            pending.extend(writer.telemetry());
        }
        for line in pending.drain(..) {
            if ws.send(Message::text(line)).is_err() {
                return;
            }
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
}
