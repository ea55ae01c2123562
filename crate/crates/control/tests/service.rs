use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use avse_control::{serve, snapshot, Session, SessionOptions, SessionState};
use avse_core::engine::AudioSource;
use avse_core::masknet::{ModelConfig, ModelWeights};
use avse_core::{MaskNet, SessionConfig};

fn net() -> Arc<MaskNet> {
    Arc::new(MaskNet::from_weights(&ModelWeights::random(ModelConfig::tiny(), 3).unwrap()).unwrap())
}

fn session(duration_s: Option<f64>, realtime: bool) -> Session {
    let cfg = SessionConfig {
        audio_source: AudioSource::Synthetic { seed: 2, duration_s },
        telemetry_period_ms: 20,
        ..SessionConfig::default()
    };
    let opts = SessionOptions {
        realtime,
        watchdog: Duration::from_secs(1),
    };
    Session::spawn(cfg, net(), opts, None).unwrap()
}

struct Client {
    out: TcpStream,
    inp: BufReader<TcpStream>,
    seen: Vec<Value>,
}

impl Client {
    fn connect(addr: std::net::SocketAddr) -> Client {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_millis(50))).unwrap();
        Client {
            out: s.try_clone().unwrap(),
            inp: BufReader::new(s),
            seen: Vec::new(),
        }
    }

    fn send_raw(&mut self, line: &str) {
        self.out.write_all(line.as_bytes()).unwrap();
        self.out.write_all(b"\n").unwrap();
    }

    fn send(&mut self, v: Value) {
        self.send_raw(&v.to_string());
    }

    fn wait(&mut self, timeout: Duration, mut pred: impl FnMut(&Value) -> bool) -> Option<Value> {
        let end = Instant::now() + timeout;
        let mut line = String::new();
        while Instant::now() < end {
            line.clear();
            match self.inp.read_line(&mut line) {
                Ok(0) => return None,
                Ok(_) => {
                    let v: Value = serde_json::from_str(line.trim()).expect("server sent valid JSON");
                    assert_eq!(v["v"], 1, "missing protocol version: {v}");
                    self.seen.push(v.clone());
                    if pred(&v) {
                        return Some(v);
                    }
                }
                Err(_) => {}
            }
        }
        None
    }

    fn reply(&mut self, id: &str) -> Value {
        self.wait(Duration::from_secs(5), |v| v["id"] == id && (v["type"] == "ack" || v["type"] == "error"))
            .unwrap_or_else(|| panic!("no reply to {id}"))
    }
}

const T: Duration = Duration::from_secs(5);

#[test]
fn ping_is_acked() {
    let s = session(Some(1.0), false);
    let svc = serve("127.0.0.1:0", s.handle()).unwrap();
    let mut c = Client::connect(svc.local_addr());
    c.send(json!({"v":1,"type":"ping","id":"1"}));
    let r = c.reply("1");
    assert_eq!(r["type"], "ack");
    assert!(r["seq"].as_u64().unwrap() >= 1);
}

#[test]
fn malformed_and_unknown_messages_keep_the_connection() {
    let s = session(Some(1.0), false);
    let h = s.handle();
    let svc = serve("127.0.0.1:0", h.clone()).unwrap();
    let mut c = Client::connect(svc.local_addr());
    c.send_raw("{this is not json");
    let e = c.wait(T, |v| v["type"] == "error").unwrap();
    assert!(e["payload"]["message"].as_str().unwrap().contains("malformed"));
    c.send(json!({"v":1,"type":"self_destruct","id":"u1"}));
    let e = c.reply("u1");
    assert_eq!(e["type"], "error");
    c.send(json!({"v":1,"type":"set_enhancement","id":"b1","payload":{"enabled":"no"}}));
    assert_eq!(c.reply("b1")["type"], "error");
    c.send(json!({"v":2,"type":"ping","id":"v2"}));
    assert_eq!(c.reply("v2")["type"], "error");
    // Session unchanged, connection alive.
    assert!(snapshot(&h).telemetry.enhancement_enabled);
    assert_eq!(snapshot(&h).state, SessionState::Idle);
    c.send(json!({"v":1,"type":"ping","id":"2"}));
    assert_eq!(c.reply("2")["type"], "ack");
}

#[test]
fn toggle_is_visible_to_every_console() {
    let s = session(None, true);
    let h = s.handle();
    let svc = serve("127.0.0.1:0", h.clone()).unwrap();
    let mut a = Client::connect(svc.local_addr());
    let mut b = Client::connect(svc.local_addr());
    for (c, id) in [(&mut a, "sa"), (&mut b, "sb")] {
        c.send(json!({"v":1,"type":"subscribe","id":id,"payload":{"streams":["telemetry"]}}));
        assert_eq!(c.reply(id)["type"], "ack");
    }
    a.send(json!({"v":1,"type":"start","id":"go"}));
    assert_eq!(a.reply("go")["type"], "ack");
    a.send(json!({"v":1,"type":"set_enhancement","id":"off","payload":{"enabled":false}}));
    assert_eq!(a.reply("off")["type"], "ack");
    for c in [&mut a, &mut b] {
        let t = c
            .wait(T, |v| v["type"] == "telemetry" && v["payload"]["enhancement_enabled"] == false)
            .expect("telemetry shows bypass");
        assert_eq!(t["payload"]["algorithmic_latency_ms"], 120.0);
    }
    // Idempotent repeat: ack only.
    b.send(json!({"v":1,"type":"set_enhancement","id":"off2","payload":{"enabled":false}}));
    assert_eq!(b.reply("off2")["type"], "ack");
    assert!(!snapshot(&h).telemetry.enhancement_enabled);
}

#[test]
fn seq_and_frame_indices_increase() {
    let s = session(Some(3.0), true);
    let svc = serve("127.0.0.1:0", s.handle()).unwrap();
    let mut c = Client::connect(svc.local_addr());
    c.send(json!({"v":1,"type":"subscribe","id":"s"}));
    c.reply("s");
    c.send(json!({"v":1,"type":"start","id":"go"}));
    c.reply("go");
    let mut spectra = 0;
    c.wait(T, |v| {
        if v["type"] == "spectrum" {
            spectra += 1;
        }
        spectra >= 20
    })
    .expect("spectrum frames");
    let seqs: Vec<u64> = c.seen.iter().map(|v| v["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[1] > w[0]), "seq not increasing: {seqs:?}");
    for kind in ["spectrum", "mask"] {
        let frames: Vec<u64> = c
            .seen
            .iter()
            .filter(|v| v["type"] == kind)
            .map(|v| v["payload"]["frame"].as_u64().unwrap())
            .collect();
        assert!(!frames.is_empty());
        assert!(frames.windows(2).all(|w| w[1] > w[0]), "{kind} frames: {frames:?}");
        let bins = c.seen.iter().find(|v| v["type"] == kind).unwrap()["payload"]["bins"].as_array().unwrap().len();
        assert_eq!(bins, 64);
    }
    let spec = c.seen.iter().find(|v| v["type"] == "spectrum").unwrap();
    for b in spec["payload"]["bins"].as_array().unwrap() {
        let x = b.as_f64().unwrap();
        assert!((-80.0..=0.0).contains(&x));
    }
}

#[test]
fn snapshot_counts_ticks() {
    let s = session(Some(5.0), false);
    let h = s.handle();
    assert_eq!(snapshot(&h).telemetry.ticks_processed, 0);
    h.start().unwrap();
    let mut last_misses = 0;
    let end = Instant::now() + Duration::from_secs(30);
    loop {
        let snap = snapshot(&h);
        assert!(snap.telemetry.deadline_misses >= last_misses);
        last_misses = snap.telemetry.deadline_misses;
        if snap.state != SessionState::Running || Instant::now() > end {
            break;
        }
    }
    let snap = snapshot(&h);
    assert_eq!(snap.state, SessionState::Finished);
    assert!(snap.stopped);
    assert_eq!(snap.telemetry.ticks_processed, 125);
}

#[test]
fn stalled_console_does_not_slow_the_processor() {
    let s = session(Some(30.0), false);
    let h = s.handle();
    let svc = serve("127.0.0.1:0", h.clone()).unwrap();
    // Subscribes to full-resolution frames and then never reads.
    let mut lazy = Client::connect(svc.local_addr());
    lazy.send(json!({"v":1,"type":"subscribe","id":"s","payload":{"verbose":true}}));
    std::thread::sleep(Duration::from_millis(100));
    h.start().unwrap();
    let done = s.wait_until_done(Duration::from_secs(60));
    assert_eq!(done.state, SessionState::Finished);
    assert_eq!(done.telemetry.ticks_processed, 750);
    assert!(done.telemetry.p95_processing_ms < 40.0);
    assert!(h.hub().dropped() > 0, "expected droppable frames to be discarded");
}

#[test]
fn websocket_console_script() {
    let s = session(None, true);
    let svc = serve("127.0.0.1:0", s.handle()).unwrap();
    let stream = TcpStream::connect(svc.local_addr()).unwrap();
    let url = format!("ws://{}/", svc.local_addr());
    let (mut ws, _) = tungstenite::client(url.as_str(), stream).unwrap();
    ws.get_mut().set_read_timeout(Some(Duration::from_millis(50))).unwrap();
    let mut seen: Vec<Value> = Vec::new();
    let send = |ws: &mut tungstenite::WebSocket<TcpStream>, v: Value| {
        ws.send(tungstenite::Message::text(v.to_string())).unwrap();
    };
    let wait = |ws: &mut tungstenite::WebSocket<TcpStream>, seen: &mut Vec<Value>, pred: &dyn Fn(&Value) -> bool| {
        let end = Instant::now() + T;
        while Instant::now() < end {
            match ws.read() {
                Ok(tungstenite::Message::Text(t)) => {
                    let v: Value = serde_json::from_str(t.as_str()).unwrap();
                    assert_eq!(v["v"], 1);
                    seen.push(v.clone());
                    if pred(&v) {
                        return v;
                    }
                }
                Ok(_) => {}
                Err(tungstenite::Error::Io(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
        panic!("timed out");
    };
    send(&mut ws, json!({"v":1,"type":"subscribe","id":"s"}));
    wait(&mut ws, &mut seen, &|v| v["id"] == "s");
    send(&mut ws, json!({"v":1,"type":"start","id":"go"}));
    wait(&mut ws, &mut seen, &|v| v["id"] == "go");
    for (id, on) in [("t1", false), ("t2", true)] {
        send(&mut ws, json!({"v":1,"type":"set_enhancement","id":id,"payload":{"enabled":on}}));
        let ack = wait(&mut ws, &mut seen, &|v| v["id"] == id);
        assert_eq!(ack["type"], "ack");
        wait(&mut ws, &mut seen, &|v| v["type"] == "telemetry" && v["payload"]["enhancement_enabled"] == on);
    }
    let frames: Vec<u64> = seen
        .iter()
        .filter(|v| v["type"] == "spectrum")
        .map(|v| v["payload"]["frame"].as_u64().unwrap())
        .collect();
    assert!(frames.len() >= 2);
    assert!(frames.windows(2).all(|w| w[1] > w[0]));
    let seqs: Vec<u64> = seen.iter().map(|v| v["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[1] > w[0]));
}
