//! A live session: one processor thread owning all pipeline state, an
//! ingest thread producing ticks, and lock-free snapshots for readers.

use std::io::Read;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, Sender, TrySendError};
use serde::Serialize;

use avse_core::embed::{EmbeddingProvider, FileProvider, SyntheticProvider};
use avse_core::engine::{AudioSource, EmbeddingSource, SyntheticAudio};
use avse_core::masknet::load_model;
use avse_core::pcm::PcmChunkReader;
use avse_core::wav::read_wav;
use avse_core::{MaskNet, SessionConfig, StreamProcessor, Telemetry};

use crate::protocol::{SessionUpdate, Stream};

const TICK: usize = avse_core::SAMPLES_PER_TICK;
const TICK_PERIOD: Duration = Duration::from_millis(40);
const COMMAND_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct SessionOptions {
    /// Pace ticks at 25 per second; otherwise run as fast as input allows.
    pub realtime: bool,
    /// How long to wait for an input tick before declaring a stall.
    pub watchdog: Duration,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            realtime: true,
            watchdog: 2 * TICK_PERIOD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    Running,
    Stopped,
    Finished,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSnapshot {
    #[serde(flatten)]
    pub telemetry: Telemetry,
    pub state: SessionState,
    /// True whenever the session is not producing ticks.
    pub stopped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub audio_source: AudioSource,
    pub embedding_source: EmbeddingSource,
}

/// Receives every output chunk, enhanced or bypassed; silence on stalls.
pub type Sink = Box<dyn FnMut(&[f64]) + Send>;

/// Pushed events that do not originate from a client command.
#[derive(Debug, Clone)]
pub enum Event {
    Spectrum { frame: usize, values: Arc<Vec<f64>> },
    Mask { frame: usize, values: Arc<Vec<f64>> },
    Stall { tick: u64, stalls: u64 },
}

pub struct Subscriber {
    pub id: u64,
    reliable: Sender<Event>,
    droppable: Sender<Event>,
    streams: AtomicU8,
    verbose: AtomicBool,
    closed: AtomicBool,
}

fn stream_bit(s: Stream) -> u8 {
    match s {
        Stream::Telemetry => 1,
        Stream::Spectrum => 2,
        Stream::Mask => 4,
    }
}

impl Subscriber {
    pub fn set_streams(&self, streams: &[Stream], verbose: bool) {
        let bits = streams.iter().fold(0, |b, &s| b | stream_bit(s));
        self.streams.store(bits, Ordering::Release);
        self.verbose.store(verbose, Ordering::Release);
    }

    pub fn wants(&self, s: Stream) -> bool {
        self.streams.load(Ordering::Acquire) & stream_bit(s) != 0
    }

    pub fn verbose(&self) -> bool {
        self.verbose.load(Ordering::Acquire)
    }

    /// Set when the subscriber could not keep up with reliable events.
    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }
}

/// Fan-out of processor events to connections. The processor only ever
/// uses non-blocking sends.
#[derive(Default)]
pub struct Hub {
    subs: ArcSwap<Vec<Arc<Subscriber>>>,
    next_id: AtomicU64,
    dropped: AtomicU64,
}

pub struct Subscription {
    pub subscriber: Arc<Subscriber>,
    pub reliable: Receiver<Event>,
    pub droppable: Receiver<Event>,
}

impl Hub {
    pub fn register(&self, reliable_cap: usize, droppable_cap: usize) -> Subscription {
        let (rtx, rrx) = bounded(reliable_cap);
        let (dtx, drx) = bounded(droppable_cap);
        let sub = Arc::new(Subscriber {
            id: self.next_id.fetch_add(1, Ordering::Relaxed),
            reliable: rtx,
            droppable: dtx,
            streams: AtomicU8::new(0),
            verbose: AtomicBool::new(false),
            closed: AtomicBool::new(false),
        });
        self.subs.rcu(|v| {
            let mut v = (**v).clone();
            v.push(sub.clone());
            v
        });
        Subscription {
            subscriber: sub,
            reliable: rrx,
            droppable: drx,
        }
    }

    pub fn unregister(&self, id: u64) {
        self.subs
            .rcu(|v| v.iter().filter(|s| s.id != id).cloned().collect::<Vec<_>>());
    }

    pub fn subscriber_count(&self) -> usize {
        self.subs.load().len()
    }

    /// Spectrum and mask events discarded because a subscriber was full.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    fn wants(&self, s: Stream) -> bool {
        self.subs.load().iter().any(|sub| sub.wants(s))
    }

    fn publish(&self, stream: Option<Stream>, ev: Event) {
        for sub in self.subs.load().iter() {
            match stream {
                Some(s) => {
                    if sub.wants(s) && sub.droppable.try_send(ev.clone()).is_err() {
                        self.dropped.fetch_add(1, Ordering::Relaxed);
                    }
                }
                None => {
                    if let Err(TrySendError::Full(_)) = sub.reliable.try_send(ev.clone()) {
                        sub.closed.store(true, Ordering::Release);
                    }
                }
            }
        }
    }
}

enum Command {
    SetEnhancement(bool),
    Update(Box<SessionUpdate>),
    Start,
    Stop,
    Shutdown,
}

struct Request {
    command: Command,
    reply: Sender<Result<(), String>>,
}

#[derive(Clone)]
pub struct SessionHandle {
    commands: Sender<Request>,
    snapshot: Arc<ArcSwap<SessionSnapshot>>,
    hub: Arc<Hub>,
    telemetry_period: Duration,
}

impl SessionHandle {
    fn request(&self, command: Command) -> Result<(), String> {
        let (tx, rx) = bounded(1);
        self.commands
            .send(Request { command, reply: tx })
            .map_err(|_| "session has shut down".to_string())?;
        rx.recv_timeout(COMMAND_TIMEOUT)
            .map_err(|_| "session did not respond".to_string())?
    }

    /// Takes effect at the next tick boundary. Setting the current value is
    /// a no-op.
    pub fn set_enhancement(&self, enabled: bool) -> Result<(), String> {
        self.request(Command::SetEnhancement(enabled))
    }

    pub fn update(&self, update: SessionUpdate) -> Result<(), String> {
        self.request(Command::Update(Box::new(update)))
    }

    pub fn start(&self) -> Result<(), String> {
        self.request(Command::Start)
    }

    pub fn stop(&self) -> Result<(), String> {
        self.request(Command::Stop)
    }

    pub fn snapshot(&self) -> Arc<SessionSnapshot> {
        self.snapshot.load_full()
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    pub fn telemetry_period(&self) -> Duration {
        self.telemetry_period
    }
}

/// Consistent point-in-time copy of the session's telemetry. Never blocks
/// the processor.
pub fn snapshot(session: &SessionHandle) -> Arc<SessionSnapshot> {
    session.snapshot()
}

pub struct Session {
    handle: SessionHandle,
    thread: Option<JoinHandle<()>>,
}

impl Session {
    pub fn spawn(
        config: SessionConfig,
        net: Arc<MaskNet>,
        options: SessionOptions,
        sink: Option<Sink>,
    ) -> avse_core::Result<Session> {
        let processor = StreamProcessor::new(&config, net.clone())?;
        let sources = Sources::open(&config, net.config().visual_dim)?;
        let snapshot = Arc::new(ArcSwap::from_pointee(SessionSnapshot {
            telemetry: processor.telemetry(),
            state: SessionState::Idle,
            stopped: true,
            message: None,
            audio_source: config.audio_source.clone(),
            embedding_source: config.embedding_source.clone(),
        }));
        let hub = Arc::new(Hub::default());
        let (tx, rx) = bounded(64);
        let handle = SessionHandle {
            commands: tx,
            snapshot: snapshot.clone(),
            hub: hub.clone(),
            telemetry_period: Duration::from_millis(config.telemetry_period_ms.max(1)),
        };
        let mut worker = Worker {
            config,
            net,
            options,
            processor,
            sources: Some(sources),
            ingest: None,
            state: SessionState::Idle,
            message: None,
            sink,
            snapshot,
            hub,
            next_deadline: None,
        };
        let thread = std::thread::Builder::new()
            .name("avse-processor".into())
            .spawn(move || worker.run(rx))
            .map_err(|e| avse_core::Error::InvalidArgument(format!("cannot start processor thread: {e}")))?;
        Ok(Session {
            handle,
            thread: Some(thread),
        })
    }

    pub fn handle(&self) -> SessionHandle {
        self.handle.clone()
    }

    /// Block until the session leaves the running state or `timeout` passes.
    pub fn wait_until_done(&self, timeout: Duration) -> Arc<SessionSnapshot> {
        let end = Instant::now() + timeout;
        loop {
            let s = self.handle.snapshot();
            if s.state != SessionState::Running || Instant::now() >= end {
                return s;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    pub fn shutdown(mut self) {
        self.stop_thread();
    }

    fn stop_thread(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = self.handle.request(Command::Shutdown);
            let _ = t.join();
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        self.stop_thread();
    }
}

type TickInput = Result<(Vec<f32>, Vec<f64>), String>;

enum AudioInput {
    Samples(Vec<f64>),
    Stdin,
    Synthetic(SyntheticAudio, Option<usize>),
}

/// Opened, validated sources, ready to be consumed by an ingest thread.
struct Sources {
    audio: AudioInput,
    embeddings: Box<dyn EmbeddingProvider>,
}

impl Sources {
    fn open(config: &SessionConfig, dim: usize) -> avse_core::Result<Sources> {
        let audio = match &config.audio_source {
            AudioSource::File { path } => AudioInput::Samples(read_wav(path, avse_core::SAMPLE_RATE)?.samples),
            AudioSource::PcmStdin => AudioInput::Stdin,
            AudioSource::Synthetic { seed, duration_s } => AudioInput::Synthetic(
                SyntheticAudio::new(*seed),
                duration_s.map(|d| (d.max(0.0) * avse_core::VIDEO_FPS as f64).round() as usize),
            ),
        };
        let embeddings: Box<dyn EmbeddingProvider> = match &config.embedding_source {
            EmbeddingSource::File { path } => Box::new(FileProvider::open(path)?),
            EmbeddingSource::Synthetic { seed } => Box::new(SyntheticProvider { dim, seed: *seed }),
        };
        let got = embeddings.descriptor().dim;
        if got != dim {
            return Err(avse_core::Error::InvalidArgument(format!(
                "embedding dimension {got} does not match model visual_dim {dim}"
            )));
        }
        Ok(Sources { audio, embeddings })
    }

    /// Produce ticks until the audio ends or the receiver goes away.
    fn run(self, out: Sender<TickInput>) {
        let Sources { audio, embeddings } = self;
        let embed = |i: usize| {
            embeddings
                .embedding(i)
                .ok_or_else(|| format!("embedding coverage: video frame {i} is not available"))
        };
        let mut emit = |i: usize, chunk: Vec<f64>| -> bool {
            let item = embed(i).map(|e| (e, chunk));
            let failed = item.is_err();
            out.send(item).is_ok() && !failed
        };
        match audio {
            AudioInput::Samples(x) => {
                for (i, c) in x.chunks(TICK).enumerate() {
                    let mut chunk = c.to_vec();
                    chunk.resize(TICK, 0.0);
                    if !emit(i, chunk) {
                        return;
                    }
                }
            }
            AudioInput::Synthetic(mut gen, ticks) => {
                let mut i = 0;
                while ticks.is_none_or(|n| i < n) {
                    let mut chunk = vec![0.0; TICK];
                    gen.fill(&mut chunk);
                    if !emit(i, chunk) {
                        return;
                    }
                    i += 1;
                }
            }
            AudioInput::Stdin => {
                let stdin = std::io::stdin();
                rechunk(PcmChunkReader::new(stdin.lock()), &mut emit, &out);
            }
        }
    }
}

/// Regroup arbitrary-length PCM chunks into 640-sample ticks.
fn rechunk<R: Read>(
    mut reader: PcmChunkReader<R>,
    emit: &mut dyn FnMut(usize, Vec<f64>) -> bool,
    out: &Sender<TickInput>,
) {
    let mut buf: Vec<f64> = Vec::with_capacity(2 * TICK);
    let mut i = 0;
    loop {
        match reader.next_chunk() {
            Ok(Some(c)) => {
                buf.extend(c);
                while buf.len() >= TICK {
                    let rest = buf.split_off(TICK);
                    if !emit(i, std::mem::replace(&mut buf, rest)) {
                        return;
                    }
                    i += 1;
                }
            }
            Ok(None) => break,
            Err(e) => {
                let _ = out.send(Err(format!("PCM input: {e}")));
                return;
            }
        }
    }
    if !buf.is_empty() {
        buf.resize(TICK, 0.0);
        emit(i, buf);
    }
}

struct Worker {
    config: SessionConfig,
    net: Arc<MaskNet>,
    options: SessionOptions,
    processor: StreamProcessor,
    sources: Option<Sources>,
    ingest: Option<Receiver<TickInput>>,
    state: SessionState,
    message: Option<String>,
    sink: Option<Sink>,
    snapshot: Arc<ArcSwap<SessionSnapshot>>,
    hub: Arc<Hub>,
    next_deadline: Option<Instant>,
}

impl Worker {
    fn run(&mut self, commands: Receiver<Request>) {
        loop {
            let wait = match (self.state, self.next_deadline) {
                (SessionState::Running, Some(d)) => d.saturating_duration_since(Instant::now()),
                (SessionState::Running, None) => Duration::ZERO,
                _ => Duration::from_millis(50),
            };
            match commands.recv_timeout(wait) {
                Ok(req) => {
                    if matches!(req.command, Command::Shutdown) {
                        let _ = req.reply.send(Ok(()));
                        return;
                    }
                    let r = self.apply(req.command);
                    self.publish();
                    let _ = req.reply.send(r);
                    continue;
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
            if self.state == SessionState::Running {
                self.tick();
            }
        }
    }

    fn apply(&mut self, command: Command) -> Result<(), String> {
        match command {
            Command::SetEnhancement(on) => {
                self.processor.set_enhancement(on);
                self.config.enhancement_enabled = on;
                Ok(())
            }
            Command::Start => {
                match self.state {
                    SessionState::Running => {}
                    SessionState::Stopped => self.state = SessionState::Running,
                    SessionState::Idle | SessionState::Finished | SessionState::Failed => {
                        if self.sources.is_none() {
                            self.rebuild().map_err(|e| e.to_string())?;
                        }
                        let sources = self.sources.take().expect("sources are open");
                        let (tx, rx) = bounded(8);
                        std::thread::Builder::new()
                            .name("avse-ingest".into())
                            .spawn(move || sources.run(tx))
                            .map_err(|e| e.to_string())?;
                        self.ingest = Some(rx);
                        self.state = SessionState::Running;
                        self.message = None;
                    }
                }
                self.next_deadline = self.options.realtime.then(Instant::now);
                Ok(())
            }
            Command::Stop => {
                if self.state == SessionState::Running {
                    self.state = SessionState::Stopped;
                }
                Ok(())
            }
            Command::Update(u) => {
                let mut cfg = self.config.clone();
                if let Some(a) = u.audio_source {
                    cfg.audio_source = a;
                }
                if let Some(e) = u.embedding_source {
                    cfg.embedding_source = e;
                }
                if let Some(on) = u.enhancement_enabled {
                    cfg.enhancement_enabled = on;
                }
                let net = match &u.model_path {
                    Some(p) => Arc::new(
                        load_model(p)
                            .and_then(|w| MaskNet::from_weights(&w))
                            .map_err(|e| e.to_string())?,
                    ),
                    None => self.net.clone(),
                };
                cfg.model_path = u.model_path.or(cfg.model_path);
                // Validate everything before touching the running session.
                let processor = StreamProcessor::new(&cfg, net.clone()).map_err(|e| e.to_string())?;
                let sources = Sources::open(&cfg, net.config().visual_dim).map_err(|e| e.to_string())?;
                let was_running = matches!(self.state, SessionState::Running | SessionState::Stopped);
                self.config = cfg;
                self.net = net;
                self.processor = processor;
                self.sources = Some(sources);
                self.ingest = None;
                self.state = SessionState::Idle;
                if was_running {
                    self.apply(Command::Start)?;
                }
                Ok(())
            }
            Command::Shutdown => Ok(()),
        }
    }

    fn rebuild(&mut self) -> avse_core::Result<()> {
        self.processor = StreamProcessor::new(&self.config, self.net.clone())?;
        self.sources = Some(Sources::open(&self.config, self.net.config().visual_dim)?);
        Ok(())
    }

    fn tick(&mut self) {
        if let Some(d) = self.next_deadline.as_mut() {
            *d += TICK_PERIOD;
        }
        let Some(ingest) = &self.ingest else {
            return;
        };
        match ingest.recv_timeout(self.options.watchdog) {
            Ok(Ok((emb, chunk))) => match self.processor.process_tick(&emb, &chunk) {
                Ok(out) => {
                    if let Some(sink) = self.sink.as_mut() {
                        sink(&out.samples);
                    }
                    if let Some((frame, mags)) = out.spectrum.last() {
                        if self.hub.wants(Stream::Spectrum) {
                            let values = Arc::new(mags.clone());
                            self.hub.publish(Some(Stream::Spectrum), Event::Spectrum { frame: *frame, values });
                        }
                    }
                    if let Some((frame, mask)) = out.masks.last() {
                        if self.hub.wants(Stream::Mask) {
                            let values = Arc::new(mask.values().to_vec());
                            self.hub.publish(Some(Stream::Mask), Event::Mask { frame: *frame, values });
                        }
                    }
                }
                Err(e) => self.fail(e.to_string()),
            },
            Ok(Err(msg)) => self.fail(msg),
            Err(RecvTimeoutError::Timeout) => {
                // Keep the output clock running: silence, and count it.
                if let Some(sink) = self.sink.as_mut() {
                    sink(&[0.0; TICK]);
                }
                self.processor.record_stall();
                let t = self.processor.telemetry();
                self.hub.publish(
                    None,
                    Event::Stall {
                        tick: t.ticks_processed,
                        stalls: t.stalls,
                    },
                );
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.state = SessionState::Finished;
                self.ingest = None;
            }
        }
        self.publish();
    }

    fn fail(&mut self, msg: String) {
        self.state = SessionState::Failed;
        self.message = Some(msg);
        self.ingest = None;
    }

    fn publish(&self) {
        self.snapshot.store(Arc::new(SessionSnapshot {
            telemetry: self.processor.telemetry(),
            state: self.state,
            stopped: self.state != SessionState::Running,
            message: self.message.clone(),
            audio_source: self.config.audio_source.clone(),
            embedding_source: self.config.embedding_source.clone(),
        }));
    }
}
