//! Real-time orchestration.
//!
//! The engine works in ticks of one video frame: 640 input samples and one
//! lip embedding in, 640 enhanced samples out. Within a tick:
//!
//! 1. Four new STFT frames are analysed from the 240-sample history tail plus
//!    the new chunk, compressed, and pushed through the causal CNN.
//! 2. The embedding goes into the lookahead buffer, which releases the
//!    embedding of video frame `i - 2`. The four audio frames of that video
//!    frame are run through the LSTM and FC head, masked, inverted and
//!    overlap-added.
//! 3. The output chunk holds input samples `[640 (i-3), 640 (i-2))`, so the
//!    output is delayed by exactly 1920 samples (120 ms). Bypass uses the
//!    same delay so toggling stays time aligned.
//!
//! Engine framing prepends `win_len - hop` zeros to the input, so analysis
//! frame `t` ends at input sample `160 (t + 1)` and every tick completes
//! exactly four frames.
//!
//! [`run_offline`] computes the same result batch-style (parallel over
//! frames) and is the reference for the streaming path.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::avsync::{self, LookaheadBuffer, DEADLINE_MS, DEFAULT_LOOKAHEAD, VIDEO_FRAME_MS};
use crate::dsp::{apply_mask, MaskFrame, Spectrogram, StftConfig, StftPlan, Waveform, DEFAULT_COMPRESSION, WOLA_FLOOR};
use crate::embed::{EmbeddingProvider, VisualEmbeddingSequence};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::masknet::{MaskNet, StreamState};
use crate::rng::FixtureRng;
use crate::{AUDIO_FRAMES_PER_TICK, SAMPLES_PER_TICK};

/// Where a session's audio comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AudioSource {
    File { path: std::path::PathBuf },
    /// Length-prefixed PCM16 chunks on standard input.
    PcmStdin,
    /// Deterministic noise-plus-tones test signal; unbounded without a
    /// duration.
    Synthetic {
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_s: Option<f64>,
    },
}

/// Where a session's lip embeddings come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSource {
    File { path: std::path::PathBuf },
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub model_path: Option<std::path::PathBuf>,
    pub embedding_source: EmbeddingSource,
    pub audio_source: AudioSource,
    pub enhancement_enabled: bool,
    /// Audio frames per tick; must be a multiple of 4 (one video frame).
    pub chunk_frames: usize,
    pub telemetry_period_ms: u64,
    pub lookahead: usize,
    pub compression: f64,
    pub stft: StftConfig,
    pub execution: Execution,
    /// Number of recent ticks kept for percentile telemetry.
    pub timing_window: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            model_path: None,
            embedding_source: EmbeddingSource::Synthetic { seed: 0 },
            audio_source: AudioSource::Synthetic {
                seed: 0,
                duration_s: None,
            },
            enhancement_enabled: true,
            chunk_frames: AUDIO_FRAMES_PER_TICK,
            telemetry_period_ms: 250,
            lookahead: DEFAULT_LOOKAHEAD,
            compression: DEFAULT_COMPRESSION,
            stft: StftConfig::default(),
            execution: Execution::default(),
            timing_window: 4096,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_frames == 0 || self.chunk_frames % AUDIO_FRAMES_PER_TICK != 0 {
            return Err(Error::invalid(format!(
                "chunk_frames {} is not a multiple of {AUDIO_FRAMES_PER_TICK}",
                self.chunk_frames
            )));
        }
        let s = self.stft;
        if s.hop * AUDIO_FRAMES_PER_TICK != SAMPLES_PER_TICK || s.win_len <= s.hop || s.win_len - s.hop > SAMPLES_PER_TICK {
            return Err(Error::invalid(format!(
                "framing win_len={} hop={} does not tile a {SAMPLES_PER_TICK}-sample tick",
                s.win_len, s.hop
            )));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::invalid("compression exponent must be in (0, 1]"));
        }
        Ok(())
    }

    /// Total output delay in samples.
    pub fn latency_samples(&self) -> usize {
        avsync::latency_samples(self.lookahead)
    }
}

/// Wall-clock accounting for one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrameTick {
    pub video_index: usize,
    /// Audio frames analysed during this tick: `[4i, 4i + 4)`.
    pub audio_frame_range: (usize, usize),
    pub wall_deadline_ms: f64,
    pub processing_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub ticks_processed: u64,
    pub rtf: f64,
    pub p50_processing_ms: f64,
    pub p95_processing_ms: f64,
    pub max_processing_ms: f64,
    pub deadline_misses: u64,
    pub stalls: u64,
    pub mask_mean: f64,
    pub mask_min: f64,
    pub mask_max: f64,
    pub algorithmic_latency_ms: f64,
    pub deadline_ms: f64,
    pub enhancement_enabled: bool,
}

/// Rolling per-tick timing statistics.
#[derive(Debug, Clone)]
pub struct TimingStats {
    recent: VecDeque<f64>,
    window: usize,
    total_ms: f64,
    max_ms: f64,
    ticks: u64,
    misses: u64,
    stalls: u64,
    deadline_ms: f64,
}

impl TimingStats {
    pub fn new(window: usize, deadline_ms: f64) -> Self {
        TimingStats {
            recent: VecDeque::with_capacity(window.min(1 << 16)),
            window: window.max(1),
            total_ms: 0.0,
            max_ms: 0.0,
            ticks: 0,
            misses: 0,
            stalls: 0,
            deadline_ms,
        }
    }

    pub fn record(&mut self, ms: f64) {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(ms);
        self.total_ms += ms;
        self.max_ms = self.max_ms.max(ms);
        self.ticks += 1;
        if ms > self.deadline_ms {
            self.misses += 1;
        }
    }

    pub fn record_stall(&mut self) {
        self.stalls += 1;
    }

    /// Nearest-rank percentile over the recent window.
    pub fn percentile(&self, p: f64) -> f64 {
        if self.recent.is_empty() {
            return 0.0;
        }
        let mut v: Vec<f64> = self.recent.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
        v[rank.min(v.len()) - 1]
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// Processing time over audio time.
    pub fn rtf(&self) -> f64 {
        if self.ticks == 0 {
            0.0
        } else {
            self.total_ms / (self.ticks as f64 * VIDEO_FRAME_MS)
        }
    }

    fn fill(&self, t: &mut Telemetry) {
        t.ticks_processed = self.ticks;
        t.rtf = self.rtf();
        t.p50_processing_ms = self.percentile(50.0);
        t.p95_processing_ms = self.percentile(95.0);
        t.max_processing_ms = self.max_ms;
        t.deadline_misses = self.misses;
        t.stalls = self.stalls;
        t.deadline_ms = self.deadline_ms;
    }
}

/// Everything a tick produced, for output and visualisation.
#[derive(Debug, Clone)]
pub struct TickOutput {
    pub tick: FrameTick,
    pub samples: Vec<f64>,
    pub enhanced: bool,
    /// Noisy magnitudes of the frames analysed this tick.
    pub spectrum: Vec<(usize, Vec<f64>)>,
    /// Masks produced this tick (for video frame `i - 2`).
    pub masks: Vec<(usize, MaskFrame)>,
}

struct PendingFrame {
    index: usize,
    spectrum: Vec<Complex64>,
    audio_embedding: Vec<f32>,
}

/// Single-owner streaming pipeline state.
pub struct StreamProcessor {
    net: Arc<MaskNet>,
    plan: Arc<StftPlan>,
    compression: f64,
    enhancement_enabled: bool,
    history: Vec<f64>,
    net_state: StreamState,
    pending: VecDeque<PendingFrame>,
    lookahead: LookaheadBuffer,
    ola: VecDeque<f64>,
    ola_base: usize,
    denominator: Vec<f64>,
    delay_line: VecDeque<f64>,
    next_tick: usize,
    next_frame: usize,
    latency_ms: f64,
    timing: TimingStats,
    mask_stats: (f64, f64, f64),
}

/// `|X|^p` per bin, rounded to the network's f32 input.
fn compress_frame(frame: &[Complex64], p: f64) -> Vec<f32> {
    frame.iter().map(|c| c.norm().powf(p) as f32).collect()
}

fn mask_summary<'a>(masks: impl Iterator<Item = &'a MaskFrame>) -> Option<(f64, f64, f64)> {
    let (mut sum, mut n, mut lo, mut hi) = (0.0, 0usize, f64::INFINITY, f64::NEG_INFINITY);
    for m in masks {
        for &v in m.values() {
            sum += v;
            n += 1;
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    (n > 0).then(|| (sum / n as f64, lo, hi))
}

impl StreamProcessor {
    pub fn new(config: &SessionConfig, net: Arc<MaskNet>) -> Result<Self> {
        config.validate()?;
        let plan = Arc::new(StftPlan::new(config.stft)?);
        let c = config.stft;
        if net.config().bins != c.bins() {
            return Err(Error::invalid("model bins do not match the STFT"));
        }
        // Steady-state window-square sum per output phase, accumulated in
        // the same order as the offline overlap-add (newest frame last).
        let w = plan.window();
        let denominator = (0..c.hop)
            .map(|phase| {
                let ks: Vec<usize> = (phase..c.win_len).step_by(c.hop).collect();
                ks.iter().rev().fold(0.0, |acc, &k| acc + w[k] * w[k])
            })
            .collect();
        let latency = config.latency_samples();
        Ok(StreamProcessor {
            lookahead: LookaheadBuffer::new(net.config().visual_dim, config.lookahead),
            net_state: net.new_state(),
            net,
            plan,
            compression: config.compression,
            enhancement_enabled: config.enhancement_enabled,
            history: vec![0.0; c.win_len - c.hop],
            pending: VecDeque::new(),
            ola: VecDeque::new(),
            ola_base: 0,
            denominator,
            delay_line: std::iter::repeat_n(0.0, latency).collect(),
            next_tick: 0,
            next_frame: 0,
            latency_ms: avsync::algorithmic_latency(config.lookahead, VIDEO_FRAME_MS),
            timing: TimingStats::new(config.timing_window, DEADLINE_MS),
            mask_stats: (0.0, 0.0, 0.0),
        })
    }

    pub fn set_enhancement(&mut self, enabled: bool) {
        self.enhancement_enabled = enabled;
    }

    pub fn enhancement_enabled(&self) -> bool {
        self.enhancement_enabled
    }

    pub fn ticks_processed(&self) -> usize {
        self.next_tick
    }

    pub fn record_stall(&mut self) {
        self.timing.record_stall();
    }

    pub fn telemetry(&self) -> Telemetry {
        let mut t = Telemetry {
            mask_mean: self.mask_stats.0,
            mask_min: self.mask_stats.1,
            mask_max: self.mask_stats.2,
            algorithmic_latency_ms: self.latency_ms,
            enhancement_enabled: self.enhancement_enabled,
            ..Telemetry::default()
        };
        self.timing.fill(&mut t);
        t
    }

    /// Process one video frame: its embedding and its 640 audio samples.
    pub fn process_tick(&mut self, embedding: &[f32], chunk: &[f64]) -> Result<TickOutput> {
        let started = Instant::now();
        if chunk.len() != SAMPLES_PER_TICK {
            return Err(Error::invalid(format!(
                "chunk has {} samples, expected {SAMPLES_PER_TICK}",
                chunk.len()
            )));
        }
        if chunk.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("audio chunk"));
        }
        let i = self.next_tick;
        let emitted = self.lookahead.push(embedding, i)?;
        let c = *self.plan.config();

        // Analysis of the four frames completed by this chunk.
        let mut buf = std::mem::take(&mut self.history);
        buf.extend_from_slice(chunk);
        let mut spectrum = Vec::with_capacity(AUDIO_FRAMES_PER_TICK);
        for k in 0..AUDIO_FRAMES_PER_TICK {
            let mut spec = vec![Complex64::new(0.0, 0.0); c.bins()];
            self.plan.analyze_frame(&buf[k * c.hop..k * c.hop + c.win_len], &mut spec);
            let compressed = compress_frame(&spec, self.compression);
            let audio_embedding = self.net.audio_encode(&mut self.net_state, &compressed)?;
            let index = self.next_frame;
            self.next_frame += 1;
            spectrum.push((index, spec.iter().map(|x| x.norm()).collect()));
            self.pending.push_back(PendingFrame {
                index,
                spectrum: spec,
                audio_embedding,
            });
        }
        self.history = buf.split_off(buf.len() - (c.win_len - c.hop));

        // Mask and resynthesise the frames whose embedding just completed.
        let mut masks = Vec::new();
        if let Some((video, visual)) = emitted {
            for _ in 0..AUDIO_FRAMES_PER_TICK {
                let frame = self
                    .pending
                    .pop_front()
                    .expect("frames of an emitted video frame are pending");
                debug_assert_eq!(avsync::video_frame_for_audio(frame.index), video);
                let mask = self.net.predict_from_embedding(
                    &frame.audio_embedding,
                    &visual,
                    &mut self.net_state.lstm,
                )?;
                self.overlap_add(frame.index, &frame.spectrum, &mask);
                masks.push((frame.index, mask));
            }
        }
        if let Some(s) = mask_summary(masks.iter().map(|(_, m)| m)) {
            self.mask_stats = s;
        }

        // Output chunk.
        self.delay_line.extend(chunk);
        let bypass: Vec<f64> = self.delay_line.drain(..SAMPLES_PER_TICK).collect();
        let enhanced = self.drain_enhanced(i);
        let use_enhanced = self.enhancement_enabled;
        let samples = if use_enhanced { enhanced } else { bypass };

        self.next_tick += 1;
        let processing_ms = started.elapsed().as_secs_f64() * 1e3;
        self.timing.record(processing_ms);
        Ok(TickOutput {
            tick: FrameTick {
                video_index: i,
                audio_frame_range: (AUDIO_FRAMES_PER_TICK * i, AUDIO_FRAMES_PER_TICK * (i + 1)),
                wall_deadline_ms: DEADLINE_MS,
                processing_ms,
            },
            samples,
            enhanced: use_enhanced,
            spectrum,
            masks,
        })
    }

    fn overlap_add(&mut self, index: usize, spec: &[Complex64], mask: &MaskFrame) {
        let c = *self.plan.config();
        let masked: Vec<Complex64> = spec.iter().zip(mask.values()).map(|(y, g)| y * *g).collect();
        let mut seg = vec![0.0; c.win_len];
        self.plan.synthesize_frame(&masked, &mut seg);
        // Frame `index` covers input samples [hop*index - pad, hop*index + hop).
        let pad = c.win_len - c.hop;
        for (k, s) in seg.iter().enumerate() {
            let Some(n) = (index * c.hop + k).checked_sub(pad) else {
                continue;
            };
            let Some(rel) = n.checked_sub(self.ola_base) else {
                continue;
            };
            if rel >= self.ola.len() {
                self.ola.resize(rel + 1, 0.0);
            }
            self.ola[rel] += s;
        }
    }

    fn drain_enhanced(&mut self, tick: usize) -> Vec<f64> {
        let lag = self.delay_line_ticks();
        if tick < lag {
            return vec![0.0; SAMPLES_PER_TICK];
        }
        let start = (tick - lag) * SAMPLES_PER_TICK;
        debug_assert_eq!(start, self.ola_base);
        let c = *self.plan.config();
        let pad = c.win_len - c.hop;
        if self.ola.len() < SAMPLES_PER_TICK {
            self.ola.resize(SAMPLES_PER_TICK, 0.0);
        }
        let out = self
            .ola
            .drain(..SAMPLES_PER_TICK)
            .enumerate()
            .map(|(k, v)| v / self.denominator[(start + k + pad) % c.hop].max(WOLA_FLOOR))
            .collect();
        self.ola_base += SAMPLES_PER_TICK;
        out
    }

    fn delay_line_ticks(&self) -> usize {
        self.lookahead.lookahead() + 1
    }
}

/// Drive a processor over an iterator of `(embedding, 640-sample chunk)`
/// pairs, yielding enhanced chunks.
pub fn run_streaming<I>(processor: StreamProcessor, chunks: I) -> StreamingRun<I>
where
    I: Iterator<Item = (Vec<f32>, Vec<f64>)>,
{
    StreamingRun {
        processor,
        chunks,
    }
}

pub struct StreamingRun<I> {
    processor: StreamProcessor,
    chunks: I,
}

impl<I> StreamingRun<I> {
    pub fn processor(&self) -> &StreamProcessor {
        &self.processor
    }

    pub fn processor_mut(&mut self) -> &mut StreamProcessor {
        &mut self.processor
    }
}

impl<I> Iterator for StreamingRun<I>
where
    I: Iterator<Item = (Vec<f32>, Vec<f64>)>,
{
    type Item = Result<Vec<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        let (emb, chunk) = self.chunks.next()?;
        Some(self.processor.process_tick(&emb, &chunk).map(|o| o.samples))
    }
}

/// Split a waveform and an embedding source into tick-sized chunks. The
/// final partial chunk is zero padded.
pub fn chunk_input<'a>(
    samples: &'a [f64],
    embeddings: &'a dyn EmbeddingProvider,
) -> impl Iterator<Item = (Vec<f32>, Vec<f64>)> + 'a {
    let ticks = samples.len().div_ceil(SAMPLES_PER_TICK);
    (0..ticks).map(move |i| {
        let mut chunk = samples[i * SAMPLES_PER_TICK..samples.len().min((i + 1) * SAMPLES_PER_TICK)].to_vec();
        chunk.resize(SAMPLES_PER_TICK, 0.0);
        let emb = embeddings
            .embedding(i)
            .unwrap_or_else(|| vec![0.0; embeddings.descriptor().dim]);
        (emb, chunk)
    })
}

/// Engine-framed analysis of a whole signal: `win_len - hop` leading zeros,
/// zero padding to whole ticks, then the plain STFT. Frame `t` belongs to
/// video frame `t / 4`.
pub fn analysis_frames(plan: &StftPlan, samples: &[f64], exec: Execution) -> Spectrogram {
    let c = plan.config();
    let ticks = samples.len().div_ceil(SAMPLES_PER_TICK);
    let mut padded = vec![0.0; c.win_len - c.hop];
    padded.extend_from_slice(samples);
    padded.resize(c.win_len - c.hop + ticks * SAMPLES_PER_TICK, 0.0);
    plan.stft(&padded, exec)
}

/// Offline pipeline with an arbitrary mask source. `masks` receives the
/// engine-framed noisy spectrogram and returns one mask per frame.
pub fn run_offline_with<F>(config: &SessionConfig, mixture: &Waveform, masks: F) -> Result<Waveform>
where
    F: FnOnce(&Spectrogram) -> Result<Vec<MaskFrame>>,
{
    config.validate()?;
    let len = mixture.len();
    let delay = config.latency_samples();
    let mut out = vec![0.0; len];
    if !config.enhancement_enabled {
        if len > delay {
            out[delay..].copy_from_slice(&mixture.samples[..len - delay]);
        }
        return Waveform::new(out, mixture.sample_rate);
    }
    let plan = StftPlan::new(config.stft)?;
    let noisy = analysis_frames(&plan, &mixture.samples, config.execution);
    let m = masks(&noisy)?;
    let est = apply_mask(&m, &noisy)?;
    let y = plan.istft(&est, config.execution);
    let pad = config.stft.win_len - config.stft.hop;
    if len > delay {
        out[delay..].copy_from_slice(&y[pad..pad + len - delay]);
    }
    Waveform::new(out, mixture.sample_rate)
}

/// Batch reference for [`StreamProcessor`]: same causality and lookahead,
/// output delayed by the algorithmic latency with leading zeros.
pub fn run_offline(
    config: &SessionConfig,
    net: &MaskNet,
    mixture: &Waveform,
    embeddings: &VisualEmbeddingSequence,
) -> Result<Waveform> {
    let needed = mixture.len().div_ceil(SAMPLES_PER_TICK);
    if embeddings.len() < needed {
        return Err(Error::Coverage {
            needed,
            available: embeddings.len(),
        });
    }
    if embeddings.dim() != net.config().visual_dim {
        return Err(Error::invalid(format!(
            "embedding dimension {} does not match model visual_dim {}",
            embeddings.dim(),
            net.config().visual_dim
        )));
    }
    let p = config.compression;
    let exec = config.execution;
    run_offline_with(config, mixture, |noisy| {
        let bins = noisy.bins();
        let mut compressed = vec![0.0f32; noisy.frames() * bins];
        exec::for_each_chunk_mut(exec, &mut compressed, bins, |t, out| {
            out.copy_from_slice(&compress_frame(noisy.frame(t), p));
        });
        net.predict_sequence(
            &compressed,
            |t| embeddings.frame(avsync::video_frame_for_audio(t)),
            exec,
        )
    })
}

/// Deterministic test signal: white noise plus two tones, generated
/// incrementally so a live source can run unbounded.
#[derive(Debug, Clone)]
pub struct SyntheticAudio {
    rng: FixtureRng,
    n: usize,
}

impl SyntheticAudio {
    pub fn new(seed: u64) -> Self {
        SyntheticAudio {
            rng: FixtureRng::new(seed),
            n: 0,
        }
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for o in out {
            let t = self.n as f64 / crate::SAMPLE_RATE as f64;
            *o = 0.1 * self.rng.uniform(-1.0, 1.0)
                + 0.3 * (std::f64::consts::TAU * 220.0 * t).sin()
                + 0.2 * (std::f64::consts::TAU * 1330.0 * t).sin();
            self.n += 1;
        }
    }
}

pub fn synthetic_audio(len: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; len];
    SyntheticAudio::new(seed).fill(&mut v);
    v
}

/// Stream `duration_s` of synthetic input through the pipeline as fast as
/// possible and report per-tick timing.
pub fn bench(config: &SessionConfig, net: Arc<MaskNet>, duration_s: f64) -> Result<Telemetry> {
    let ticks = (duration_s.max(0.0) * crate::VIDEO_FPS as f64).round() as usize;
    let dim = net.config().visual_dim;
    let mut proc = StreamProcessor::new(config, net)?;
    let audio = synthetic_audio(ticks * SAMPLES_PER_TICK, 1);
    let provider = crate::embed::SyntheticProvider { dim, seed: 1 };
    for (emb, chunk) in chunk_input(&audio, &provider) {
        proc.process_tick(&emb, &chunk)?;
    }
    Ok(proc.telemetry())
}
