use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::json;

use avse_control::{serve, Session, SessionOptions, SessionState};
use avse_core::avsync::LatencyReport;
use avse_core::embed::{
    load_embedding_file, synthetic_embeddings, write_embedding_file, EmbeddingProvider, FileProvider,
    SyntheticProvider,
};
use avse_core::engine::{run_offline, AudioSource, EmbeddingSource};
use avse_core::evalkit::{snr_improvement_delayed, MetricRecord};
use avse_core::masknet::{load_model, save_model, ModelConfig};
use avse_core::pcm::{write_chunk, write_end, PcmChunkReader};
use avse_core::wav::{read_wav, write_wav, WavEncoding};
use avse_core::{mixgen, Error, Execution, MaskNet, ModelWeights, SessionConfig, StreamProcessor, Waveform};
use avse_core::{SAMPLES_PER_TICK, SAMPLE_RATE};

use crate::{BenchArgs, Command, EmbedSynthArgs, EnhanceArgs, LatencyArgs, MakeWeightsArgs, MixArgs, ServeArgs};

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn data(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_data_error() { 2 } else { 3 },
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Zero,
    Random(u64),
    Tiny(u64),
}

pub fn parse_preset(s: &str) -> Result<Preset, String> {
    let bad = || format!("unknown preset `{s}` (expected zero, random:SEED or tiny[:SEED])");
    let seed = |v: &str| v.parse::<u64>().map_err(|_| bad());
    match s.split_once(':') {
        None if s == "zero" => Ok(Preset::Zero),
        None if s == "tiny" => Ok(Preset::Tiny(0)),
        Some(("random", v)) => Ok(Preset::Random(seed(v)?)),
        Some(("tiny", v)) => Ok(Preset::Tiny(seed(v)?)),
        _ => Err(bad()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Arch {
    Default,
    Tiny,
}

fn preset_weights(preset: Preset, arch: Arch) -> avse_core::Result<ModelWeights> {
    let config = match arch {
        Arch::Default => ModelConfig::default(),
        Arch::Tiny => ModelConfig::tiny(),
    };
    match preset {
        Preset::Zero => ModelWeights::zero(config),
        Preset::Random(seed) => ModelWeights::random(config, seed),
        Preset::Tiny(seed) => ModelWeights::random(ModelConfig::tiny(), seed),
    }
}

fn load_net(model: Option<&Path>, preset: Preset) -> Result<Arc<MaskNet>, Failure> {
    let w = match model {
        Some(p) => load_model(p)?,
        None => preset_weights(preset, Arch::Tiny)?,
    };
    Ok(Arc::new(MaskNet::from_weights(&w)?))
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn encoding(pcm16: bool) -> WavEncoding {
    if pcm16 {
        WavEncoding::Pcm16
    } else {
        WavEncoding::Float32
    }
}

fn print_line(line: &str) -> CmdResult {
    let mut out = io::stdout().lock();
    writeln!(out, "{line}")?;
    out.flush()?;
    Ok(())
}

pub fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Enhance(a) => enhance(a),
        Command::Mix(a) => mix(a),
        Command::Bench(a) => bench(a),
        Command::Latency(a) => latency(a),
        Command::Serve(a) => serve_cmd(a),
        Command::MakeWeights(a) => make_weights(a),
        Command::EmbedSynth(a) => embed_synth(a),
    }
}

fn enhance(a: EnhanceArgs) -> CmdResult {
    let net = load_net(a.model.as_deref(), Preset::Zero)?;
    let config = SessionConfig {
        enhancement_enabled: !a.bypass,
        execution: execution(a.sequential),
        ..SessionConfig::default()
    };
    let dim = net.config().visual_dim;
    let delay = config.latency_samples();

    let (mixture, enhanced) = match (&a.input, a.pcm_stdin || a.pcm_stdout) {
        // Whole-file path: batch pipeline, data parallel where possible.
        (Some(input), false) => {
            let x = read_wav(input, SAMPLE_RATE)?;
            let needed = x.len().div_ceil(SAMPLES_PER_TICK);
            let emb = match (&a.embeddings, a.synthetic_seed) {
                (Some(p), _) => load_embedding_file(p)?,
                (None, Some(seed)) => synthetic_embeddings(needed, dim, seed)?,
                (None, None) => unreachable!("clap requires an embedding source"),
            };
            let y = run_offline(&config, &net, &x, &emb)?;
            (x.samples, y.samples)
        }
        // Streaming path: tick by tick through the live processor.
        _ => {
            let provider: Box<dyn EmbeddingProvider> = match (&a.embeddings, a.synthetic_seed) {
                (Some(p), _) => Box::new(FileProvider::open(p)?),
                (None, Some(seed)) => Box::new(SyntheticProvider { dim, seed }),
                (None, None) => unreachable!("clap requires an embedding source"),
            };
            let mut proc = StreamProcessor::new(&config, net.clone())?;
            let keep = a.reference.is_some() || a.out.is_some();
            let mut sink = if a.pcm_stdout {
                Some(BufWriter::new(io::stdout().lock()))
            } else {
                None
            };
            let mut mixture = Vec::new();
            let mut enhanced = Vec::new();
            let mut tick = 0usize;
            let mut step = |chunk: &[f64]| -> CmdResult {
                let emb = provider.embedding(tick).ok_or(Error::Coverage {
                    needed: tick + 1,
                    available: tick,
                })?;
                let mut padded = chunk.to_vec();
                padded.resize(SAMPLES_PER_TICK, 0.0);
                let out = proc.process_tick(&emb, &padded)?;
                let out = &out.samples[..chunk.len()];
                if let Some(w) = sink.as_mut() {
                    write_chunk(w, out)?;
                }
                if keep {
                    mixture.extend_from_slice(chunk);
                    enhanced.extend_from_slice(out);
                }
                tick += 1;
                Ok(())
            };
            if a.pcm_stdin {
                let mut buf = Vec::new();
                for chunk in PcmChunkReader::new(io::stdin().lock()) {
                    buf.extend(chunk.map_err(|e| Failure::data(format!("stdin PCM: {e}")))?);
                    let whole = buf.len() / SAMPLES_PER_TICK * SAMPLES_PER_TICK;
                    for c in buf[..whole].chunks(SAMPLES_PER_TICK) {
                        step(c)?;
                    }
                    buf.drain(..whole);
                }
                if !buf.is_empty() {
                    step(&buf)?;
                }
            } else {
                let x = read_wav(a.input.as_ref().expect("clap requires an input"), SAMPLE_RATE)?;
                for c in x.samples.chunks(SAMPLES_PER_TICK) {
                    step(c)?;
                }
            }
            if let Some(mut w) = sink {
                write_end(&mut w)?;
                w.flush()?;
            }
            (mixture, enhanced)
        }
    };

    if let Some(out) = &a.out {
        write_wav(out, &Waveform::new(enhanced.clone(), SAMPLE_RATE)?, encoding(a.pcm16))?;
        eprintln!(
            "wrote {} samples to {} ({} sample delay, enhancement {})",
            enhanced.len(),
            out.display(),
            delay,
            if a.bypass { "off" } else { "on" }
        );
    }
    if let Some(r) = &a.reference {
        let target = read_wav(r, SAMPLE_RATE)?;
        let snr = snr_improvement_delayed(&mixture, &enhanced, &target.samples, delay)?;
        let clip = match &a.input {
            Some(p) => p.display().to_string(),
            None => "stdin".to_string(),
        };
        let line = MetricRecord { clip, snr, psa: None }.to_json_line();
        if a.pcm_stdout {
            eprintln!("{line}");
        } else {
            print_line(&line)?;
        }
    }
    Ok(())
}

fn mix(a: MixArgs) -> CmdResult {
    let manifest = mixgen::load_manifest(&a.manifest)?;
    let specs = mixgen::draw_specs(&manifest, a.count, a.seed)?;
    let records = mixgen::make_batch(&specs, execution(a.sequential))
        .into_iter()
        .collect::<avse_core::Result<Vec<_>>>()?;
    mixgen::write_batch(&a.outdir, &specs, &records, encoding(a.pcm16))?;
    eprintln!("wrote {} mixtures to {}", records.len(), a.outdir.display());
    print_line(&json!({ "records": records.len(), "outdir": a.outdir, "seed": a.seed }).to_string())
}

fn bench(a: BenchArgs) -> CmdResult {
    let net = load_net(a.model.as_deref(), a.preset)?;
    let config = SessionConfig {
        execution: execution(a.sequential),
        ..SessionConfig::default()
    };
    let t = avse_core::engine::bench(&config, net.clone(), a.duration)?;
    eprintln!(
        "{} ticks: p95 {:.3} ms of {:.0} ms budget, real-time factor {:.4}",
        t.ticks_processed, t.p95_processing_ms, t.deadline_ms, t.rtf
    );
    let mut v = serde_json::to_value(&t).expect("telemetry serialises");
    v["duration_s"] = json!(a.duration);
    v["audio_embed_dim"] = json!(net.config().audio_embed_dim);
    v["execution"] = json!(if a.sequential { "sequential" } else { "parallel" });
    print_line(&v.to_string())
}

fn latency(a: LatencyArgs) -> CmdResult {
    let r = LatencyReport::new(a.lookahead, a.frame_ms, a.sample_rate);
    print_line(&serde_json::to_string(&r).expect("report serialises"))
}

fn serve_cmd(a: ServeArgs) -> CmdResult {
    let net = load_net(a.model.as_deref(), a.preset)?;
    let audio_source = match (&a.input, a.pcm_stdin) {
        (Some(p), _) => AudioSource::File { path: p.clone() },
        (None, true) => AudioSource::PcmStdin,
        (None, false) => AudioSource::Synthetic {
            seed: a.synthetic_audio,
            duration_s: a.duration,
        },
    };
    let embedding_source = match (&a.embeddings, a.synthetic_seed) {
        (Some(p), _) => EmbeddingSource::File { path: p.clone() },
        (None, seed) => EmbeddingSource::Synthetic { seed: seed.unwrap_or(0) },
    };
    let config = SessionConfig {
        model_path: a.model.clone(),
        embedding_source,
        audio_source,
        enhancement_enabled: !a.bypass,
        telemetry_period_ms: a.telemetry_ms,
        execution: execution(a.sequential),
        ..SessionConfig::default()
    };
    let options = SessionOptions {
        realtime: !a.no_realtime,
        watchdog: Duration::from_millis(a.watchdog_ms.max(1)),
    };
    let sink: Option<avse_control::Sink> = if a.pcm_stdout {
        let out = Mutex::new(BufWriter::new(io::stdout()));
        Some(Box::new(move |samples: &[f64]| {
            let mut w = out.lock().expect("stdout lock");
            let _ = write_chunk(&mut *w, samples).and_then(|_| w.flush());
        }))
    } else {
        None
    };
    let session = Session::spawn(config, net, options, sink)?;
    let handle = session.handle();
    let service = serve(&a.control_bind, handle.clone())
        .map_err(|e| Failure::runtime(format!("cannot bind {}: {e}", a.control_bind)))?;
    let line = json!({ "listening": service.local_addr().to_string() }).to_string();
    if a.pcm_stdout {
        eprintln!("{line}");
    } else {
        print_line(&line)?;
    }
    eprintln!("control endpoint on {}", service.local_addr());
    if a.start {
        handle.start().map_err(Failure::runtime)?;
    }
    loop {
        std::thread::sleep(Duration::from_millis(20));
        let snap = handle.snapshot();
        if snap.state == SessionState::Failed {
            return Err(Failure::runtime(snap.message.clone().unwrap_or_else(|| "session failed".into())));
        }
        if a.exit_when_done && snap.state == SessionState::Finished {
            let t = serde_json::to_string(&*snap).expect("snapshot serialises");
            if a.pcm_stdout {
                let mut out = io::stdout().lock();
                write_end(&mut out)?;
                out.flush()?;
                eprintln!("{t}");
            } else {
                print_line(&t)?;
            }
            break;
        }
    }
    service.shutdown();
    session.shutdown();
    Ok(())
}

fn make_weights(a: MakeWeightsArgs) -> CmdResult {
    let w = preset_weights(a.preset, a.arch)?;
    // Round-trip through the loader so the file is known to validate.
    MaskNet::from_weights(&w)?;
    save_model(&w, &a.out)?;
    let bytes = std::fs::metadata(&a.out).map_err(|e| Failure::runtime(e.to_string()))?.len();
    print_line(
        &json!({
            "out": a.out,
            "tensors": w.tensors.len(),
            "audio_embed_dim": w.config.audio_embed_dim,
            "visual_dim": w.config.visual_dim,
            "bytes": bytes,
        })
        .to_string(),
    )
}

fn embed_synth(a: EmbedSynthArgs) -> CmdResult {
    let seq = synthetic_embeddings(a.frames, a.dim, a.seed)?;
    write_embedding_file(&a.out, &seq)?;
    print_line(&json!({ "out": a.out, "frames": a.frames, "dim": a.dim, "seed": a.seed }).to_string())
}
