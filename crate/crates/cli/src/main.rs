//! `avse`: enhance recordings, synthesise training mixtures, benchmark the
//! streaming engine and serve live sessions.
//!
//! Machine-readable output is JSON lines on stdout; prose goes to stderr.
//! Exit codes: 0 ok, 1 usage, 2 data or format error, 3 runtime error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "avse", version, about = "Causal audio-visual speech enhancement")]
struct Cli {
    /// key=value file whose entries act as flags of the chosen subcommand
    /// (top-level keys plus a `[subcommand]` table). Explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Enhance a recording; the output is delayed by the algorithmic latency.
    #[command(args_override_self = true)]
    Enhance(EnhanceArgs),
    /// Generate SNR-controlled mixtures from a source manifest.
    #[command(args_override_self = true)]
    Mix(MixArgs),
    /// Stream synthetic input through the engine and report tick timing.
    #[command(args_override_self = true)]
    Bench(BenchArgs),
    /// Print the algorithmic latency for a lookahead and video frame period.
    #[command(args_override_self = true)]
    Latency(LatencyArgs),
    /// Run a live session behind the control endpoint.
    #[command(args_override_self = true)]
    Serve(ServeArgs),
    /// Write a model weight file from a preset.
    #[command(name = "make-weights", args_override_self = true)]
    MakeWeights(MakeWeightsArgs),
    /// Write a synthetic lip-embedding file.
    #[command(name = "embed-synth", args_override_self = true)]
    EmbedSynth(EmbedSynthArgs),
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    /// Noisy input WAV (mono, 16 kHz, 16-bit or float).
    #[arg(long = "in", value_name = "WAV", required_unless_present = "pcm_stdin", conflicts_with = "pcm_stdin")]
    input: Option<PathBuf>,
    /// Read length-prefixed 16-bit PCM chunks from stdin instead of a file.
    #[arg(long)]
    pcm_stdin: bool,
    /// Lip-embedding file (RVE1).
    #[arg(long, value_name = "RVE1", required_unless_present = "synthetic_seed", conflicts_with = "synthetic_seed")]
    embeddings: Option<PathBuf>,
    /// Use closed-form synthetic embeddings with this seed.
    #[arg(long, value_name = "N")]
    synthetic_seed: Option<u64>,
    /// Model weights (RVW1). Optional with --bypass.
    #[arg(long, value_name = "RVW1", required_unless_present = "bypass")]
    model: Option<PathBuf>,
    /// Output WAV.
    #[arg(long, value_name = "WAV", required_unless_present = "pcm_stdout", conflicts_with = "pcm_stdout")]
    out: Option<PathBuf>,
    /// Write length-prefixed 16-bit PCM chunks to stdout.
    #[arg(long)]
    pcm_stdout: bool,
    /// Pass audio through unmodified (still delayed).
    #[arg(long)]
    bypass: bool,
    /// Clean reference; prints an SNR-improvement JSON line.
    #[arg(long, value_name = "WAV")]
    reference: Option<PathBuf>,
    /// Write 16-bit PCM instead of 32-bit float.
    #[arg(long)]
    pcm16: bool,
    /// Disable data-parallel execution.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct MixArgs {
    /// Manifest of `path<TAB>duration_s` lines.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, value_name = "N")]
    count: usize,
    #[arg(long, value_name = "S", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    outdir: PathBuf,
    /// Write 16-bit PCM instead of 32-bit float.
    #[arg(long)]
    pcm16: bool,
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Model weights (RVW1); defaults to the tiny preset.
    #[arg(long, value_name = "RVW1", conflicts_with = "preset")]
    model: Option<PathBuf>,
    /// Weight preset used when no model file is given.
    #[arg(long, value_parser = commands::parse_preset, default_value = "tiny")]
    preset: commands::Preset,
    /// Seconds of audio to stream.
    #[arg(long, value_name = "S", default_value_t = 60.0, value_parser = positive)]
    duration: f64,
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct LatencyArgs {
    /// Video frames of lookahead.
    #[arg(long, value_name = "N", default_value_t = 2)]
    lookahead: usize,
    /// Video frame period in milliseconds.
    #[arg(long, value_name = "MS", default_value_t = 40.0, value_parser = positive)]
    frame_ms: f64,
    #[arg(long, value_name = "HZ", default_value_t = 16_000)]
    sample_rate: u32,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Control endpoint address.
    #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:7878")]
    control_bind: String,
    #[arg(long, value_name = "RVW1", conflicts_with = "preset")]
    model: Option<PathBuf>,
    #[arg(long, value_parser = commands::parse_preset, default_value = "tiny")]
    preset: commands::Preset,
    /// Input WAV; default is a synthetic signal.
    #[arg(long = "in", value_name = "WAV", conflicts_with = "pcm_stdin")]
    input: Option<PathBuf>,
    #[arg(long)]
    pcm_stdin: bool,
    /// Seed of the synthetic input signal.
    #[arg(long, value_name = "N", default_value_t = 0)]
    synthetic_audio: u64,
    /// Length of the synthetic input; unbounded when omitted.
    #[arg(long, value_name = "S", value_parser = positive)]
    duration: Option<f64>,
    #[arg(long, value_name = "RVE1", conflicts_with = "synthetic_seed")]
    embeddings: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    synthetic_seed: Option<u64>,
    /// Start with enhancement off.
    #[arg(long)]
    bypass: bool,
    #[arg(long, value_name = "MS", default_value_t = 250)]
    telemetry_ms: u64,
    /// Process input as fast as it arrives instead of 25 ticks per second.
    #[arg(long)]
    no_realtime: bool,
    /// Milliseconds without input before a tick is declared stalled.
    #[arg(long, value_name = "MS", default_value_t = 80)]
    watchdog_ms: u64,
    /// Start processing immediately instead of waiting for a `start` command.
    #[arg(long)]
    start: bool,
    /// Exit once the input is exhausted.
    #[arg(long)]
    exit_when_done: bool,
    /// Write enhanced audio as length-prefixed 16-bit PCM chunks to stdout.
    #[arg(long)]
    pcm_stdout: bool,
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Args)]
struct MakeWeightsArgs {
    /// zero | random:SEED | tiny[:SEED]
    #[arg(long, value_parser = commands::parse_preset)]
    preset: commands::Preset,
    /// Architecture for the zero and random presets.
    #[arg(long, value_enum, default_value_t = commands::Arch::Default)]
    arch: commands::Arch,
    #[arg(long, value_name = "RVW1")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EmbedSynthArgs {
    #[arg(long, value_name = "N")]
    frames: usize,
    #[arg(long, value_name = "D", default_value_t = 512)]
    dim: usize,
    #[arg(long, value_name = "S", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "RVE1")]
    out: PathBuf,
}

fn positive(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v > 0.0 => Ok(v),
        _ => Err(format!("`{s}` is not a positive number")),
    }
}

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(f) => {
            eprintln!("avse: {}", f.message);
            return ExitCode::from(f.code);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("avse: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
