//! Causal audio-visual speech enhancement.
//!
//! The pipeline is mask based with late fusion: a streaming STFT front end
//! feeds power-law compressed magnitudes to a causal CNN, the resulting audio
//! embeddings are concatenated with lip-movement embeddings (held from 25 fps
//! up to the 100 fps audio frame rate), a unidirectional LSTM and three fully
//! connected layers predict a sigmoid magnitude mask, and the masked spectrum
//! is resynthesised with the noisy phase by weighted overlap-add.
//!
//! Everything that runs per frame is causal. The only lookahead in the system
//! is the two video frames required by the visual encoder, which together
//! with one frame of blocking gives the 120 ms algorithmic latency
//! (1920 samples at 16 kHz).

pub mod avsync;
pub mod dsp;
pub mod embed;
pub mod engine;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod masknet;
pub mod mixgen;
pub mod pcm;
pub mod rng;
pub mod wav;

pub use dsp::{Spectrogram, StftConfig, Waveform};
pub use embed::VisualEmbeddingSequence;
pub use engine::{SessionConfig, StreamProcessor, Telemetry};
pub use error::{Error, Result};
pub use exec::Execution;
pub use masknet::{MaskNet, ModelWeights};

/// Default sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;
/// Video frame rate of the lip stream.
pub const VIDEO_FPS: u32 = 25;
/// Audio samples per video frame (one engine tick).
pub const SAMPLES_PER_TICK: usize = 640;
/// STFT frames per video frame.
pub const AUDIO_FRAMES_PER_TICK: usize = 4;
/// Frequency bins retained by the 512-point STFT.
pub const BINS: usize = 257;
