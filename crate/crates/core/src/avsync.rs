//! Audio/video rate alignment and the algorithmic-latency model.
//!
//! Video runs at 25 fps (40 ms), audio frames at 100 fps (10 ms hop), so one
//! video frame spans exactly four audio frames. The visual encoder has a
//! receptive field of five frames centred on the current one, so the
//! embedding for video frame `i` is only available once frame `i + 2` has
//! arrived.

use std::collections::VecDeque;

use serde::Serialize;

use crate::embed::VisualEmbeddingSequence;
use crate::error::{Error, Result};

pub const DEFAULT_LOOKAHEAD: usize = 2;
pub const VIDEO_FRAME_MS: f64 = 40.0;
pub const DEADLINE_MS: f64 = 40.0;

/// Sliding window of the last `2 * lookahead + 1` video-frame embeddings.
///
/// Pushing frame `i` emits the centre of the window, which is frame
/// `i - lookahead`. Slots before the stream start hold zero vectors.
#[derive(Debug, Clone)]
pub struct LookaheadBuffer {
    lookahead: usize,
    dim: usize,
    slots: VecDeque<Vec<f32>>,
    next_index: usize,
}

impl LookaheadBuffer {
    pub fn new(dim: usize, lookahead: usize) -> Self {
        let capacity = 2 * lookahead + 1;
        LookaheadBuffer {
            lookahead,
            dim,
            slots: std::iter::repeat_n(vec![0.0; dim], capacity).collect(),
            next_index: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        2 * self.lookahead + 1
    }

    pub fn lookahead(&self) -> usize {
        self.lookahead
    }

    /// Number of slots holding pushed (non-padding) frames.
    pub fn occupied(&self) -> usize {
        self.next_index.min(self.capacity())
    }

    pub fn next_index(&self) -> usize {
        self.next_index
    }

    /// Push the embedding for video frame `index`; returns the embedding that
    /// just became complete, tagged with its frame index.
    pub fn push(&mut self, embedding: &[f32], index: usize) -> Result<Option<(usize, Vec<f32>)>> {
        if index != self.next_index {
            return Err(Error::Protocol(format!(
                "video frame {index} pushed, expected {}",
                self.next_index
            )));
        }
        if embedding.len() != self.dim {
            return Err(Error::invalid(format!(
                "embedding has {} values, expected {}",
                embedding.len(),
                self.dim
            )));
        }
        let mut slot = self.slots.pop_front().expect("capacity >= 1");
        slot.copy_from_slice(embedding);
        self.slots.push_back(slot);
        self.next_index += 1;
        Ok(index
            .checked_sub(self.lookahead)
            .map(|emit| (emit, self.slots[self.lookahead].clone())))
    }

    /// The full receptive-field window, oldest first.
    pub fn window(&self) -> impl Iterator<Item = &[f32]> {
        self.slots.iter().map(|s| s.as_slice())
    }
}

/// Hold upsampling from 25 to 100 fps: every vector repeated four times.
pub fn upsample_to_audio_rate(seq: &VisualEmbeddingSequence) -> Vec<Vec<f32>> {
    seq.frames()
        .flat_map(|v| std::iter::repeat_n(v.to_vec(), crate::AUDIO_FRAMES_PER_TICK))
        .collect()
}

/// Video frame whose embedding is held over audio frame `t`.
pub fn video_frame_for_audio(t: usize) -> usize {
    t / crate::AUDIO_FRAMES_PER_TICK
}

/// `(lookahead + 1) * frame_ms`: lookahead plus one frame of blocking.
pub fn algorithmic_latency(lookahead_frames: usize, video_frame_ms: f64) -> f64 {
    (lookahead_frames as f64 + 1.0) * video_frame_ms
}

/// Output delay in samples for the default 25 fps / 640-sample tick.
pub fn latency_samples(lookahead_frames: usize) -> usize {
    (lookahead_frames + 1) * crate::SAMPLES_PER_TICK
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct LatencyReport {
    pub video_frame_ms: f64,
    pub lookahead_frames: usize,
    pub algorithmic_latency_ms: f64,
    pub latency_samples: f64,
    pub sample_rate: u32,
    pub deadline_ms: f64,
}

impl LatencyReport {
    pub fn new(lookahead_frames: usize, video_frame_ms: f64, sample_rate: u32) -> Self {
        let ms = algorithmic_latency(lookahead_frames, video_frame_ms);
        LatencyReport {
            video_frame_ms,
            lookahead_frames,
            algorithmic_latency_ms: ms,
            latency_samples: ms * sample_rate as f64 / 1000.0,
            sample_rate,
            deadline_ms: video_frame_ms,
        }
    }
}
