//! Causal mask predictor.
//!
//! Per 10 ms audio frame: 15 blocks of conv(3x3) + batch norm + ReLU over
//! (time, frequency) on the compressed magnitude, flattened into the audio
//! embedding; concatenated with the held visual embedding; one LSTM step;
//! fc1 + ReLU, fc2 + ReLU, fc3 + sigmoid.
//!
//! Convolutions see the current frame and the two before it (left padding
//! only), so no output depends on a later audio frame. Frequency is padded
//! by one bin on each side.

mod layers;
pub mod weights;

use crate::dsp::MaskFrame;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

pub use layers::{ConvLayer, Dense, LstmLayer, LstmState};
pub use weights::{
    decode_model, encode_model, load_model, save_model, ModelConfig, ModelWeights, Tensor,
    CONV_LAYERS,
};

/// Inference-ready network. Immutable; share it freely between streams.
#[derive(Debug, Clone)]
pub struct MaskNet {
    config: ModelConfig,
    conv: Vec<ConvLayer>,
    lstm: LstmLayer,
    fc: [Dense; 3],
}

/// Per-stream recurrent state: the two previous inputs of every conv layer
/// and the LSTM state.
#[derive(Debug, Clone)]
pub struct StreamState {
    conv_history: Vec<[Vec<f32>; 2]>,
    pub lstm: LstmState,
    frames_seen: usize,
}

impl StreamState {
    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }
}

impl MaskNet {
    pub fn from_weights(weights: &ModelWeights) -> Result<Self> {
        weights.validate()?;
        let c = &weights.config;
        let widths = c.freq_widths();
        let mut conv = Vec::with_capacity(CONV_LAYERS);
        let mut c_in = 1;
        for l in 0..CONV_LAYERS {
            conv.push(ConvLayer::from_weights(
                weights,
                l + 1,
                c_in,
                widths[l],
                c.conv_freq_strides[l],
            )?);
            c_in = c.conv_channels[l];
        }
        let lstm = LstmLayer::from_weights(weights)?;
        let fc = [
            Dense::from_weights(weights, "fc1")?,
            Dense::from_weights(weights, "fc2")?,
            Dense::from_weights(weights, "fc3")?,
        ];
        Ok(MaskNet {
            config: c.clone(),
            conv,
            lstm,
            fc,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn conv_layers(&self) -> &[ConvLayer] {
        &self.conv
    }

    pub fn lstm(&self) -> &LstmLayer {
        &self.lstm
    }

    pub fn fc_layers(&self) -> &[Dense; 3] {
        &self.fc
    }

    pub fn new_state(&self) -> StreamState {
        StreamState {
            conv_history: self
                .conv
                .iter()
                .map(|l| [vec![0.0; l.padded_input_len()], vec![0.0; l.padded_input_len()]])
                .collect(),
            lstm: LstmState::zeros(self.config.lstm_hidden),
            frames_seen: 0,
        }
    }

    fn check_frame(&self, frame: &[f32]) -> Result<()> {
        if frame.len() != self.config.bins {
            return Err(Error::invalid(format!(
                "audio frame has {} bins, expected {}",
                frame.len(),
                self.config.bins
            )));
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("audio frame"));
        }
        Ok(())
    }

    fn pad_input(&self, frame: &[f32]) -> Vec<f32> {
        let mut p = vec![0.0; self.conv[0].padded_input_len()];
        p[1..1 + frame.len()].copy_from_slice(frame);
        p
    }

    /// Audio embedding for one new compressed-magnitude frame, advancing the
    /// conv history in `state`.
    pub fn audio_encode(&self, state: &mut StreamState, frame: &[f32]) -> Result<Vec<f32>> {
        self.check_frame(frame)?;
        let mut x = self.pad_input(frame);
        for (layer, hist) in self.conv.iter().zip(state.conv_history.iter_mut()) {
            let mut y = vec![0.0; layer.padded_output_len()];
            layer.forward_frame([&hist[0], &hist[1], &x], &mut y);
            hist.rotate_left(1);
            hist[1] = x;
            x = y;
        }
        state.frames_seen += 1;
        Ok(self.conv.last().unwrap().unpad_output(&x))
    }

    /// Audio embeddings for a whole sequence (row-major T x bins) starting
    /// from zero history. Frames are independent within a layer, so each
    /// layer is evaluated in parallel over time; results are identical to
    /// calling [`MaskNet::audio_encode`] frame by frame.
    pub fn audio_encode_batch(&self, frames: &[f32], exec: Execution) -> Result<Vec<Vec<f32>>> {
        let bins = self.config.bins;
        if frames.len() % bins != 0 {
            return Err(Error::invalid("frame buffer is not a multiple of bins"));
        }
        let t_count = frames.len() / bins;
        let mut x: Vec<Vec<f32>> = exec::map_range(exec, t_count, |t| {
            self.pad_input(&frames[t * bins..(t + 1) * bins])
        });
        for (t, f) in frames.chunks_exact(bins).enumerate() {
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("non-finite value in audio frame {t}")));
            }
        }
        for layer in &self.conv {
            let zero = vec![0.0; layer.padded_input_len()];
            let input = &x;
            x = exec::map_range(exec, t_count, |t| {
                let past = |k: usize| t.checked_sub(k).map_or(zero.as_slice(), |i| &input[i]);
                let mut y = vec![0.0; layer.padded_output_len()];
                layer.forward_frame([past(2), past(1), &input[t]], &mut y);
                y
            });
        }
        let last = self.conv.last().unwrap();
        Ok(x.iter().map(|f| last.unpad_output(f)).collect())
    }

    /// LSTM, FC stack and sigmoid for one frame given its audio embedding.
    pub fn predict_from_embedding(
        &self,
        audio_embedding: &[f32],
        visual: &[f32],
        lstm: &mut LstmState,
    ) -> Result<MaskFrame> {
        if audio_embedding.len() != self.config.audio_embed_dim {
            return Err(Error::invalid(format!(
                "audio embedding has {} values, expected {}",
                audio_embedding.len(),
                self.config.audio_embed_dim
            )));
        }
        if visual.len() != self.config.visual_dim {
            return Err(Error::invalid(format!(
                "visual embedding has {} values, expected {}",
                visual.len(),
                self.config.visual_dim
            )));
        }
        let mut x = Vec::with_capacity(self.config.lstm_input_dim());
        x.extend_from_slice(audio_embedding);
        x.extend_from_slice(visual);
        self.lstm.step(&x, lstm);
        let h1 = self.fc[0].forward_relu(&lstm.h);
        let h2 = self.fc[1].forward_relu(&h1);
        let logits = self.fc[2].forward(&h2);
        MaskFrame::new(logits.iter().map(|&z| sigmoid(z as f64)).collect())
    }

    /// Full per-frame step: conv encoder, fusion, LSTM, FC, sigmoid.
    pub fn predict_mask(
        &self,
        compressed_frame: &[f32],
        visual: &[f32],
        state: &mut StreamState,
    ) -> Result<MaskFrame> {
        let audio = self.audio_encode(state, compressed_frame)?;
        self.predict_from_embedding(&audio, visual, &mut state.lstm)
    }

    /// Masks for a whole sequence from a fresh state. `visual(t)` supplies
    /// the (already upsampled) visual embedding of audio frame `t`.
    pub fn predict_sequence<'a>(
        &self,
        compressed: &[f32],
        visual: impl Fn(usize) -> &'a [f32],
        exec: Execution,
    ) -> Result<Vec<MaskFrame>> {
        let audio = self.audio_encode_batch(compressed, exec)?;
        let mut lstm = LstmState::zeros(self.config.lstm_hidden);
        audio
            .iter()
            .enumerate()
            .map(|(t, a)| self.predict_from_embedding(a, visual(t), &mut lstm))
            .collect()
    }
}

/// Logistic function evaluated in f64.
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
