//! Signal-processing kernel: analysis window, STFT, power-law compression,
//! mask application with noisy phase, and weighted overlap-add ISTFT.
//!
//! Frames are left aligned with no centre padding: frame `t` covers samples
//! `[t*hop, t*hop + win_len)` and is zero padded to `nfft` before the
//! transform. Only the `nfft/2 + 1` nonnegative-frequency bins are kept.

use std::f64::consts::TAU;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// Floor applied to the window-squared sum during WOLA normalisation.
pub const WOLA_FLOOR: f64 = 1e-8;

/// Default power-law compression exponent.
pub const DEFAULT_COMPRESSION: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
    pub nfft: usize,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            win_len: 400,
            hop: 160,
            nfft: 512,
            sample_rate: crate::SAMPLE_RATE,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.nfft / 2 + 1
    }

    /// Number of complete frames in a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.win_len {
            0
        } else {
            1 + (len - self.win_len) / self.hop
        }
    }

    fn validate(&self) -> Result<()> {
        if self.win_len < 2 || self.hop == 0 || self.hop > self.win_len {
            return Err(Error::invalid(format!(
                "bad framing: win_len={} hop={}",
                self.win_len, self.hop
            )));
        }
        if self.nfft < self.win_len {
            return Err(Error::invalid("nfft must be at least win_len"));
        }
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(())
    }
}

/// Periodic Hann window, `w[k] = 0.5 * (1 - cos(2*pi*k/len))`.
pub fn make_hann_window(len: usize) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(Error::invalid(format!("window length {len} < 2")));
    }
    Ok((0..len)
        .map(|k| 0.5 * (1.0 - (TAU * k as f64 / len as f64).cos()))
        .collect())
}

/// Complex T x bins spectrogram stored row major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub config: StftConfig,
    frames: usize,
    data: Vec<Complex64>,
}

impl Spectrogram {
    pub fn from_frames(config: StftConfig, frames: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != frames * config.bins() {
            return Err(Error::invalid(format!(
                "spectrogram data has {} entries, expected {} x {}",
                data.len(),
                frames,
                config.bins()
            )));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("spectrogram"));
        }
        Ok(Spectrogram {
            config,
            frames,
            data,
        })
    }

    pub fn zeros(config: StftConfig, frames: usize) -> Self {
        Spectrogram {
            config,
            frames,
            data: vec![Complex64::new(0.0, 0.0); frames * config.bins()],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.config.bins()
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        let b = self.bins();
        &self.data[t * b..(t + 1) * b]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        let b = self.bins();
        &mut self.data[t * b..(t + 1) * b]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    /// Magnitudes, row major.
    pub fn magnitude(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    fn same_shape(&self, other: &Spectrogram) -> bool {
        self.frames == other.frames && self.bins() == other.bins()
    }
}

/// Power-law compressed magnitudes, row major T x bins.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMagnitude {
    pub values: Vec<f64>,
    pub bins: usize,
    pub p: f64,
}

impl CompressedMagnitude {
    pub fn frames(&self) -> usize {
        if self.bins == 0 {
            0
        } else {
            self.values.len() / self.bins
        }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }
}

/// One mask frame; every value lies in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFrame {
    values: Vec<f64>,
}

impl MaskFrame {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask value {v} outside [0, 1]")));
        }
        Ok(MaskFrame { values })
    }

    pub fn filled(bins: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; bins])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Reusable FFT plans and window for one framing configuration.
///
/// Immutable after construction and shareable across threads; per-call
/// scratch buffers are allocated by the caller-facing helpers.
pub struct StftPlan {
    config: StftConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl StftPlan {
    pub fn new(config: StftConfig) -> Result<Self> {
        config.validate()?;
        let mut planner = FftPlanner::new();
        Ok(StftPlan {
            config,
            window: make_hann_window(config.win_len)?,
            forward: planner.plan_fft_forward(config.nfft),
            inverse: planner.plan_fft_inverse(config.nfft),
        })
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Transform one `win_len` frame into `bins` complex values.
    pub fn analyze_frame(&self, frame: &[f64], out: &mut [Complex64]) {
        debug_assert_eq!(frame.len(), self.config.win_len);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.config.nfft];
        for ((b, x), w) in buf.iter_mut().zip(frame).zip(&self.window) {
            b.re = x * w;
        }
        self.forward.process(&mut buf);
        out.copy_from_slice(&buf[..self.config.bins()]);
    }

    /// Inverse transform one frame and apply the synthesis window.
    /// Writes `win_len` samples.
    pub fn synthesize_frame(&self, spec: &[Complex64], out: &mut [f64]) {
        let n = self.config.nfft;
        let bins = self.config.bins();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        buf[..bins].copy_from_slice(spec);
        // Hermitian extension; DC and Nyquist imaginary parts are dropped by
        // taking the real part below.
        for k in bins..n {
            buf[k] = buf[n - k].conj();
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / n as f64;
        for ((o, b), w) in out.iter_mut().zip(&buf).zip(&self.window) {
            *o = b.re * scale * w;
        }
    }

    /// Steady-state window-squared sum as a function of position modulo hop.
    pub fn steady_state_denominator(&self) -> Vec<f64> {
        let hop = self.config.hop;
        (0..hop)
            .map(|phase| {
                self.window
                    .iter()
                    .skip(phase)
                    .step_by(hop)
                    .map(|w| w * w)
                    .sum()
            })
            .collect()
    }

    pub fn stft(&self, samples: &[f64], exec: Execution) -> Spectrogram {
        let c = self.config;
        let frames = c.frame_count(samples.len());
        let bins = c.bins();
        let mut data = vec![Complex64::new(0.0, 0.0); frames * bins];
        exec::for_each_chunk_mut(exec, &mut data, bins.max(1), |t, out| {
            let start = t * c.hop;
            self.analyze_frame(&samples[start..start + c.win_len], out);
        });
        Spectrogram {
            config: c,
            frames,
            data,
        }
    }

    pub fn istft(&self, spec: &Spectrogram, exec: Execution) -> Vec<f64> {
        let c = self.config;
        let t_count = spec.frames();
        if t_count == 0 {
            return Vec::new();
        }
        let len = (t_count - 1) * c.hop + c.win_len;
        let segments = exec::map_range(exec, t_count, |t| {
            let mut seg = vec![0.0; c.win_len];
            self.synthesize_frame(spec.frame(t), &mut seg);
            seg
        });
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        for (t, seg) in segments.iter().enumerate() {
            let start = t * c.hop;
            for (k, s) in seg.iter().enumerate() {
                out[start + k] += s;
                norm[start + k] += self.window[k] * self.window[k];
            }
        }
        for (o, d) in out.iter_mut().zip(&norm) {
            *o /= d.max(WOLA_FLOOR);
        }
        out
    }
}

/// STFT with left-aligned frames and no centre padding.
pub fn stft(wave: &Waveform, config: StftConfig) -> Result<Spectrogram> {
    if wave.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("waveform"));
    }
    let plan = StftPlan::new(StftConfig {
        sample_rate: wave.sample_rate,
        ..config
    })?;
    Ok(plan.stft(&wave.samples, Execution::default()))
}

/// Weighted overlap-add inverse with per-sample `sum w^2` normalisation.
///
/// Output length is `(T - 1) * hop + win_len`; an empty spectrogram yields
/// an empty waveform.
pub fn istft(spec: &Spectrogram) -> Result<Waveform> {
    let plan = StftPlan::new(spec.config)?;
    Ok(Waveform {
        samples: plan.istft(spec, Execution::default()),
        sample_rate: spec.config.sample_rate,
    })
}

/// Elementwise `mag^p`.
pub fn compress(mag: &[f64], bins: usize, p: f64) -> Result<CompressedMagnitude> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::invalid(format!("compression exponent {p} not in (0, 1]")));
    }
    if bins == 0 || mag.len() % bins != 0 {
        return Err(Error::invalid("magnitude length is not a multiple of bins"));
    }
    if let Some(m) = mag.iter().find(|m| !(**m >= 0.0)) {
        return Err(Error::invalid(format!("negative or NaN magnitude {m}")));
    }
    Ok(CompressedMagnitude {
        values: mag.iter().map(|m| m.powf(p)).collect(),
        bins,
        p,
    })
}

/// Scale every bin by its mask value. Scaling by a nonnegative real keeps the
/// noisy phase exactly.
pub fn apply_mask(mask: &[MaskFrame], noisy: &Spectrogram) -> Result<Spectrogram> {
    if mask.len() != noisy.frames() {
        return Err(Error::invalid(format!(
            "mask has {} frames, spectrogram {}",
            mask.len(),
            noisy.frames()
        )));
    }
    let mut out = noisy.clone();
    for (t, m) in mask.iter().enumerate() {
        if m.len() != noisy.bins() {
            return Err(Error::invalid(format!(
                "mask frame {t} has {} bins, expected {}",
                m.len(),
                noisy.bins()
            )));
        }
        for (y, g) in out.frame_mut(t).iter_mut().zip(m.values()) {
            *y *= *g;
        }
    }
    Ok(out)
}

pub(crate) fn check_same_shape(a: &Spectrogram, b: &Spectrogram) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.frames(),
            a.bins(),
            b.frames(),
            b.bins()
        )))
    }
}
