//! Independent scalar-loop references. Everything here is written from the
//! definitions, in f64, straight from raw weight tensors, and shares no code
//! with the library kernels.
#![allow(dead_code)]

use std::f64::consts::PI;

use avse_core::masknet::{ModelConfig, ModelWeights};
use avse_core::rng::FixtureRng;

pub const WIN: usize = 400;
pub const HOP: usize = 160;
pub const NFFT: usize = 512;
pub const BINS: usize = 257;
pub const TICK: usize = 640;
pub const DELAY: usize = 1920;

pub fn hann(n: usize) -> f64 {
    0.5 - 0.5 * (2.0 * PI * n as f64 / WIN as f64).cos()
}

/// Naive DFT of one windowed frame: bins 0..=256 as (re, im).
pub fn dft_frame(x: &[f64]) -> Vec<(f64, f64)> {
    (0..BINS)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &v) in x.iter().enumerate().take(WIN) {
                let a = -2.0 * PI * (k * n % NFFT) as f64 / NFFT as f64;
                let s = hann(n) * v;
                re += s * a.cos();
                im += s * a.sin();
            }
            (re, im)
        })
        .collect()
}

/// Naive inverse real DFT of a one-sided spectrum, first `WIN` samples.
pub fn idft_frame(spec: &[(f64, f64)]) -> Vec<f64> {
    (0..WIN)
        .map(|n| {
            let mut acc = spec[0].0 + spec[BINS - 1].0 * if n % 2 == 0 { 1.0 } else { -1.0 };
            for (k, &(re, im)) in spec.iter().enumerate().take(BINS - 1).skip(1) {
                let a = 2.0 * PI * (k * n % NFFT) as f64 / NFFT as f64;
                acc += 2.0 * (re * a.cos() - im * a.sin());
            }
            acc / NFFT as f64
        })
        .collect()
}

/// Engine framing: 240 leading zeros, zero padded to whole 640-sample ticks.
pub fn engine_padded(x: &[f64]) -> Vec<f64> {
    let ticks = x.len().div_ceil(TICK);
    let mut p = vec![0.0; WIN - HOP];
    p.extend_from_slice(x);
    p.resize(WIN - HOP + ticks * TICK, 0.0);
    p
}

pub fn stft_frames(padded: &[f64]) -> Vec<Vec<(f64, f64)>> {
    let frames = if padded.len() < WIN { 0 } else { 1 + (padded.len() - WIN) / HOP };
    (0..frames).map(|t| dft_frame(&padded[t * HOP..t * HOP + WIN])).collect()
}

/// Weighted overlap-add with per-sample window-square normalisation.
pub fn wola(frames: &[Vec<(f64, f64)>], len: usize) -> Vec<f64> {
    let mut num = vec![0.0; len];
    let mut den = vec![0.0; len];
    for (t, f) in frames.iter().enumerate() {
        let seg = idft_frame(f);
        for n in 0..WIN {
            if t * HOP + n < len {
                num[t * HOP + n] += hann(n) * seg[n];
                den[t * HOP + n] += hann(n) * hann(n);
            }
        }
    }
    num.iter().zip(&den).map(|(a, b)| a / b.max(1e-8)).collect()
}

fn tensor(w: &ModelWeights, name: &str) -> Vec<f64> {
    w.get(name).unwrap().data.iter().map(|&v| v as f64).collect()
}

/// One conv block on unpadded `[c][f]` inputs at times t-2, t-1, t.
pub fn conv_block(w: &ModelWeights, layer: usize, x: [&[Vec<f64>]; 3]) -> Vec<Vec<f64>> {
    let cfg = &w.config;
    let p = format!("conv{}", layer + 1);
    let shape = w.get(&format!("{p}.kernel")).unwrap().shape.clone();
    let (c_out, c_in) = (shape[0], shape[1]);
    let k = tensor(w, &format!("{p}.kernel"));
    let b = tensor(w, &format!("{p}.bias"));
    let gamma = tensor(w, &format!("{p}.bn_gamma"));
    let beta = tensor(w, &format!("{p}.bn_beta"));
    let mean = tensor(w, &format!("{p}.bn_mean"));
    let var = tensor(w, &format!("{p}.bn_var"));
    let eps = cfg.bn_eps as f64;
    let f_in = x[2][0].len();
    let s = cfg.conv_freq_strides[layer];
    let f_out = (f_in - 1) / s + 1;
    let mut y = vec![vec![0.0; f_out]; c_out];
    for co in 0..c_out {
        for fo in 0..f_out {
            let mut acc = b[co];
            for ci in 0..c_in {
                for kt in 0..3 {
                    for kf in 0..3 {
                        let f = (s * fo + kf) as isize - 1;
                        if f < 0 || f as usize >= f_in {
                            continue;
                        }
                        acc += k[((co * c_in + ci) * 3 + kt) * 3 + kf] * x[kt][ci][f as usize];
                    }
                }
            }
            let bn = gamma[co] * (acc - mean[co]) / (var[co] + eps).sqrt() + beta[co];
            y[co][fo] = bn.max(0.0);
        }
    }
    y
}

/// Whole conv encoder over a sequence of compressed frames, from zero history.
pub fn encode_sequence(w: &ModelWeights, frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut x: Vec<Vec<Vec<f64>>> = frames.iter().map(|f| vec![f.clone()]).collect();
    for layer in 0..w.config.conv_channels.len() {
        let c_in = x[0].len();
        let f_in = x[0][0].len();
        let zero = vec![vec![0.0; f_in]; c_in];
        x = (0..x.len())
            .map(|t| {
                let at = |d: usize| if t >= d { &x[t - d][..] } else { &zero[..] };
                conv_block(w, layer, [at(2), at(1), at(0)])
            })
            .collect();
    }
    x.into_iter().map(|c| c.concat()).collect()
}

pub fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One LSTM step with separate input and hidden biases, gates (i, f, g, o).
pub fn lstm_step(w: &ModelWeights, x: &[f64], h: &mut Vec<f64>, c: &mut Vec<f64>) {
    let hid = w.config.lstm_hidden;
    let wih = tensor(w, "lstm.W_ih");
    let whh = tensor(w, "lstm.W_hh");
    let bih = tensor(w, "lstm.b_ih");
    let bhh = tensor(w, "lstm.b_hh");
    let inp = x.len();
    let gate = |r: usize| {
        let mut z = bih[r] + bhh[r];
        for j in 0..inp {
            z += wih[r * inp + j] * x[j];
        }
        for j in 0..hid {
            z += whh[r * hid + j] * h[j];
        }
        z
    };
    let z: Vec<f64> = (0..4 * hid).map(gate).collect();
    for j in 0..hid {
        let (i, f, g, o) = (sig(z[j]), sig(z[hid + j]), z[2 * hid + j].tanh(), sig(z[3 * hid + j]));
        c[j] = f * c[j] + i * g;
        h[j] = o * c[j].tanh();
    }
}

pub fn dense(w: &ModelWeights, name: &str, x: &[f64], relu: bool) -> Vec<f64> {
    let shape = w.get(&format!("{name}.W")).unwrap().shape.clone();
    let m = tensor(w, &format!("{name}.W"));
    let b = tensor(w, &format!("{name}.b"));
    (0..shape[0])
        .map(|o| {
            let mut acc = b[o];
            for i in 0..shape[1] {
                acc += m[o * shape[1] + i] * x[i];
            }
            if relu {
                acc.max(0.0)
            } else {
                acc
            }
        })
        .collect()
}

/// FC head and sigmoid on an LSTM output.
pub fn head(w: &ModelWeights, h: &[f64]) -> Vec<f64> {
    let a = dense(w, "fc1", h, true);
    let b = dense(w, "fc2", &a, true);
    dense(w, "fc3", &b, false).into_iter().map(sig).collect()
}

/// Masks for a sequence of compressed frames; `visual(t)` per audio frame.
pub fn masks(w: &ModelWeights, compressed: &[Vec<f64>], visual: impl Fn(usize) -> Vec<f64>) -> Vec<Vec<f64>> {
    let audio = encode_sequence(w, compressed);
    let hid = w.config.lstm_hidden;
    let (mut h, mut c) = (vec![0.0; hid], vec![0.0; hid]);
    audio
        .iter()
        .enumerate()
        .map(|(t, a)| {
            let mut x = a.clone();
            x.extend(visual(t));
            lstm_step(w, &x, &mut h, &mut c);
            head(w, &h)
        })
        .collect()
}

/// Full offline pipeline: framing, analysis, compression, network, masking,
/// resynthesis, and the 1920-sample output delay. Returns (output, masks).
pub fn pipeline(
    w: &ModelWeights,
    x: &[f64],
    visual: impl Fn(usize) -> Vec<f64>,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let padded = engine_padded(x);
    let spec = stft_frames(&padded);
    // The network consumes f32 inputs.
    let compressed: Vec<Vec<f64>> = spec
        .iter()
        .map(|f| f.iter().map(|(re, im)| (re.hypot(*im).powf(0.3) as f32) as f64).collect())
        .collect();
    let m = masks(w, &compressed, |t| visual(t / 4));
    let masked: Vec<Vec<(f64, f64)>> = spec
        .iter()
        .zip(&m)
        .map(|(f, g)| f.iter().zip(g).map(|((re, im), g)| (re * g, im * g)).collect())
        .collect();
    let y = wola(&masked, padded.len());
    let mut out = vec![0.0; x.len()];
    for n in DELAY..x.len() {
        out[n] = y[n - DELAY + WIN - HOP];
    }
    (out, m)
}

/// A small random model: random channel counts, strides, widths and
/// batch-norm statistics.
pub fn random_small_config(rng: &mut FixtureRng) -> ModelConfig {
    let mut c = ModelConfig::tiny();
    c.conv_channels = (0..15).map(|_| 1 + rng.index(3)).collect();
    c.conv_freq_strides = (0..15).map(|_| 1 + rng.index(2)).collect();
    c.lstm_hidden = 1 + rng.index(12);
    c.visual_dim = 1 + rng.index(10);
    c.fc_hidden = [1 + rng.index(16), 1 + rng.index(16)];
    c.bn_eps = if rng.index(2) == 0 { 0.0 } else { 1e-5 };
    c.audio_embed_dim = c.derived_audio_embed_dim();
    c
}

pub fn noise(len: usize, seed: u64, amp: f64) -> Vec<f64> {
    let mut r = FixtureRng::new(seed);
    (0..len).map(|_| r.uniform(-amp, amp)).collect()
}

/// Speech-like test target: a harmonic series on a random pitch with a
/// syllable-rate amplitude envelope.
pub fn voiced(len: usize, seed: u64) -> Vec<f64> {
    let mut r = FixtureRng::new(seed);
    let f0 = r.uniform(100.0, 220.0);
    let rate = r.uniform(3.0, 6.0);
    let phase: Vec<f64> = (0..12).map(|_| r.uniform(0.0, 2.0 * PI)).collect();
    (0..len)
        .map(|n| {
            let t = n as f64 / 16000.0;
            let env = 0.5 + 0.5 * (2.0 * PI * rate * t).sin();
            let s: f64 = (1..=12)
                .map(|h| (2.0 * PI * f0 * h as f64 * t + phase[h - 1]).sin() / h as f64)
                .sum();
            0.2 * env * s
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
