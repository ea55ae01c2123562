use super::weights::{ModelWeights, KERNEL_FREQ, KERNEL_TIME};
use crate::error::{Error, Result};

/// Causal 3x3 conv over (time, frequency) with batch norm folded into a
/// per-channel affine map, followed by ReLU.
///
/// Frames are stored channel major with one zero bin of padding on each side
/// of the frequency axis, so a frame of `c` channels and `f` bins occupies
/// `c * (f + 2)` values.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub c_in: usize,
    pub c_out: usize,
    pub f_in: usize,
    pub f_out: usize,
    pub stride: usize,
    /// `[c_out][c_in][time][freq]`; time index 2 is the current frame.
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
    /// Folded batch norm: `y = x * scale + shift`.
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

impl ConvLayer {
    pub(crate) fn from_weights(
        w: &ModelWeights,
        index: usize,
        c_in: usize,
        f_in: usize,
        stride: usize,
    ) -> Result<Self> {
        let p = format!("conv{index}");
        let get = |n: &str| w.get(&format!("{p}.{n}")).map(|t| t.data.clone());
        let kernel = get("kernel")?;
        let bias = get("bias")?;
        let gamma = get("bn_gamma")?;
        let beta = get("bn_beta")?;
        let mean = get("bn_mean")?;
        let var = get("bn_var")?;
        let eps = w.config.bn_eps;
        let scale: Vec<f32> = gamma
            .iter()
            .zip(&var)
            .map(|(g, v)| g / (v + eps).sqrt())
            .collect();
        let shift = beta
            .iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((b, m), s)| b - m * s)
            .collect();
        Ok(ConvLayer {
            c_in,
            c_out: bias.len(),
            f_in,
            f_out: (f_in - 1) / stride + 1,
            stride,
            kernel,
            bias,
            scale,
            shift,
        })
    }

    pub fn padded_input_len(&self) -> usize {
        self.c_in * (self.f_in + 2)
    }

    pub fn padded_output_len(&self) -> usize {
        self.c_out * (self.f_out + 2)
    }

    /// Compute one output frame from the inputs at `t-2`, `t-1`, `t`.
    /// `out` must be zeroed padded storage of `padded_output_len()`.
    pub fn forward_frame(&self, input: [&[f32]; 3], out: &mut [f32]) {
        let (fi, fo, s) = (self.f_in + 2, self.f_out, self.stride);
        let mut acc = vec![0.0f32; fo];
        for co in 0..self.c_out {
            acc.fill(self.bias[co]);
            for ci in 0..self.c_in {
                for (kt, frame) in input.iter().enumerate() {
                    let row = &frame[ci * fi..(ci + 1) * fi];
                    let base = ((co * self.c_in + ci) * KERNEL_TIME + kt) * KERNEL_FREQ;
                    for kf in 0..KERNEL_FREQ {
                        let w = self.kernel[base + kf];
                        if s == 1 {
                            for (a, x) in acc.iter_mut().zip(&row[kf..kf + fo]) {
                                *a += w * x;
                            }
                        } else {
                            for (a, x) in acc.iter_mut().zip(row[kf..].iter().step_by(s)) {
                                *a += w * x;
                            }
                        }
                    }
                }
            }
            let dst = &mut out[co * (fo + 2) + 1..co * (fo + 2) + 1 + fo];
            let (sc, sh) = (self.scale[co], self.shift[co]);
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = (a * sc + sh).max(0.0);
            }
        }
    }

    /// Strip frequency padding: channel-major `c_out * f_out` values.
    pub fn unpad_output(&self, padded: &[f32]) -> Vec<f32> {
        padded
            .chunks_exact(self.f_out + 2)
            .flat_map(|row| row[1..=self.f_out].iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f32>,
    pub c: Vec<f32>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Unidirectional LSTM cell. Gate rows are stacked in the order
/// input, forget, cell, output.
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub input: usize,
    pub hidden: usize,
    pub w_ih: Vec<f32>,
    pub w_hh: Vec<f32>,
    /// `b_ih + b_hh`, summed once at load.
    pub bias: Vec<f32>,
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent partial sums let the compiler vectorise.
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for k in 0..8 {
            acc[k] += a[i * 8 + k] * b[i * 8 + k];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmLayer {
    pub(crate) fn from_weights(w: &ModelWeights) -> Result<Self> {
        let w_ih = w.get("lstm.W_ih")?;
        let b_ih = &w.get("lstm.b_ih")?.data;
        let b_hh = &w.get("lstm.b_hh")?.data;
        Ok(LstmLayer {
            input: w_ih.shape[1],
            hidden: w.config.lstm_hidden,
            w_ih: w_ih.data.clone(),
            w_hh: w.get("lstm.W_hh")?.data.clone(),
            bias: b_ih.iter().zip(b_hh).map(|(a, b)| a + b).collect(),
        })
    }

    /// One time step; updates `state` in place.
    pub fn step(&self, x: &[f32], state: &mut LstmState) {
        let h = self.hidden;
        let gates: Vec<f32> = (0..4 * h)
            .map(|r| {
                self.bias[r]
                    + dot(&self.w_ih[r * self.input..(r + 1) * self.input], x)
                    + dot(&self.w_hh[r * h..(r + 1) * h], &state.h)
            })
            .collect();
        for j in 0..h {
            let i = sigmoid32(gates[j]);
            let f = sigmoid32(gates[h + j]);
            let g = gates[2 * h + j].tanh();
            let o = sigmoid32(gates[3 * h + j]);
            state.c[j] = f * state.c[j] + i * g;
            state.h[j] = o * state.c[j].tanh();
        }
    }
}

/// Fully connected layer, `W` stored `[out][in]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub w: Vec<f32>,
    pub b: Vec<f32>,
}

impl Dense {
    pub(crate) fn from_weights(w: &ModelWeights, name: &str) -> Result<Self> {
        let wt = w.get(&format!("{name}.W"))?;
        let b = w.get(&format!("{name}.b"))?.data.clone();
        if wt.shape[0] != b.len() {
            return Err(Error::model(format!("{name}.b"), "bias length mismatch"));
        }
        Ok(Dense {
            input: wt.shape[1],
            output: wt.shape[0],
            w: wt.data.clone(),
            b,
        })
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        (0..self.output)
            .map(|o| self.b[o] + dot(&self.w[o * self.input..(o + 1) * self.input], x))
            .collect()
    }

    pub fn forward_relu(&self, x: &[f32]) -> Vec<f32> {
        let mut y = self.forward(x);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }
}
