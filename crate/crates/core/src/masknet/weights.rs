//! Named-tensor model container and the RVW1 weight file.
//!
//! RVW1 layout (little endian):
//!
//! ```text
//! "RVW1"  u32 version=1
//! u32 metadata length, then UTF-8 `key=value` lines
//! u32 tensor count
//! per tensor: u16 name length, name, u8 ndim, ndim x u32 dims,
//!             float32 data row major
//! ```
//!
//! Tensors are written in manifest order (see [`ModelConfig::manifest`]) and
//! metadata keys in a fixed order, so save -> load -> save is byte exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::FixtureRng;

pub const RVW1_MAGIC: &[u8; 4] = b"RVW1";
pub const RVW1_VERSION: u32 = 1;
pub const CONV_LAYERS: usize = 15;
pub const KERNEL_TIME: usize = 3;
pub const KERNEL_FREQ: usize = 3;

const CONV_PARAMS: [&str; 6] = ["kernel", "bias", "bn_gamma", "bn_beta", "bn_mean", "bn_var"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub audio_embed_dim: usize,
    pub visual_dim: usize,
    pub lstm_hidden: usize,
    pub bins: usize,
    /// Output channels of each conv layer.
    pub conv_channels: Vec<usize>,
    /// Frequency stride of each conv layer (1 or 2).
    pub conv_freq_strides: Vec<usize>,
    /// Output widths of fc1 and fc2; fc3 always outputs `bins`.
    pub fc_hidden: [usize; 2],
    /// Added to `bn_var` before the square root.
    pub bn_eps: f32,
}

fn block_plan(widths: [usize; 3]) -> (Vec<usize>, Vec<usize>) {
    let channels = widths.iter().flat_map(|&c| [c; 5]).collect();
    let strides = (0..CONV_LAYERS)
        .map(|l| if l % 5 == 4 { 2 } else { 1 })
        .collect();
    (channels, strides)
}

impl Default for ModelConfig {
    fn default() -> Self {
        let (conv_channels, conv_freq_strides) = block_plan([16, 32, 8]);
        let mut c = ModelConfig {
            audio_embed_dim: 0,
            visual_dim: crate::embed::DEFAULT_EMBED_DIM,
            lstm_hidden: 512,
            bins: crate::BINS,
            conv_channels,
            conv_freq_strides,
            fc_hidden: [512, 512],
            bn_eps: 0.0,
        };
        c.audio_embed_dim = c.derived_audio_embed_dim();
        c
    }
}

impl ModelConfig {
    /// Small model used for benchmarks and fixtures.
    pub fn tiny() -> Self {
        let (conv_channels, conv_freq_strides) = block_plan([4, 8, 2]);
        let mut c = ModelConfig {
            audio_embed_dim: 0,
            visual_dim: crate::embed::DEFAULT_EMBED_DIM,
            lstm_hidden: 64,
            bins: crate::BINS,
            conv_channels,
            conv_freq_strides,
            fc_hidden: [128, 128],
            bn_eps: 0.0,
        };
        c.audio_embed_dim = c.derived_audio_embed_dim();
        c
    }

    /// Copy with every conv channel count multiplied by `factor`.
    pub fn with_channel_scale(&self, factor: usize) -> Self {
        let mut c = self.clone();
        c.conv_channels.iter_mut().for_each(|ch| *ch *= factor);
        c.audio_embed_dim = c.derived_audio_embed_dim();
        c
    }

    /// Frequency width at the input of each layer, plus the final output.
    pub fn freq_widths(&self) -> Vec<usize> {
        let mut widths = vec![self.bins];
        for &s in &self.conv_freq_strides {
            let f = *widths.last().unwrap();
            widths.push(if f == 0 || s == 0 { 0 } else { (f - 1) / s + 1 });
        }
        widths
    }

    /// Flattened size of the last conv layer's output.
    pub fn derived_audio_embed_dim(&self) -> usize {
        let f = self.freq_widths().last().copied().unwrap_or(0);
        self.conv_channels.last().copied().unwrap_or(0) * f
    }

    pub fn lstm_input_dim(&self) -> usize {
        self.audio_embed_dim + self.visual_dim
    }

    /// Every tensor the config requires, in canonical order, with shapes.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 1;
        for (l, &c_out) in self.conv_channels.iter().enumerate() {
            let p = format!("conv{}", l + 1);
            for name in CONV_PARAMS {
                let shape = if name == "kernel" {
                    vec![c_out, c_in, KERNEL_TIME, KERNEL_FREQ]
                } else {
                    vec![c_out]
                };
                out.push((format!("{p}.{name}"), shape));
            }
            c_in = c_out;
        }
        let h = self.lstm_hidden;
        out.push(("lstm.W_ih".into(), vec![4 * h, self.lstm_input_dim()]));
        out.push(("lstm.W_hh".into(), vec![4 * h, h]));
        out.push(("lstm.b_ih".into(), vec![4 * h]));
        out.push(("lstm.b_hh".into(), vec![4 * h]));
        let dims = [h, self.fc_hidden[0], self.fc_hidden[1], self.bins];
        for k in 0..3 {
            out.push((format!("fc{}.W", k + 1), vec![dims[k + 1], dims[k]]));
            out.push((format!("fc{}.b", k + 1), vec![dims[k + 1]]));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let meta = |key: &str, msg: String| Err(Error::model(format!("metadata.{key}"), msg));
        if self.bins != crate::BINS {
            return meta("bins", format!("bins = {}, expected {}", self.bins, crate::BINS));
        }
        if self.conv_channels.len() != CONV_LAYERS {
            return meta(
                "conv_channels",
                format!("{} layers, expected {CONV_LAYERS}", self.conv_channels.len()),
            );
        }
        if self.conv_freq_strides.len() != CONV_LAYERS {
            return meta(
                "conv_freq_strides",
                format!("{} layers, expected {CONV_LAYERS}", self.conv_freq_strides.len()),
            );
        }
        if self.conv_channels.contains(&0) {
            return meta("conv_channels", "zero channel count".into());
        }
        if self.conv_freq_strides.iter().any(|s| !(1..=2).contains(s)) {
            return meta("conv_freq_strides", "strides must be 1 or 2".into());
        }
        if self.visual_dim == 0 || self.lstm_hidden == 0 || self.fc_hidden.contains(&0) {
            return meta("visual_dim", "dimensions must be nonzero".into());
        }
        let derived = self.derived_audio_embed_dim();
        if self.audio_embed_dim != derived {
            return meta(
                "audio_embed_dim",
                format!(
                    "audio_embed_dim = {}, but the conv stack flattens to {derived}",
                    self.audio_embed_dim
                ),
            );
        }
        if !(self.bn_eps >= 0.0) {
            return meta("bn_eps", "bn_eps must be nonnegative".into());
        }
        Ok(())
    }

    fn to_metadata(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "audio_embed_dim={}\nvisual_dim={}\nlstm_hidden={}\nbins={}\nconv_channels={}\nconv_freq_strides={}\nfc_hidden={}\nbn_eps={:?}\n",
            self.audio_embed_dim,
            self.visual_dim,
            self.lstm_hidden,
            self.bins,
            list(&self.conv_channels),
            list(&self.conv_freq_strides),
            list(&self.fc_hidden),
            self.bn_eps,
        )
    }

    fn from_metadata(text: &str, offset: usize) -> Result<Self> {
        let err = |msg: String| Error::Format {
            what: "RVW1",
            offset: offset as u64,
            msg,
        };
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("metadata line without '=': {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| {
            kv.remove(key)
                .ok_or_else(|| err(format!("metadata key `{key}` missing")))
        };
        let num = |key: &str, v: String| {
            v.parse::<usize>()
                .map_err(|_| err(format!("metadata `{key}` is not an integer: {v:?}")))
        };
        let list = |key: &str, v: String| {
            v.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| err(format!("metadata `{key}` has a bad entry: {x:?}")))
                })
                .collect::<Result<Vec<_>>>()
        };
        let audio_embed_dim = num("audio_embed_dim", take("audio_embed_dim")?)?;
        let visual_dim = num("visual_dim", take("visual_dim")?)?;
        let lstm_hidden = num("lstm_hidden", take("lstm_hidden")?)?;
        let bins = num("bins", take("bins")?)?;
        let conv_channels = list("conv_channels", take("conv_channels")?)?;
        let conv_freq_strides = list("conv_freq_strides", take("conv_freq_strides")?)?;
        let fc = list("fc_hidden", take("fc_hidden")?)?;
        let bn_eps = match kv.remove("bn_eps") {
            Some(v) => v
                .parse::<f32>()
                .map_err(|_| err(format!("metadata `bn_eps` is not a number: {v:?}")))?,
            None => 0.0,
        };
        if let Some(k) = kv.keys().next() {
            return Err(err(format!("unknown metadata key `{k}`")));
        }
        let fc_hidden: [usize; 2] = fc
            .try_into()
            .map_err(|_| err("fc_hidden must list two widths".into()))?;
        Ok(ModelConfig {
            audio_embed_dim,
            visual_dim,
            lstm_hidden,
            bins,
            conv_channels,
            conv_freq_strides,
            fc_hidden,
            bn_eps,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }
}

/// Model configuration plus its named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::model(name, "missing tensor"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::model(name, "missing tensor"))
    }

    /// Check the config and that the tensor set matches the manifest exactly.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let manifest = self.config.manifest();
        for (name, shape) in &manifest {
            let t = self.get(name)?;
            if &t.shape != shape {
                return Err(Error::model(
                    name,
                    format!("shape {:?}, expected {:?}", t.shape, shape),
                ));
            }
            if t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::model(name, "data length does not match shape"));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::model(name, "non-finite value"));
            }
            if name.ends_with(".bn_var") {
                if let Some(v) = t.data.iter().find(|v| **v < 0.0) {
                    return Err(Error::model(name, format!("negative variance {v}")));
                }
                if t.data.iter().any(|v| v + self.config.bn_eps <= 0.0) {
                    return Err(Error::model(name, "variance + eps must be positive"));
                }
            }
        }
        if self.tensors.len() != manifest.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !manifest.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::model(
                extra,
                format!(
                    "tensor count {} does not match manifest ({})",
                    self.tensors.len(),
                    manifest.len()
                ),
            ));
        }
        Ok(())
    }

    fn with_init(config: ModelConfig, mut init: impl FnMut(&str, &[usize]) -> Vec<f32>) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .manifest()
            .into_iter()
            .map(|(name, shape)| {
                let data = init(&name, &shape);
                (name, Tensor { shape, data })
            })
            .collect();
        Ok(ModelWeights { config, tensors })
    }

    /// All-zero weights with identity batch norm (gamma 1, var 1). Every
    /// predicted mask value is exactly 0.5.
    pub fn zero(config: ModelConfig) -> Result<Self> {
        Self::with_init(config, |name, shape| {
            let n = shape.iter().product();
            let v = if name.ends_with(".bn_gamma") || name.ends_with(".bn_var") {
                1.0
            } else {
                0.0
            };
            vec![v; n]
        })
    }

    /// Deterministic pseudo-random weights drawn in manifest order.
    ///
    /// Weights and biases are uniform in `+-1/sqrt(fan_in)`; batch norm gets
    /// gamma in [1, 1.1), beta and mean in [-0.05, 0.05), var in [1, 1.5).
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = FixtureRng::new(seed);
        let fan_in: BTreeMap<String, usize> = config
            .manifest()
            .into_iter()
            .filter(|(n, _)| n.ends_with(".kernel") || n.ends_with(".W") || n.starts_with("lstm."))
            .map(|(n, s)| {
                let f = if n.ends_with(".kernel") {
                    s[1] * s[2] * s[3]
                } else if n.starts_with("lstm.") {
                    config.lstm_hidden
                } else {
                    s[1]
                };
                (n.rsplit_once('.').unwrap().0.to_string(), f)
            })
            .collect();
        Self::with_init(config, |name, shape| {
            let n: usize = shape.iter().product();
            let (layer, param) = name.rsplit_once('.').unwrap();
            let (lo, hi) = match param {
                "bn_gamma" => (1.0, 1.1),
                "bn_beta" | "bn_mean" => (-0.05, 0.05),
                "bn_var" => (1.0, 1.5),
                _ => {
                    let a = 1.0 / (fan_in[layer] as f64).sqrt();
                    (-a, a)
                }
            };
            (0..n).map(|_| rng.uniform(lo, hi) as f32).collect()
        })
    }
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "RVW1",
        offset: offset as u64,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| fmt_err(self.bytes.len(), format!("truncated reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelWeights> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4, "magic")? != RVW1_MAGIC {
        return Err(fmt_err(0, "bad magic"));
    }
    let version = cur.u32("version")?;
    if version != RVW1_VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let meta_len = cur.u32("metadata length")? as usize;
    let meta_at = cur.pos;
    let meta = std::str::from_utf8(cur.take(meta_len, "metadata")?)
        .map_err(|_| fmt_err(meta_at, "metadata is not UTF-8"))?;
    let config = ModelConfig::from_metadata(meta, meta_at)?;
    let count = cur.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let at = cur.pos;
        let name_len = cur.u16("tensor name length")? as usize;
        if name_len == 0 {
            return Err(fmt_err(at, format!("tensor {i} has an empty name")));
        }
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| fmt_err(at + 2, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = cur.u8("ndim")? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = cur
            .take(n * 4, "tensor data")
            .map_err(|_| Error::model(&name, format!("truncated data at byte {}", cur.pos)))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(Error::model(name, "duplicate tensor"));
        }
    }
    if cur.pos != bytes.len() {
        return Err(fmt_err(
            cur.pos,
            format!("{} trailing bytes after {count} tensors", bytes.len() - cur.pos),
        ));
    }
    let weights = ModelWeights { config, tensors };
    weights.validate()?;
    Ok(weights)
}

pub fn encode_model(weights: &ModelWeights) -> Result<Vec<u8>> {
    if let Some(name) = weights.tensors.keys().find(|k| k.is_empty()) {
        return Err(Error::model(name.clone(), "empty tensor name"));
    }
    weights.validate()?;
    let meta = weights.config.to_metadata();
    let mut out = Vec::new();
    out.extend_from_slice(RVW1_MAGIC);
    out.extend_from_slice(&RVW1_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let manifest = weights.config.manifest();
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for (name, _) in &manifest {
        let t = &weights.tensors[name];
        let name_len = u16::try_from(name.len()).map_err(|_| Error::model(name, "name too long"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for d in &t.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelWeights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

pub fn save_model(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_model(weights)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
