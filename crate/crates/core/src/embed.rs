//! Lip-movement embedding providers.
//!
//! The visual encoder itself is external; embeddings arrive either from an
//! RVE1 file produced offline or from a closed-form synthetic generator used
//! as a deterministic test double.
//!
//! RVE1 layout (all little endian): magic `RVE1`, u32 version (1), u32 fps,
//! u32 N, u32 D, then N*D float32 values row major.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const RVE1_MAGIC: &[u8; 4] = b"RVE1";
pub const RVE1_VERSION: u32 = 1;
pub const DEFAULT_EMBED_DIM: usize = 512;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbeddingSequence {
    data: Vec<f32>,
    dim: usize,
    pub fps: u32,
    pub source_id: String,
}

impl VisualEmbeddingSequence {
    pub fn new(data: Vec<f32>, dim: usize, fps: u32, source_id: impl Into<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "{} values is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        if fps != crate::VIDEO_FPS {
            return Err(Error::invalid(format!("embedding fps {fps}, expected 25")));
        }
        Ok(VisualEmbeddingSequence {
            data,
            dim,
            fps,
            source_id: source_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn frames(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    File,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingProviderDescriptor {
    pub kind: ProviderKind,
    pub dim: usize,
    pub receptive_field: usize,
    pub lookahead: usize,
}

impl EmbeddingProviderDescriptor {
    pub fn new(kind: ProviderKind, dim: usize, lookahead: usize) -> Self {
        EmbeddingProviderDescriptor {
            kind,
            dim,
            receptive_field: 2 * lookahead + 1,
            lookahead,
        }
    }
}

/// Source of per-video-frame embeddings.
pub trait EmbeddingProvider: Send {
    fn descriptor(&self) -> EmbeddingProviderDescriptor;

    /// Embedding for video frame `index`, or `None` past the end of the
    /// source.
    fn embedding(&self, index: usize) -> Option<Vec<f32>>;
}

/// Provider backed by a loaded sequence.
#[derive(Debug, Clone)]
pub struct FileProvider {
    seq: VisualEmbeddingSequence,
}

impl FileProvider {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Ok(FileProvider {
            seq: load_embedding_file(path)?,
        })
    }

    pub fn from_sequence(seq: VisualEmbeddingSequence) -> Self {
        FileProvider { seq }
    }

    pub fn sequence(&self) -> &VisualEmbeddingSequence {
        &self.seq
    }
}

impl EmbeddingProvider for FileProvider {
    fn descriptor(&self) -> EmbeddingProviderDescriptor {
        EmbeddingProviderDescriptor::new(ProviderKind::File, self.seq.dim(), 2)
    }

    fn embedding(&self, index: usize) -> Option<Vec<f32>> {
        (index < self.seq.len()).then(|| self.seq.frame(index).to_vec())
    }
}

/// Unbounded closed-form provider.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticProvider {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingProvider for SyntheticProvider {
    fn descriptor(&self) -> EmbeddingProviderDescriptor {
        EmbeddingProviderDescriptor::new(ProviderKind::Synthetic, self.dim, 2)
    }

    fn embedding(&self, index: usize) -> Option<Vec<f32>> {
        Some(
            (0..self.dim)
                .map(|j| synthetic_value(index, j, self.seed))
                .collect(),
        )
    }
}

/// `sin(0.1 * (i + 1) * (j + 1) + seed)` rounded to f32.
pub fn synthetic_value(i: usize, j: usize, seed: u64) -> f32 {
    (0.1 * (i as f64 + 1.0) * (j as f64 + 1.0) + seed as f64).sin() as f32
}

pub fn synthetic_embeddings(n_frames: usize, dim: usize, seed: u64) -> Result<VisualEmbeddingSequence> {
    if dim == 0 {
        return Err(Error::invalid("embedding dimension must be at least 1"));
    }
    let mut data = Vec::with_capacity(n_frames * dim);
    for i in 0..n_frames {
        data.extend((0..dim).map(|j| synthetic_value(i, j, seed)));
    }
    VisualEmbeddingSequence::new(data, dim, crate::VIDEO_FPS, format!("synthetic:{seed}"))
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        what: "RVE1",
        offset: offset as u64,
        msg: msg.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, field: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| fmt_err(bytes.len(), format!("truncated header reading {field}")))
}

pub fn decode_embeddings(bytes: &[u8], source_id: &str) -> Result<VisualEmbeddingSequence> {
    match bytes.get(..4) {
        Some(m) if m == RVE1_MAGIC => {}
        Some(_) => return Err(fmt_err(0, "bad magic")),
        None => return Err(fmt_err(bytes.len(), "truncated magic")),
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != RVE1_VERSION {
        return Err(fmt_err(4, format!("unsupported version {version}")));
    }
    let fps = read_u32(bytes, 8, "fps")?;
    if fps != crate::VIDEO_FPS {
        return Err(fmt_err(8, format!("fps {fps}, expected 25")));
    }
    let n = read_u32(bytes, 12, "N")? as usize;
    let dim = read_u32(bytes, 16, "D")? as usize;
    if dim == 0 {
        return Err(fmt_err(16, "dimension is zero"));
    }
    let body = &bytes[HEADER_LEN..];
    let expected = n
        .checked_mul(dim)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| fmt_err(12, "N*D overflows"))?;
    if body.len() < expected {
        return Err(fmt_err(
            HEADER_LEN + body.len() - body.len() % 4,
            format!("truncated payload: {} of {expected} bytes", body.len()),
        ));
    }
    if body.len() > expected {
        return Err(fmt_err(HEADER_LEN + expected, "trailing bytes after payload"));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(fmt_err(HEADER_LEN + 4 * pos, "non-finite value"));
    }
    VisualEmbeddingSequence::new(data, dim, fps, source_id)
}

pub fn encode_embeddings(seq: &VisualEmbeddingSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.data.len());
    out.extend_from_slice(RVE1_MAGIC);
    for v in [RVE1_VERSION, seq.fps, seq.len() as u32, seq.dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &seq.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<VisualEmbeddingSequence> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, &path.display().to_string())
}

pub fn write_embedding_file(path: impl AsRef<Path>, seq: &VisualEmbeddingSequence) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_embeddings(seq))
        .map_err(|e| Error::io(path, e))
}
