//! Raw PCM stream framing: each chunk is a u32 LE byte length followed by
//! that many bytes of 16-bit signed LE mono samples. A zero-length chunk (or
//! clean EOF at a chunk boundary) ends the stream.

use std::io::{self, Read, Write};

use crate::wav::to_pcm16;

pub struct PcmChunkReader<R> {
    inner: R,
}

impl<R: Read> PcmChunkReader<R> {
    pub fn new(inner: R) -> Self {
        PcmChunkReader { inner }
    }

    /// Next chunk as samples in [-1, 1), or `None` at end of stream.
    pub fn next_chunk(&mut self) -> io::Result<Option<Vec<f64>>> {
        let mut len = [0u8; 4];
        match self.inner.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let len = u32::from_le_bytes(len) as usize;
        if len == 0 {
            return Ok(None);
        }
        if len % 2 != 0 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("odd PCM chunk length {len}"),
            ));
        }
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf)?;
        Ok(Some(
            buf.chunks_exact(2)
                .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
                .collect(),
        ))
    }
}

impl<R: Read> Iterator for PcmChunkReader<R> {
    type Item = io::Result<Vec<f64>>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_chunk().transpose()
    }
}

pub fn write_chunk<W: Write>(out: &mut W, samples: &[f64]) -> io::Result<()> {
    out.write_all(&((samples.len() * 2) as u32).to_le_bytes())?;
    let bytes: Vec<u8> = samples
        .iter()
        .flat_map(|s| to_pcm16(*s).to_le_bytes())
        .collect();
    out.write_all(&bytes)
}

pub fn write_end<W: Write>(out: &mut W) -> io::Result<()> {
    out.write_all(&0u32.to_le_bytes())
}
