//! Minimal RIFF/WAVE reader and writer.
//!
//! Reading accepts 16-bit integer PCM (format 1) and 32-bit IEEE float
//! (format 3), any channel count; channels are averaged to mono. Unknown
//! chunks are skipped. The writers exist mainly to produce fixtures and
//! synthetic clips.

use std::path::Path;

use crate::{AudioError, Result};

/// Mono audio in `[-1, 1]`-ish floats plus its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(AudioError::Ingestion(format!(
                "truncated file: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Format {
    code: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Reads a WAV file into a mono clip, averaging channels.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != b"RIFF" {
        return Err(AudioError::Ingestion("missing RIFF header".into()));
    }
    cur.u32()?;
    if cur.take(4)? != b"WAVE" {
        return Err(AudioError::Ingestion("missing WAVE form type".into()));
    }

    let mut format: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    while cur.pos + 8 <= bytes.len() {
        let id: [u8; 4] = cur.take(4)?.try_into().unwrap();
        let size = cur.u32()? as usize;
        let body = cur.take(size)?;
        if size % 2 == 1 && cur.pos < bytes.len() {
            cur.pos += 1; // chunk bodies are word-aligned
        }
        match &id {
            b"fmt " => {
                let mut f = Cursor {
                    bytes: body,
                    pos: 0,
                };
                let code = f.u16()?;
                let channels = f.u16()?;
                let sample_rate = f.u32()?;
                f.u32()?; // byte rate
                f.u16()?; // block align
                let bits = f.u16()?;
                format = Some(Format {
                    code,
                    channels,
                    sample_rate,
                    bits,
                });
            }
            b"data" => data = Some(body),
            _ => {}
        }
    }

    let fmt = format.ok_or_else(|| AudioError::Ingestion("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| AudioError::Ingestion("no data chunk".into()))?;
    if fmt.channels == 0 {
        return Err(AudioError::Ingestion("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (fmt.code, fmt.bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => {
            let v: Vec<f64> = data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            if v.iter().any(|s| !s.is_finite()) {
                return Err(AudioError::Ingestion("non-finite float samples".into()));
            }
            v
        }
        (code, bits) => {
            return Err(AudioError::Ingestion(format!(
                "unsupported codec: format {code}, {bits}-bit"
            )))
        }
    };

    let ch = fmt.channels as usize;
    let n = interleaved.len() / ch;
    if n == 0 {
        return Err(AudioError::Ingestion("zero-length audio data".into()));
    }
    let samples = if ch == 1 {
        interleaved
    } else {
        (0..n)
            .map(|i| interleaved[i * ch..(i + 1) * ch].iter().sum::<f64>() / ch as f64)
            .collect()
    };
    Ok(AudioClip {
        samples,
        sample_rate: fmt.sample_rate,
    })
}

fn write_wav(path: &Path, sample_rate: u32, channels: u16, bits: u16, code: u16, payload: &[u8]) -> Result<()> {
    let block_align = channels * bits / 8;
    let byte_rate = sample_rate * block_align as u32;
    let mut out = Vec::with_capacity(44 + payload.len());
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + payload.len() as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&code.to_le_bytes());
    out.extend_from_slice(&channels.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&block_align.to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    std::fs::write(path, out)?;
    Ok(())
}

fn to_i16(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

/// Writes mono 16-bit PCM.
pub fn write_wav_pcm16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let payload: Vec<u8> = samples
        .iter()
        .flat_map(|&v| to_i16(v).to_le_bytes())
        .collect();
    write_wav(path, sample_rate, 1, 16, 1, &payload)
}

/// Writes stereo 16-bit PCM from separate channel buffers.
pub fn write_wav_pcm16_stereo(
    path: &Path,
    left: &[f64],
    right: &[f64],
    sample_rate: u32,
) -> Result<()> {
    if left.len() != right.len() {
        return Err(AudioError::Frontend("channel length mismatch".into()));
    }
    let payload: Vec<u8> = left
        .iter()
        .zip(right)
        .flat_map(|(&l, &r)| {
            let mut b = [0u8; 4];
            b[..2].copy_from_slice(&to_i16(l).to_le_bytes());
            b[2..].copy_from_slice(&to_i16(r).to_le_bytes());
            b
        })
        .collect();
    write_wav(path, sample_rate, 2, 16, 1, &payload)
}

/// Writes mono 32-bit IEEE float.
pub fn write_wav_float32(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let payload: Vec<u8> = samples
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    write_wav(path, sample_rate, 1, 32, 3, &payload)
}
