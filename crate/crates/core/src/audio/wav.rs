//! Minimal RIFF/WAVE reader and PCM16 writer.

use std::fs;
use std::path::Path;

use super::WaveClip;
use crate::error::{Error, Result};

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::WavParse {
                offset: self.pos as u64,
                detail: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Format {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<WaveClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_wav(&bytes)
}

/// Decodes PCM16 or float32 WAV bytes, keeping only the first channel.
pub fn parse_wav(bytes: &[u8]) -> Result<WaveClip> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "RIFF tag")?;
    if magic != b"RIFF" {
        return Err(Error::WavParse {
            offset: 0,
            detail: "missing RIFF tag".into(),
        });
    }
    cur.u32("RIFF size")?;
    let wave_at = cur.pos;
    if cur.take(4, "WAVE tag")? != b"WAVE" {
        return Err(Error::WavParse {
            offset: wave_at as u64,
            detail: "missing WAVE tag".into(),
        });
    }

    let mut format: Option<Format> = None;
    loop {
        let chunk_at = cur.pos;
        let id = cur.take(4, "chunk id")?;
        let size = cur.u32("chunk size")? as usize;
        match id {
            b"fmt " => {
                let body_at = cur.pos;
                let body = cur.take(size, "fmt chunk")?;
                if size < 16 {
                    return Err(Error::WavParse {
                        offset: body_at as u64,
                        detail: format!("fmt chunk too small ({size} bytes)"),
                    });
                }
                let rd16 = |o: usize| u16::from_le_bytes([body[o], body[o + 1]]);
                let rd32 =
                    |o: usize| u32::from_le_bytes([body[o], body[o + 1], body[o + 2], body[o + 3]]);
                let mut tag = rd16(0);
                if tag == FORMAT_EXTENSIBLE {
                    if size < 26 {
                        return Err(Error::WavParse {
                            offset: body_at as u64,
                            detail: "extensible fmt chunk without sub-format".into(),
                        });
                    }
                    tag = rd16(24);
                }
                format = Some(Format {
                    tag,
                    channels: rd16(2),
                    sample_rate: rd32(4),
                    bits: rd16(14),
                });
            }
            b"data" => {
                let fmt = format.ok_or_else(|| Error::WavParse {
                    offset: chunk_at as u64,
                    detail: "data chunk before fmt chunk".into(),
                })?;
                let data_at = cur.pos;
                let data = cur.take(size, "data chunk")?;
                return decode(&fmt, data, data_at);
            }
            _ => {
                cur.take(size + (size & 1), "chunk body")?;
            }
        }
        if size & 1 == 1 && id == b"fmt " {
            cur.take(1, "pad byte")?;
        }
    }
}

fn decode(fmt: &Format, data: &[u8], data_at: usize) -> Result<WaveClip> {
    if fmt.channels == 0 {
        return Err(Error::WavParse {
            offset: data_at as u64,
            detail: "zero channels".into(),
        });
    }
    if fmt.sample_rate == 0 {
        return Err(Error::WavParse {
            offset: data_at as u64,
            detail: "zero sample rate".into(),
        });
    }
    let (bytes_per_sample, read): (usize, fn(&[u8]) -> f64) = match (fmt.tag, fmt.bits) {
        (FORMAT_PCM, 16) => (2, |b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0),
        (FORMAT_FLOAT, 32) => (4, |b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64),
        (tag, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "format tag {tag} with {bits} bits per sample (only PCM16 and float32 are read)"
            )))
        }
    };
    let frame = bytes_per_sample * fmt.channels as usize;
    let frames = data.len() / frame;
    let samples: Vec<f64> = (0..frames)
        .map(|i| read(&data[i * frame..i * frame + bytes_per_sample]))
        .collect();
    WaveClip::new(samples, fmt.sample_rate)
}

/// Writes mono 16-bit PCM; samples are clamped to [-1, 1].
pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &WaveClip) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pcm16(clip)).map_err(|e| Error::io(path, e))
}

pub fn encode_pcm16(clip: &WaveClip) -> Vec<u8> {
    let n = clip.samples().len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&clip.sample_rate_hz().to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz() * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in clip.samples() {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(tag: u16, channels: u16, rate: u32, bits: u16, data: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data.len() as u32).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        let align = channels * bits / 8;
        out.extend_from_slice(&(rate * align as u32).to_le_bytes());
        out.extend_from_slice(&align.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&(data.len() as u32).to_le_bytes());
        out.extend_from_slice(data);
        out
    }

    #[test]
    fn silence_decodes_to_zeros() {
        let bytes = header(1, 1, 16000, 16, &vec![0u8; 32000]);
        let clip = parse_wav(&bytes).unwrap();
        assert_eq!(clip.sample_rate_hz(), 16000);
        assert_eq!(clip.samples().len(), 16000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn pcm16_full_scale() {
        let bytes = header(1, 1, 8000, 16, &32767i16.to_le_bytes());
        let clip = parse_wav(&bytes).unwrap();
        assert_eq!(clip.samples()[0], 32767.0 / 32768.0);
    }

    #[test]
    fn float32_decodes() {
        let mut data = Vec::new();
        for v in [0.25f32, -0.5] {
            data.extend_from_slice(&v.to_le_bytes());
        }
        let clip = parse_wav(&header(3, 1, 16000, 32, &data)).unwrap();
        assert_eq!(clip.samples(), &[0.25, -0.5]);
    }

    #[test]
    fn bad_magic_reports_offset() {
        let mut bytes = header(1, 1, 16000, 16, &[0, 0]);
        bytes[8..12].copy_from_slice(b"AVI ");
        match parse_wav(&bytes) {
            Err(Error::WavParse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("unexpected {other:?}"),
        }
        match parse_wav(&bytes[..6]) {
            Err(Error::WavParse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unsupported_encodings_are_explicit() {
        let bytes = header(1, 1, 16000, 24, &[0u8; 6]);
        assert!(matches!(
            parse_wav(&bytes),
            Err(Error::UnsupportedFormat(_))
        ));
        let bytes = header(6, 1, 8000, 8, &[0u8; 4]);
        assert!(matches!(
            parse_wav(&bytes),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn pcm16_write_read() {
        let clip = WaveClip::new(vec![0.0, 0.5, -0.5, 1.0, -1.0], 16000).unwrap();
        let back = parse_wav(&encode_pcm16(&clip)).unwrap();
        for (a, b) in clip.samples().iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32767.0);
        }
    }
}
