//! RIFF/WAVE PCM reader and 16-bit mono writer.

use std::io::{Read, Write};

use crate::error::{AmtError, Result};
use crate::synth::AudioBuffer;

const FORMAT_PCM: u16 = 1;
const FORMAT_EXTENSIBLE: u16 = 0xfffe;

/// Writes 16-bit mono PCM with a 44-byte header. Samples are clamped to [-1, 1].
pub fn write_wav<W: Write>(buffer: &AudioBuffer, mut sink: W) -> Result<()> {
    let data_len = (buffer.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&buffer.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(buffer.sample_rate_hz * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &buffer.samples {
        let q = (s.clamp(-1.0, 1.0) as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    sink.write_all(&out)?;
    Ok(())
}

/// Reads a mono integer-PCM WAV (8, 16, 24 or 32 bit) into [-1, 1) samples.
pub fn read_wav<R: Read>(mut source: R) -> Result<AudioBuffer> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<AudioBuffer> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AmtError::Format("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| AmtError::Format(format!("truncated {:?} chunk", String::from_utf8_lossy(id))))?;
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(AmtError::Format("fmt chunk too short".into()));
                }
                let u16_at = |i: usize| u16::from_le_bytes([body[i], body[i + 1]]);
                let mut tag = u16_at(0);
                if tag == FORMAT_EXTENSIBLE && body.len() >= 26 {
                    tag = u16_at(24);
                }
                let channels = u16_at(2);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16_at(14);
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    fmt.ok_or_else(|| AmtError::Format("data chunk before fmt chunk".into()))?;
                if tag != FORMAT_PCM {
                    return Err(AmtError::UnsupportedFormat(format!("WAV format tag {tag:#06x}")));
                }
                if channels != 1 {
                    return Err(AmtError::UnsupportedFormat(format!("{channels} channels (mono only)")));
                }
                let samples = decode_pcm(body, bits)?;
                return AudioBuffer::new(rate, samples);
            }
            _ => {}
        }
        // chunks are padded to even length
        pos = body_end + (len & 1);
    }
    Err(AmtError::Format("no data chunk".into()))
}

fn decode_pcm(data: &[u8], bits: u16) -> Result<Vec<f32>> {
    Ok(match bits {
        8 => data.iter().map(|&b| (b as f32 - 128.0) / 128.0).collect(),
        16 => data
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
            .collect(),
        24 => data
            .chunks_exact(3)
            .map(|c| (i32::from_le_bytes([0, c[0], c[1], c[2]]) >> 8) as f32 / 8_388_608.0)
            .collect(),
        32 => data
            .chunks_exact(4)
            .map(|c| (i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64 / 2_147_483_648.0) as f32)
            .collect(),
        other => return Err(AmtError::UnsupportedFormat(format!("{other}-bit PCM"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silent_file_layout() {
        let buf = AudioBuffer::new(16000, vec![0.0; 16]).unwrap();
        let mut out = Vec::new();
        write_wav(&buf, &mut out).unwrap();
        assert_eq!(out.len(), 44 + 32);
        assert!(out[44..].iter().all(|&b| b == 0));
        assert_eq!(&out[0..4], b"RIFF");
        assert_eq!(u32::from_le_bytes(out[4..8].try_into().unwrap()), 36 + 32);
    }

    #[test]
    fn sine_round_trip_within_quantization() {
        let samples: Vec<f32> = (0..4000)
            .map(|n| (2.0 * std::f64::consts::PI * 440.0 * n as f64 / 16000.0).sin() as f32)
            .chain([1.0, -1.0, 0.99999])
            .collect();
        let buf = AudioBuffer::new(16000, samples).unwrap();
        let mut out = Vec::new();
        write_wav(&buf, &mut out).unwrap();
        let back = read_wav(out.as_slice()).unwrap();
        assert_eq!(back.sample_rate_hz, 16000);
        let worst = buf
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 32768.0, "{worst}");
    }

    #[test]
    fn stereo_and_float_are_rejected() {
        let buf = AudioBuffer::new(8000, vec![0.1; 8]).unwrap();
        let mut out = Vec::new();
        write_wav(&buf, &mut out).unwrap();
        let mut stereo = out.clone();
        stereo[22] = 2;
        assert!(matches!(parse_wav(&stereo), Err(AmtError::UnsupportedFormat(_))));
        let mut float = out.clone();
        float[20] = 3;
        assert!(matches!(parse_wav(&float), Err(AmtError::UnsupportedFormat(_))));
        assert!(matches!(parse_wav(&out[..40]), Err(AmtError::Format(_))));
    }

    #[test]
    fn skips_unknown_chunks() {
        let buf = AudioBuffer::new(8000, vec![0.5, -0.5]).unwrap();
        let mut out = Vec::new();
        write_wav(&buf, &mut out).unwrap();
        let mut with_list = out[..36].to_vec();
        with_list.extend_from_slice(b"LIST");
        with_list.extend_from_slice(&3u32.to_le_bytes());
        with_list.extend_from_slice(&[1, 2, 3, 0]);
        with_list.extend_from_slice(&out[36..]);
        assert_eq!(parse_wav(&with_list).unwrap().samples, vec![0.5, -0.5]);
    }
}
