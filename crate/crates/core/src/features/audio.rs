//! WAV ingestion, mono down-mix and band-limited resampling to 16 kHz.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    /// Wraps 16 kHz samples, rejecting non-finite values and clamping to [-1, 1].
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples: samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect(),
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decoded interleaved PCM before down-mixing.
#[derive(Clone, Debug)]
pub struct PcmAudio {
    pub sample_rate: u32,
    pub channels: u16,
    pub interleaved: Vec<f32>,
}

pub fn load_audio(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let pcm = decode_wav(&bytes).map_err(|msg| Error::Decode {
        path: path.to_path_buf(),
        msg,
    })?;
    if pcm.interleaved.is_empty() {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            msg: "zero-length audio".into(),
        });
    }
    let mono = downmix(&pcm.interleaved, pcm.channels as usize);
    let samples = resample(&mono, pcm.sample_rate, SAMPLE_RATE);
    Waveform::new(samples)
}

fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels == 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect()
}

/// Parses a RIFF/WAVE byte stream (integer PCM 8/16/24/32 bit or IEEE float).
pub fn decode_wav(bytes: &[u8]) -> std::result::Result<PcmAudio, String> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err("not a RIFF/WAVE file".into());
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = LittleEndian::read_u32(&bytes[pos + 4..pos + 8]) as usize;
        let body_start = pos + 8;
        let body_end = (body_start + size).min(bytes.len());
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err("truncated fmt chunk".into());
                }
                let mut tag = LittleEndian::read_u16(&body[0..2]);
                let channels = LittleEndian::read_u16(&body[2..4]);
                let rate = LittleEndian::read_u32(&body[4..8]);
                let bits = LittleEndian::read_u16(&body[14..16]);
                if tag == 0xFFFE && body.len() >= 26 {
                    // WAVE_FORMAT_EXTENSIBLE: sub-format GUID starts with the real tag
                    tag = LittleEndian::read_u16(&body[24..26]);
                }
                if channels == 0 || rate == 0 {
                    return Err("invalid channel count or sample rate".into());
                }
                fmt = Some((tag, channels, rate, bits));
            }
            b"data" => {
                let (tag, channels, rate, bits) = fmt.ok_or("data chunk before fmt chunk")?;
                let samples = decode_samples(body, tag, bits)?;
                return Ok(PcmAudio {
                    sample_rate: rate,
                    channels,
                    interleaved: samples,
                });
            }
            _ => {}
        }
        pos = body_start + size + (size & 1);
    }
    Err("no data chunk".into())
}

fn decode_samples(body: &[u8], tag: u16, bits: u16) -> std::result::Result<Vec<f32>, String> {
    let out = match (tag, bits) {
        (1, 8) => body.iter().map(|&b| (b as f32 - 128.0) / 128.0).collect(),
        (1, 16) => body
            .chunks_exact(2)
            .map(|c| LittleEndian::read_i16(c) as f32 / 32768.0)
            .collect(),
        (1, 24) => body
            .chunks_exact(3)
            .map(|c| LittleEndian::read_i24(c) as f32 / 8_388_608.0)
            .collect(),
        (1, 32) => body
            .chunks_exact(4)
            .map(|c| (LittleEndian::read_i32(c) as f64 / 2_147_483_648.0) as f32)
            .collect(),
        (3, 32) => body.chunks_exact(4).map(LittleEndian::read_f32).collect(),
        (3, 64) => body
            .chunks_exact(8)
            .map(|c| LittleEndian::read_f64(c) as f32)
            .collect(),
        _ => return Err(format!("unsupported WAV encoding (format {tag}, {bits} bit)")),
    };
    Ok(out)
}

/// Writes 16-bit PCM mono.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate: u32) -> Result<()> {
    let path = path.as_ref();
    let data_len = (samples.len() * 2) as u32;
    let mut buf = Vec::with_capacity(44 + data_len as usize);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_len).to_le_bytes());
    buf.extend_from_slice(b"WAVEfmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes());
    buf.extend_from_slice(&sample_rate.to_le_bytes());
    buf.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    buf.extend_from_slice(&2u16.to_le_bytes());
    buf.extend_from_slice(&16u16.to_le_bytes());
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

const SINC_HALF_WIDTH: usize = 32;

/// Windowed-sinc resampler. Equal rates return the input untouched.
pub fn resample(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let out_len = ((input.len() as u64 * to as u64 + from as u64 - 1) / from as u64) as usize;
    // low-pass at the lower Nyquist when decimating
    let cutoff = ratio.min(1.0) * 0.97;
    let half = (SINC_HALF_WIDTH as f64 / cutoff).ceil() as isize;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let center = n as f64 / ratio;
        let base = center.floor() as isize;
        let mut acc = 0.0f64;
        let mut norm = 0.0f64;
        for k in (base - half + 1)..=(base + half) {
            let x = center - k as f64;
            let w = cutoff * sinc(cutoff * x) * blackman(x / (half as f64));
            norm += w;
            if k >= 0 && (k as usize) < input.len() {
                acc += w * input[k as usize] as f64;
            }
        }
        // unit DC gain
        out.push(if norm.abs() > 1e-12 { (acc / norm) as f32 } else { 0.0 });
    }
    out
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on `[-1, 1]`.
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let t = (u + 1.0) / 2.0;
    0.42 - 0.5 * (2.0 * PI * t).cos() + 0.08 * (4.0 * PI * t).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes_16(samples: &[i16], channels: u16, rate: u32) -> Vec<u8> {
        let data_len = (samples.len() * 2) as u32;
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + data_len).to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&channels.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        b.extend_from_slice(&(2 * channels).to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&data_len.to_le_bytes());
        for s in samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    #[test]
    fn stereo_48k_second_becomes_16000_mono_samples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let frames = 48_000;
        let samples: Vec<i16> = (0..frames)
            .flat_map(|i| {
                let v = ((i as f64 * 2.0 * PI * 440.0 / 48_000.0).sin() * 8000.0) as i16;
                [v, v]
            })
            .collect();
        fs::write(&path, wav_bytes_16(&samples, 2, 48_000)).unwrap();
        let w = load_audio(&path).unwrap();
        assert_eq!(w.sample_rate, 16_000);
        assert_eq!(w.len(), 16_000);
        // a 440 Hz tone survives decimation with its amplitude
        let peak = w.samples[1000..15000].iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!((peak - 8000.0 / 32768.0).abs() < 0.01, "peak {peak}");
    }

    #[test]
    fn native_rate_mono_passes_through_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.wav");
        let samples: Vec<i16> = (0..4000).map(|i| ((i * 37) % 2000) as i16 - 1000).collect();
        fs::write(&path, wav_bytes_16(&samples, 1, 16_000)).unwrap();
        let w = load_audio(&path).unwrap();
        let expected: Vec<f32> = samples.iter().map(|&s| s as f32 / 32768.0).collect();
        assert_eq!(w.samples, expected);
    }

    #[test]
    fn silent_file_decodes_to_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.wav");
        fs::write(&path, wav_bytes_16(&vec![0; 1600], 1, 16_000)).unwrap();
        let w = load_audio(&path).unwrap();
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn empty_and_missing_files_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.wav");
        fs::write(&path, wav_bytes_16(&[], 1, 16_000)).unwrap();
        assert!(matches!(load_audio(&path), Err(Error::Decode { .. })));
        let missing = dir.path().join("nope.wav");
        let err = load_audio(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.wav"));
    }

    #[test]
    fn write_then_read_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.wav");
        let samples: Vec<f32> = (0..800).map(|i| (i as f32 * 0.01).sin() * 0.5).collect();
        write_wav(&path, &samples, 16_000).unwrap();
        let back = load_audio(&path).unwrap();
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
