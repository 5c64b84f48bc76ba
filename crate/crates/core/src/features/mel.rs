//! STFT magnitude, Slaney-style mel filterbank and log compression.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::audio::Waveform;
use super::FeatureConfig;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// `T x mel_bins` log mel magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor,
    pub hop_ms: f32,
}

impl MelSpectrogram {
    pub fn new(values: Tensor, hop_ms: f32) -> Result<Self> {
        if values.rows() == 0 {
            return Err(Error::InvalidInput("mel spectrogram with zero frames".into()));
        }
        Ok(Self { values, hop_ms })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        self.values.cols()
    }
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Edge frequencies of the `n_mels` triangles: `n_mels + 2` points.
pub fn mel_band_edges(cfg: &FeatureConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin_hz as f64);
    let hi = hz_to_mel(cfg.fmax_hz as f64);
    let n = cfg.mel_bins + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Area-normalized triangular filters, `mel_bins x (fft_size / 2 + 1)`.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Tensor {
    let edges = mel_band_edges(cfg);
    let n_freqs = cfg.fft_size / 2 + 1;
    let sr = cfg.sample_rate as f64;
    Tensor::from_fn(cfg.mel_bins, n_freqs, |m, k| {
        let f = k as f64 * sr / cfg.fft_size as f64;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let lower = (f - l) / (c - l);
        let upper = (r - f) / (r - c);
        let w = lower.min(upper).max(0.0);
        (w * 2.0 / (r - l)) as f32
    })
}

/// Short-time Fourier analysis with reflect center padding.
pub struct Stft {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    n_fft: usize,
    hop: usize,
}

impl Stft {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let mut planner = FftPlanner::new();
        let n_fft = cfg.fft_size;
        Self {
            fft: planner.plan_fft_forward(n_fft),
            window: padded_hann(cfg.frame_len(), n_fft),
            n_fft,
            hop: cfg.hop_len(),
        }
    }

    /// Frame count for a signal of `len` samples: `ceil(len / hop)`.
    pub fn frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// `T x (n_fft/2 + 1)` magnitudes.
    pub fn magnitudes(&self, samples: &[f32]) -> Tensor {
        let padded = reflect_pad(samples, self.n_fft / 2);
        let frames = self.frames(samples.len());
        let bins = self.n_fft / 2 + 1;
        let mut out = Tensor::zeros(frames, bins);
        let mut buf = vec![Complex::new(0.0f32, 0.0); self.n_fft];
        for t in 0..frames {
            let start = t * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = padded.get(start + i).copied().unwrap_or(0.0);
                *slot = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (o, c) in out.row_mut(t).iter_mut().zip(&buf[..bins]) {
                *o = c.norm();
            }
        }
        out
    }

    pub fn window(&self) -> &[f32] {
        &self.window
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }
}

/// Periodic Hann of `frame` samples centered in `n_fft` zeros.
pub fn padded_hann(frame: usize, n_fft: usize) -> Vec<f32> {
    let offset = (n_fft - frame) / 2;
    let mut w = vec![0.0f32; n_fft];
    for i in 0..frame {
        w[offset + i] = (0.5 - 0.5 * (2.0 * PI * i as f64 / frame as f64).cos()) as f32;
    }
    w
}

pub(crate) fn reflect_pad(x: &[f32], pad: usize) -> Vec<f32> {
    let n = x.len();
    let reflect = |i: isize| -> f32 {
        if n == 1 {
            return x[0];
        }
        let period = 2 * (n as isize - 1);
        let mut j = i.rem_euclid(period);
        if j >= n as isize {
            j = period - j;
        }
        x[j as usize]
    };
    (0..n + 2 * pad)
        .map(|i| reflect(i as isize - pad as isize))
        .collect()
}

/// Reusable mel front end (FFT plan + filterbank).
pub struct MelExtractor {
    cfg: FeatureConfig,
    stft: Stft,
    filterbank: Tensor,
}

impl MelExtractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            stft: Stft::new(cfg),
            filterbank: mel_filterbank(cfg).transpose(),
        })
    }

    pub fn extract(&self, wave: &Waveform) -> Result<MelSpectrogram> {
        if wave.sample_rate != self.cfg.sample_rate {
            return Err(Error::InvalidInput(format!(
                "expected {} Hz audio, got {} Hz",
                self.cfg.sample_rate, wave.sample_rate
            )));
        }
        if wave.len() < self.cfg.frame_len() {
            return Err(Error::InvalidInput(format!(
                "waveform of {} samples is shorter than one {}-sample frame",
                wave.len(),
                self.cfg.frame_len()
            )));
        }
        let mags = self.stft.magnitudes(&wave.samples);
        let mel = mags.matmul(&self.filterbank)?;
        let floor = self.cfg.magnitude_floor;
        MelSpectrogram::new(mel.map(|v| v.max(floor).ln()), self.cfg.hop_ms)
    }

    /// Log mel of precomputed linear magnitudes.
    pub fn from_magnitudes(&self, mags: &Tensor) -> Result<Tensor> {
        let floor = self.cfg.magnitude_floor;
        Ok(mags.matmul(&self.filterbank)?.map(|v| v.max(floor).ln()))
    }
}

pub fn mel_spectrogram(wave: &Waveform, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(cfg)?.extract(wave)
}
