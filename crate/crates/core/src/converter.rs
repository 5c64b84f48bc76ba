//! Conversion by swapping representations between utterances, single-factor
//! ablation, and a Griffin-Lim preview vocoder.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::checkpoint::LoadedModel;
use crate::error::{Error, Result};
use crate::features::{interpolate_rows, mel_filterbank, padded_hann, quantize_pitch, FeatureConfig, MelSpectrogram, OneHotPitch, UtteranceRecord};
use crate::model::{assemble_bundle, Factor, RepresentationBundle};
use crate::nn::Tensor;

/// Source plus optional per-factor targets. Content always comes from the
/// source.
#[derive(Clone, Debug)]
pub struct ConversionRequest {
    pub source: UtteranceRecord,
    pub rhythm_target: Option<UtteranceRecord>,
    pub pitch_target: Option<UtteranceRecord>,
    pub timbre_target: Option<String>,
    /// Re-quantize the pitch target's F0 with the source speaker's
    /// statistics instead of using its own (keeps absolute register).
    pub pitch_absolute: bool,
}

impl ConversionRequest {
    pub fn reconstruction(source: UtteranceRecord) -> Self {
        Self {
            source,
            rhythm_target: None,
            pitch_target: None,
            timbre_target: None,
            pitch_absolute: false,
        }
    }

    pub fn conversion_type(&self) -> ConversionType {
        let mut set = BTreeSet::new();
        if self.rhythm_target.is_some() {
            set.insert(Factor::Rhythm);
        }
        if self.pitch_target.is_some() {
            set.insert(Factor::Pitch);
        }
        if self.timbre_target.is_some() {
            set.insert(Factor::Timbre);
        }
        ConversionType(set)
    }
}

/// Set of converted factors; empty means reconstruction.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ConversionType(pub BTreeSet<Factor>);

impl ConversionType {
    pub fn is_reconstruction(&self) -> bool {
        self.0.is_empty()
    }

    /// The seven nonempty subsets of {rhythm, pitch, timbre}.
    pub fn all() -> Vec<ConversionType> {
        let f = [Factor::Rhythm, Factor::Pitch, Factor::Timbre];
        (1u8..8)
            .map(|m| ConversionType((0..3).filter(|i| m >> i & 1 == 1).map(|i| f[i]).collect()))
            .collect()
    }
}

impl fmt::Display for ConversionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("reconstruction");
        }
        let names: Vec<String> = self.0.iter().map(Factor::to_string).collect();
        f.write_str(&names.join("+"))
    }
}

#[derive(Clone, Debug)]
pub struct Conversion {
    pub mel: MelSpectrogram,
    pub bundle: RepresentationBundle,
    pub conversion_type: ConversionType,
    pub timbre_speaker: String,
}

fn fit_code(code: Tensor, rows: usize) -> Tensor {
    interpolate_rows(&code, rows)
}

fn check_aligned(r: &UtteranceRecord) -> Result<()> {
    if r.onehot_pitch.frames() != r.frames() {
        return Err(Error::InvalidInput(format!(
            "utterance `{}` has {} pitch frames for {} mel frames",
            r.utterance_id,
            r.onehot_pitch.frames(),
            r.frames()
        )));
    }
    Ok(())
}

/// Bundle with every requested factor swapped in. Output timing follows the
/// rhythm provider; content and pitch codes of other lengths are linearly
/// interpolated to its code length.
pub fn conversion_bundle(req: &ConversionRequest, m: &LoadedModel) -> Result<(RepresentationBundle, String)> {
    let (model, store) = (&m.model, &m.store);
    check_aligned(&req.source)?;
    let rhythm_src = req.rhythm_target.as_ref().unwrap_or(&req.source);
    let frames = rhythm_src.frames();
    let code_rows = frames.div_ceil(model.config.downsample);

    let z_r = model.encode_rhythm(store, &rhythm_src.mel)?;
    let z_c = fit_code(model.encode_content(store, &req.source.mel)?, code_rows);
    let pitch: OneHotPitch = match &req.pitch_target {
        Some(p) => {
            check_aligned(p)?;
            if req.pitch_absolute {
                quantize_pitch(&p.f0, m.stats(&req.source.speaker_id)?)?
            } else {
                p.onehot_pitch.clone()
            }
        }
        None => req.source.onehot_pitch.clone(),
    };
    let z_f = fit_code(model.encode_pitch(store, &pitch)?, code_rows);
    let speaker = req.timbre_target.clone().unwrap_or_else(|| req.source.speaker_id.clone());
    let z_u = model.timbre(store, &speaker)?;
    let bundle = assemble_bundle(z_r, z_c, z_f, z_u, frames, model.config.downsample)?;
    Ok((bundle, speaker))
}

pub fn convert(req: &ConversionRequest, m: &LoadedModel) -> Result<Conversion> {
    let (bundle, timbre_speaker) = conversion_bundle(req, m)?;
    let mel = m.model.decode(&m.store, &bundle)?;
    Ok(Conversion {
        mel,
        bundle,
        conversion_type: req.conversion_type(),
        timbre_speaker,
    })
}

#[derive(Clone, Debug)]
pub struct AblationRequest {
    pub source: UtteranceRecord,
    pub removed: Factor,
}

/// Decodes the source bundle with the removed factor's channels zeroed.
pub fn ablate(req: &AblationRequest, m: &LoadedModel) -> Result<MelSpectrogram> {
    let (bundle, _) = conversion_bundle(&ConversionRequest::reconstruction(req.source.clone()), m)?;
    m.model.decode(&m.store, &bundle.zeroed(req.removed))
}

/// Mean per-frame L2 distance between two equal-shape spectrograms.
pub fn mean_frame_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let total: f64 = (0..a.rows())
        .map(|t| {
            a.row(t)
                .iter()
                .zip(b.row(t))
                .map(|(&x, &y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / a.rows() as f64)
}

/// Linear magnitudes whose mel projection approximates `exp(mel)`, by
/// multiplicative-update non-negative least squares.
pub fn mel_to_linear(mel: &MelSpectrogram, cfg: &FeatureConfig, iterations: usize) -> Result<Tensor> {
    let fb = mel_filterbank(cfg); // mel_bins x n_freqs
    if mel.bins() != fb.rows() {
        return Err(Error::shape("mel bins differ from the filterbank"));
    }
    let target = mel.values.map(f32::exp); // T x M
    let fbt = fb.transpose(); // F x M
    let gram = fbt.matmul(&fb)?; // F x F
    let numer = target.matmul(&fb)?; // T x F
    let mut x = Tensor::full(mel.frames(), fb.cols(), 1e-3);
    for _ in 0..iterations {
        let denom = x.matmul(&gram)?;
        for ((xv, &n), &d) in x.data_mut().iter_mut().zip(numer.data()).zip(denom.data()) {
            *xv *= n.max(0.0) / (d + 1e-9);
        }
    }
    Ok(x)
}

/// Griffin-Lim phase reconstruction of a `T x (n_fft/2+1)` magnitude.
pub fn griffin_lim(mags: &Tensor, cfg: &FeatureConfig, iterations: usize, seed: u64) -> Result<Vec<f32>> {
    let n_fft = cfg.fft_size;
    let hop = cfg.hop_len();
    let bins = n_fft / 2 + 1;
    if mags.cols() != bins {
        return Err(Error::shape(format!("expected {bins} frequency bins, got {}", mags.cols())));
    }
    let frames = mags.rows();
    let window = padded_hann(cfg.frame_len(), n_fft);
    let mut planner = FftPlanner::<f32>::new();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_fft);
    let len = frames * hop;
    let pad = n_fft / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec: Vec<Vec<Complex<f32>>> = (0..frames)
        .map(|t| {
            (0..bins)
                .map(|k| Complex::from_polar(mags.get(t, k), (rng.random::<f64>() * 2.0 * PI) as f32))
                .collect()
        })
        .collect();
    let mut wsum = vec![0.0f32; len + 2 * pad];
    for t in 0..frames {
        for (i, &w) in window.iter().enumerate() {
            wsum[t * hop + i] += w * w;
        }
    }
    let istft = |spec: &[Vec<Complex<f32>>]| -> Vec<f32> {
        let mut acc = vec![0.0f32; len + 2 * pad];
        let mut buf = vec![Complex::new(0.0f32, 0.0); n_fft];
        for (t, s) in spec.iter().enumerate() {
            buf[..bins].copy_from_slice(s);
            for k in bins..n_fft {
                buf[k] = buf[n_fft - k].conj();
            }
            inv.process(&mut buf);
            for (i, c) in buf.iter().enumerate() {
                acc[t * hop + i] += c.re / n_fft as f32 * window[i];
            }
        }
        acc.iter()
            .zip(&wsum)
            .skip(pad)
            .take(len)
            .map(|(&a, &w)| if w > 1e-8 { a / w } else { 0.0 })
            .collect()
    };
    let mut signal = istft(&spec);
    for _ in 0..iterations {
        let padded: Vec<f32> = std::iter::repeat_n(0.0, pad)
            .chain(signal.iter().copied())
            .chain(std::iter::repeat_n(0.0, pad + n_fft))
            .collect();
        let mut buf = vec![Complex::new(0.0f32, 0.0); n_fft];
        for (t, s) in spec.iter_mut().enumerate() {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(padded[t * hop + i] * window[i], 0.0);
            }
            fwd.process(&mut buf);
            for (k, c) in s.iter_mut().enumerate() {
                let n = buf[k].norm();
                let phase = if n > 1e-12 { buf[k] / n } else { Complex::new(1.0, 0.0) };
                *c = phase * mags.get(t, k);
            }
        }
        signal = istft(&spec);
    }
    let peak = signal.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 0.99 {
        signal.iter_mut().for_each(|v| *v *= 0.99 / peak);
    }
    Ok(signal)
}

/// Audible preview: NNLS mel inversion, then 60 Griffin-Lim iterations.
pub fn preview_audio(mel: &MelSpectrogram, cfg: &FeatureConfig) -> Result<Vec<f32>> {
    let mags = mel_to_linear(mel, cfg, 200)?;
    griffin_lim(&mags, cfg, 60, 0)
}
