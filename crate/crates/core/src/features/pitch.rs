//! F0 estimation, per-speaker log-F0 statistics and one-hot quantization.

use serde::{Deserialize, Serialize};

use super::audio::Waveform;
use super::FeatureConfig;
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Bin 0 is unvoiced, bins 1..=256 the quantized normalized log-F0.
pub const PITCH_BINS: usize = 257;
const Z_CLIP: f64 = 3.0;

/// Per-frame F0 in Hz, 0 for unvoiced, aligned to the mel frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PitchContour {
    pub f0_hz: Vec<f32>,
}

impl PitchContour {
    pub fn frames(&self) -> usize {
        self.f0_hz.len()
    }

    pub fn voiced_count(&self) -> usize {
        self.f0_hz.iter().filter(|&&f| f > 0.0).count()
    }

    /// Trims or zero-pads (unvoiced) to `len` frames.
    pub fn fit_to(mut self, len: usize) -> Self {
        self.f0_hz.resize(len, 0.0);
        self
    }
}

/// Anything that can turn a waveform into a frame-rate F0 track.
pub trait F0Estimator {
    /// Returns one value per hop-spaced frame (`ceil(len / hop)` frames),
    /// 0 where no pitch was found.
    fn estimate(&self, wave: &Waveform, hop: usize) -> Vec<f32>;
}

/// YIN with cumulative-mean-normalized difference and parabolic refinement.
#[derive(Clone, Debug)]
pub struct Yin {
    pub fmin: f32,
    pub fmax: f32,
    pub threshold: f32,
    pub window: usize,
    /// Frames quieter than this RMS are unvoiced.
    pub silence_rms: f32,
}

impl Yin {
    pub fn new(fmin: f32, fmax: f32) -> Self {
        Self {
            fmin,
            fmax,
            threshold: 0.15,
            window: 512,
            silence_rms: 5e-3,
        }
    }
}

impl F0Estimator for Yin {
    fn estimate(&self, wave: &Waveform, hop: usize) -> Vec<f32> {
        let sr = wave.sample_rate as f32;
        let tau_min = ((sr / self.fmax).floor() as usize).max(2);
        let tau_max = (sr / self.fmin).ceil() as usize;
        let w = self.window;
        let x = &wave.samples;
        let at = |i: isize| -> f32 {
            if i < 0 || i as usize >= x.len() {
                0.0
            } else {
                x[i as usize]
            }
        };
        let frames = wave.len().div_ceil(hop);
        let mut out = Vec::with_capacity(frames);
        let mut seg = vec![0.0f32; w + tau_max + 2];
        let mut d = vec![0.0f64; tau_max + 2];
        for t in 0..frames {
            let start = (t * hop) as isize - (w / 2) as isize;
            for (i, s) in seg.iter_mut().enumerate() {
                *s = at(start + i as isize);
            }
            let energy: f64 = seg[..w].iter().map(|&v| (v as f64).powi(2)).sum();
            if ((energy / w as f64).sqrt() as f32) < self.silence_rms {
                out.push(0.0);
                continue;
            }
            for (tau, slot) in d.iter_mut().enumerate().skip(1) {
                *slot = (0..w)
                    .map(|j| ((seg[j] - seg[j + tau]) as f64).powi(2))
                    .sum();
            }
            // cumulative mean normalized difference
            let mut cmnd = vec![1.0f64; tau_max + 2];
            let mut running = 0.0;
            for tau in 1..tau_max + 2 {
                running += d[tau];
                cmnd[tau] = if running > 0.0 {
                    d[tau] * tau as f64 / running
                } else {
                    1.0
                };
            }
            let mut found = None;
            let mut tau = tau_min;
            while tau <= tau_max {
                if cmnd[tau] < self.threshold as f64 {
                    while tau < tau_max && cmnd[tau + 1] < cmnd[tau] {
                        tau += 1;
                    }
                    found = Some(tau);
                    break;
                }
                tau += 1;
            }
            let f0 = match found {
                Some(tau) => {
                    let (a, b, c) = (cmnd[tau - 1], cmnd[tau], cmnd[tau + 1]);
                    let denom = a - 2.0 * b + c;
                    let shift = if denom.abs() > 1e-12 {
                        (0.5 * (a - c) / denom).clamp(-1.0, 1.0)
                    } else {
                        0.0
                    };
                    let f = sr as f64 / (tau as f64 + shift);
                    if f >= self.fmin as f64 && f <= self.fmax as f64 {
                        f as f32
                    } else {
                        0.0
                    }
                }
                None => 0.0,
            };
            out.push(f0);
        }
        out
    }
}

/// F0 at the feature hop with the YIN estimator.
pub fn extract_f0(wave: &Waveform, fmin: f32, fmax: f32) -> Result<PitchContour> {
    extract_f0_with(&Yin::new(fmin, fmax), wave, fmin, fmax, FeatureConfig::default().hop_len())
}

pub fn extract_f0_with(
    estimator: &dyn F0Estimator,
    wave: &Waveform,
    fmin: f32,
    fmax: f32,
    hop: usize,
) -> Result<PitchContour> {
    if !(fmin > 0.0 && fmin < fmax) {
        return Err(Error::InvalidInput(format!(
            "F0 search range must satisfy 0 < fmin < fmax, got {fmin}..{fmax}"
        )));
    }
    Ok(PitchContour {
        f0_hz: estimator.estimate(wave, hop),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats {
    pub speaker_id: String,
    pub logf0_mean: f64,
    pub logf0_std: f64,
}

impl SpeakerStats {
    /// Log-F0 mean and (population) standard deviation over voiced frames.
    pub fn from_contours<'a>(
        speaker_id: &str,
        contours: impl IntoIterator<Item = &'a PitchContour>,
    ) -> Result<Self> {
        let logs: Vec<f64> = contours
            .into_iter()
            .flat_map(|c| c.f0_hz.iter())
            .filter(|&&f| f > 0.0)
            .map(|&f| (f as f64).ln())
            .collect();
        if logs.len() < 2 {
            return Err(Error::InsufficientVoicing {
                speaker: speaker_id.to_string(),
                voiced: logs.len(),
            });
        }
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let std = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            return Err(Error::InvalidInput(format!(
                "speaker `{speaker_id}` has zero log-F0 variance"
            )));
        }
        Ok(Self {
            speaker_id: speaker_id.to_string(),
            logf0_mean: mean,
            logf0_std: std,
        })
    }
}

/// Quantized pitch, one bin index per frame; the one-hot matrix is
/// materialized on demand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotPitch {
    pub bins: Vec<u16>,
}

impl OneHotPitch {
    pub fn frames(&self) -> usize {
        self.bins.len()
    }

    pub fn to_matrix(&self) -> Tensor {
        let mut m = Tensor::zeros(self.bins.len(), PITCH_BINS);
        for (t, &b) in self.bins.iter().enumerate() {
            m.set(t, b as usize, 1.0);
        }
        m
    }

    pub fn unvoiced(frames: usize) -> Self {
        Self {
            bins: vec![0; frames],
        }
    }
}

/// Bin of a voiced frame: z-score clipped to ±3 and mapped linearly onto
/// 1..=256, rounding half away from zero.
pub fn pitch_bin(f0_hz: f32, stats: &SpeakerStats) -> u16 {
    let z = ((f0_hz as f64).ln() - stats.logf0_mean) / stats.logf0_std;
    let z = z.clamp(-Z_CLIP, Z_CLIP);
    let pos = (z + Z_CLIP) / (2.0 * Z_CLIP) * (PITCH_BINS - 2) as f64;
    1 + pos.round() as u16
}

pub fn quantize_pitch(contour: &PitchContour, stats: &SpeakerStats) -> Result<OneHotPitch> {
    let mut bins = Vec::with_capacity(contour.frames());
    for (t, &f) in contour.f0_hz.iter().enumerate() {
        if f == 0.0 {
            bins.push(0);
        } else if f > 0.0 && f.is_finite() {
            bins.push(pitch_bin(f, stats));
        } else {
            return Err(Error::InvalidInput(format!(
                "frame {t} has malformed F0 {f}"
            )));
        }
    }
    Ok(OneHotPitch { bins })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stats(mean: f64, std: f64) -> SpeakerStats {
        SpeakerStats {
            speaker_id: "s".into(),
            logf0_mean: mean,
            logf0_std: std,
        }
    }

    fn sawtooth(freq: f64, secs: f64) -> Waveform {
        let n = (16_000.0 * secs) as usize;
        Waveform::new(
            (0..n)
                .map(|i| {
                    let ph = (i as f64 * freq / 16_000.0).fract();
                    (0.5 * (2.0 * ph - 1.0)) as f32
                })
                .collect(),
        )
        .unwrap()
    }

    /// Plain autocorrelation pitch of a clean periodic signal.
    fn autocorr_pitch(x: &[f32], sr: f64, fmin: f64, fmax: f64) -> f64 {
        let lo = (sr / fmax) as usize;
        let hi = (sr / fmin) as usize;
        let n = x.len() - hi;
        let best = (lo..=hi)
            .max_by(|&a, &b| {
                let ra: f64 = (0..n).map(|i| (x[i] * x[i + a]) as f64).sum();
                let rb: f64 = (0..n).map(|i| (x[i] * x[i + b]) as f64).sum();
                ra.total_cmp(&rb)
            })
            .unwrap();
        sr / best as f64
    }

    #[test]
    fn sawtooth_pitch_matches_autocorrelation_oracle() {
        let w = sawtooth(110.0, 1.0);
        let oracle = autocorr_pitch(&w.samples[..4000], 16_000.0, 71.0, 800.0);
        assert!((oracle - 110.0).abs() < 1.0, "oracle {oracle}");
        let c = extract_f0(&w, 71.0, 800.0).unwrap();
        let mut voiced: Vec<f32> = c.f0_hz.iter().copied().filter(|&f| f > 0.0).collect();
        assert!(voiced.len() > c.frames() * 9 / 10);
        voiced.sort_by(f32::total_cmp);
        let median = voiced[voiced.len() / 2] as f64;
        assert!((median - oracle).abs() < 3.0, "median {median} vs oracle {oracle}");
    }

    #[test]
    fn white_noise_is_mostly_unvoiced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Waveform::new((0..16_000).map(|_| rng.random_range(-0.5f32..0.5)).collect()).unwrap();
        let c = extract_f0(&w, 71.0, 800.0).unwrap();
        let unvoiced = c.frames() - c.voiced_count();
        assert!(unvoiced * 10 >= c.frames() * 9, "{unvoiced}/{}", c.frames());
    }

    #[test]
    fn silence_is_unvoiced() {
        let w = Waveform::new(vec![0.0; 8000]).unwrap();
        let c = extract_f0(&w, 71.0, 800.0).unwrap();
        assert_eq!(c.frames(), 40);
        assert!(c.f0_hz.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn invalid_search_range_is_rejected() {
        let w = Waveform::new(vec![0.0; 8000]).unwrap();
        assert!(extract_f0(&w, 300.0, 100.0).is_err());
    }

    #[test]
    fn mean_pitch_lands_on_bin_129() {
        let s = stats(150f64.ln(), 0.2);
        let q = quantize_pitch(&PitchContour { f0_hz: vec![150.0] }, &s).unwrap();
        assert_eq!(q.bins, vec![129]);
    }

    #[test]
    fn outliers_clip_to_the_end_bins() {
        let s = stats(0.0, 1.0);
        // ln f0 = 5 -> z = 5 -> clipped to 3
        let hi = (5.0f64).exp() as f32;
        let lo = (-5.0f64).exp() as f32;
        let q = quantize_pitch(&PitchContour { f0_hz: vec![hi, lo] }, &s).unwrap();
        assert_eq!(q.bins, vec![256, 1]);
    }

    #[test]
    fn unvoiced_contour_is_all_bin_zero() {
        let q = quantize_pitch(&PitchContour { f0_hz: vec![0.0; 5] }, &stats(5.0, 0.3)).unwrap();
        assert_eq!(q, OneHotPitch::unvoiced(5));
        let m = q.to_matrix();
        assert_eq!(m.shape(), (5, PITCH_BINS));
        assert!((0..5).all(|t| m.get(t, 0) == 1.0 && m.row(t).iter().sum::<f32>() == 1.0));
    }

    #[test]
    fn negative_f0_is_malformed() {
        let r = quantize_pitch(&PitchContour { f0_hz: vec![100.0, -3.0] }, &stats(5.0, 0.3));
        assert!(r.is_err());
    }

    #[test]
    fn stats_need_two_voiced_frames() {
        let c = PitchContour { f0_hz: vec![0.0, 120.0, 0.0] };
        assert!(matches!(
            SpeakerStats::from_contours("a", [&c]),
            Err(Error::InsufficientVoicing { voiced: 1, .. })
        ));
        let c2 = PitchContour { f0_hz: vec![100.0, 200.0] };
        let s = SpeakerStats::from_contours("a", [&c2]).unwrap();
        assert!((s.logf0_mean - (20000f64).ln() / 2.0).abs() < 1e-12);
        assert!((s.logf0_std - 2f64.ln() / 2.0).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn quantized_rows_are_one_hot(f0s in proptest::collection::vec(proptest::prop_oneof![proptest::strategy::Just(0.0f32), 40.0f32..1200.0], 1..64)) {
            let q = quantize_pitch(&PitchContour { f0_hz: f0s.clone() }, &stats(5.0, 0.25)).unwrap();
            let m = q.to_matrix();
            for t in 0..m.rows() {
                proptest::prop_assert_eq!(m.row(t).iter().sum::<f32>(), 1.0);
                proptest::prop_assert_eq!(q.bins[t] == 0, f0s[t] == 0.0);
            }
        }
    }
}
