//! Audio front end: waveform ingestion, log-mel and F0 features, pitch
//! quantization, random resampling and the on-disk feature cache.

mod audio;
mod augment;
mod dataset;
mod mel;
mod pitch;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use audio::{decode_wav, load_audio, resample, write_wav, PcmAudio, Waveform, SAMPLE_RATE};
pub use augment::{fit_rows, interpolate_rows, random_resample, ResampleRanges};
pub use dataset::{
    analyze_audio, build_dataset, read_feature_file, read_manifest, read_speaker_stats, write_feature_file,
    write_speaker_stats, Dataset, FeatureFile, ManifestEntry, UtteranceRecord,
};
pub use mel::{
    hz_to_mel, mel_band_edges, mel_filterbank, mel_spectrogram, mel_to_hz, padded_hann,
    MelExtractor, MelSpectrogram, Stft,
};
pub use pitch::{
    extract_f0, extract_f0_with, pitch_bin, quantize_pitch, F0Estimator, OneHotPitch,
    PitchContour, SpeakerStats, Yin, PITCH_BINS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_ms: f32,
    pub hop_ms: f32,
    pub mel_bins: usize,
    pub fmin_hz: f32,
    pub fmax_hz: f32,
    pub magnitude_floor: f32,
    pub fft_size: usize,
    pub f0_min_hz: f32,
    pub f0_max_hz: f32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            frame_ms: 50.0,
            hop_ms: 12.5,
            mel_bins: 80,
            fmin_hz: 125.0,
            fmax_hz: 7600.0,
            magnitude_floor: 0.01,
            fft_size: 1024,
            f0_min_hz: 71.0,
            f0_max_hz: 800.0,
        }
    }
}

impl FeatureConfig {
    pub fn frame_len(&self) -> usize {
        (self.sample_rate as f64 * self.frame_ms as f64 / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as f64 * self.hop_ms as f64 / 1000.0).round() as usize
    }

    /// `ln(magnitude_floor)`, the smallest value a mel entry can take.
    pub fn log_floor(&self) -> f32 {
        self.magnitude_floor.ln()
    }

    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f32 / 2.0;
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!("sample_rate must be {SAMPLE_RATE}")));
        }
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < self.fmax_hz && self.fmax_hz <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= fmin_hz < fmax_hz <= {nyquist}, got {}..{}",
                self.fmin_hz, self.fmax_hz
            )));
        }
        if !(self.magnitude_floor > 0.0) {
            return Err(Error::Config("magnitude_floor must be positive".into()));
        }
        if self.fft_size < self.frame_len() || self.hop_len() == 0 || self.mel_bins == 0 {
            return Err(Error::Config(
                "fft_size must cover the frame; hop and mel_bins must be nonzero".into(),
            ));
        }
        if !(self.f0_min_hz > 0.0 && self.f0_min_hz < self.f0_max_hz) {
            return Err(Error::Config("need 0 < f0_min_hz < f0_max_hz".into()));
        }
        Ok(())
    }

    /// Stable string identifying every field; stored in caches and checkpoints.
    pub fn fingerprint(&self) -> String {
        format!(
            "sr{}-frame{}-hop{}-mel{}-{}..{}-floor{}-fft{}-f0{}..{}",
            self.sample_rate,
            self.frame_ms,
            self.hop_ms,
            self.mel_bins,
            self.fmin_hz,
            self.fmax_hz,
            self.magnitude_floor,
            self.fft_size,
            self.f0_min_hz,
            self.f0_max_hz
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_frame_geometry() {
        let c = FeatureConfig::default();
        assert_eq!(c.frame_len(), 800);
        assert_eq!(c.hop_len(), 200);
        c.validate().unwrap();
    }

    #[test]
    fn inverted_band_is_rejected() {
        let c = FeatureConfig {
            fmin_hz: 8000.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = FeatureConfig {
            magnitude_floor: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
