//! Synthetic speech-like corpus: harmonic sources with per-speaker pitch
//! register and vocal-tract scaling, shaped by formant resonators, with
//! pauses and noise bursts. Used for smoke runs and tests.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{write_wav, SAMPLE_RATE};

const VOWELS: [(&str, [f64; 3]); 5] = [
    ("a", [730.0, 1090.0, 2440.0]),
    ("e", [530.0, 1840.0, 2480.0]),
    ("i", [270.0, 2290.0, 3010.0]),
    ("o", [570.0, 840.0, 2410.0]),
    ("u", [300.0, 870.0, 2240.0]),
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: String,
    pub f0_hz: f64,
    /// Formant frequency multiplier.
    pub tract_scale: f64,
}

impl SyntheticSpeaker {
    pub fn pair() -> [SyntheticSpeaker; 2] {
        [
            SyntheticSpeaker {
                id: "spk1".into(),
                f0_hz: 115.0,
                tract_scale: 1.0,
            },
            SyntheticSpeaker {
                id: "spk2".into(),
                f0_hz: 210.0,
                tract_scale: 1.17,
            },
        ]
    }
}

/// Second-order resonator (unity gain at DC is not preserved; fine here).
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let r = (-PI * bandwidth / SAMPLE_RATE as f64).exp();
        let theta = 2.0 * PI * freq / SAMPLE_RATE as f64;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Waveform and word transcript of one synthetic utterance of roughly
/// `seconds` length.
pub fn synth_utterance(spk: &SyntheticSpeaker, seconds: f64, rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<String>) {
    let sr = SAMPLE_RATE as f64;
    let total = (seconds * sr) as usize;
    let mut out = Vec::with_capacity(total);
    let mut words = Vec::new();
    let mut phase = 0.0f64;
    let lead = (0.08 * sr) as usize;
    out.resize(lead, 0.0);
    while out.len() < total {
        let kind: f64 = rng.random();
        let dur = if kind < 0.15 {
            rng.random_range(0.05..0.15)
        } else {
            rng.random_range(0.12..0.3)
        };
        let n = ((dur * sr) as usize).min(total - out.len()).max(1);
        let ramp = (0.01 * sr) as usize;
        let env = |i: usize| ((i.min(n - 1 - i) as f64) / ramp as f64).min(1.0);
        if kind < 0.15 {
            out.extend(std::iter::repeat_n(0.0, n));
        } else if kind < 0.27 {
            words.push("s".to_string());
            let mut hp = Resonator::new(5000.0 * spk.tract_scale.min(1.4), 1500.0);
            for i in 0..n {
                let w: f64 = rng.random_range(-1.0..1.0);
                out.push((0.25 * hp.tick(w) * 4.0 * env(i)) as f32);
            }
        } else {
            let (name, formants) = VOWELS[rng.random_range(0..VOWELS.len())];
            words.push(name.to_string());
            let mut res: Vec<Resonator> = formants
                .iter()
                .zip([80.0, 100.0, 140.0])
                .map(|(&f, bw)| Resonator::new(f * spk.tract_scale, bw))
                .collect();
            let glide = rng.random_range(-0.15..0.15);
            let base = spk.f0_hz * rng.random_range(0.9..1.1);
            for i in 0..n {
                let frac = i as f64 / n as f64;
                let f0 = base * (1.0 + glide * frac) * (1.0 + 0.02 * (2.0 * PI * 5.0 * i as f64 / sr).sin());
                phase += f0 / sr;
                phase -= phase.floor();
                // band-limited sawtooth
                let mut src = 0.0;
                let mut h = 1;
                while (h as f64) * f0 < 0.45 * sr && h <= 40 {
                    src += (2.0 * PI * h as f64 * phase).sin() / h as f64;
                    h += 1;
                }
                let mut y = 0.0;
                for r in res.iter_mut() {
                    y += r.tick(src);
                }
                out.push((0.6 * y * env(i)) as f32);
            }
        }
    }
    out.truncate(total);
    let peak = out.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
    out.iter_mut().for_each(|v| *v *= 0.7 / peak);
    if words.is_empty() {
        words.push("a".into());
    }
    (out, words)
}

/// Writes `per_speaker` utterances for each speaker into `dir` and a
/// `manifest.txt` (`file|speaker|transcript`). Returns the manifest path.
pub fn write_corpus(
    dir: impl AsRef<Path>,
    speakers: &[SyntheticSpeaker],
    per_speaker: usize,
    seconds: f64,
    seed: u64,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::new();
    for spk in speakers {
        for i in 0..per_speaker {
            let (wave, words) = synth_utterance(spk, seconds * rng.random_range(0.9..1.1), &mut rng);
            let name = format!("{}_{:03}.wav", spk.id, i + 1);
            write_wav(dir.join(&name), &wave, SAMPLE_RATE)?;
            manifest.push_str(&format!("{name}|{}|{}\n", spk.id, words.join(" ")));
        }
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
