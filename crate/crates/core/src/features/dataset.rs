//! Manifest parsing, the per-utterance binary feature cache and dataset
//! assembly with per-speaker pitch statistics.
//!
//! A cache directory holds one `<utterance_id>.feat` record per utterance,
//! an `index.txt` listing them and `speakers.txt` with `speaker_id mean std`
//! lines.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::audio::load_audio;
use super::mel::{MelExtractor, MelSpectrogram};
use super::pitch::{quantize_pitch, OneHotPitch, PitchContour, SpeakerStats, Yin, F0Estimator};
use super::FeatureConfig;
use crate::error::{Error, Result};
use crate::nn::Tensor;

const FEATURE_MAGIC: &[u8; 8] = b"MAPVCFT1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub audio_path: PathBuf,
    pub speaker_id: String,
    pub transcript: Option<String>,
}

/// Reads `audio_path|speaker_id|transcript` lines. Relative audio paths are
/// resolved against the manifest's directory; blank lines and `#` comments
/// are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.splitn(3, '|');
        let audio = parts.next().unwrap_or("").trim();
        let speaker = parts.next().unwrap_or("").trim();
        if audio.is_empty() || speaker.is_empty() {
            return Err(Error::Format(format!(
                "{}:{}: expected `audio_path|speaker_id[|transcript]`",
                path.display(),
                lineno + 1
            )));
        }
        let transcript = parts
            .next()
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::to_string);
        let audio_path = Path::new(audio);
        out.push(ManifestEntry {
            audio_path: if audio_path.is_absolute() {
                audio_path.to_path_buf()
            } else {
                base.join(audio_path)
            },
            speaker_id: speaker.to_string(),
            transcript,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub mel: MelSpectrogram,
    pub f0: PitchContour,
    pub onehot_pitch: OneHotPitch,
    pub transcript: Option<Vec<String>>,
    pub source: Option<PathBuf>,
}

impl UtteranceRecord {
    pub fn frames(&self) -> usize {
        self.mel.frames()
    }

    pub fn to_feature_file(&self, fingerprint: &str) -> FeatureFile {
        FeatureFile {
            utterance_id: self.utterance_id.clone(),
            speaker_id: self.speaker_id.clone(),
            transcript: self.transcript.as_ref().map(|w| w.join(" ")),
            source: self.source.as_ref().map(|p| p.display().to_string()),
            fingerprint: fingerprint.to_string(),
            mel: self.mel.clone(),
            pitch: Some((self.f0.clone(), self.onehot_pitch.clone())),
        }
    }

    pub fn from_feature_file(f: FeatureFile) -> Result<Self> {
        let (f0, onehot_pitch) = f.pitch.ok_or_else(|| {
            Error::Format(format!("feature file `{}` has no pitch track", f.utterance_id))
        })?;
        Ok(Self {
            utterance_id: f.utterance_id,
            speaker_id: f.speaker_id,
            mel: f.mel,
            f0,
            onehot_pitch,
            transcript: f.transcript.map(|t| t.split_whitespace().map(str::to_string).collect()),
            source: f.source.map(PathBuf::from),
        })
    }
}

/// Contents of one binary feature record. Converted outputs use the same
/// container without a pitch track.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub utterance_id: String,
    pub speaker_id: String,
    pub transcript: Option<String>,
    pub source: Option<String>,
    pub fingerprint: String,
    pub mel: MelSpectrogram,
    pub pitch: Option<(PitchContour, OneHotPitch)>,
}

#[derive(Serialize, Deserialize)]
struct FeatureHeader {
    utterance_id: String,
    speaker_id: String,
    transcript: Option<String>,
    source: Option<String>,
    fingerprint: String,
    frames: usize,
    mel_bins: usize,
    hop_ms: f32,
    has_pitch: bool,
}

/// Layout: magic, `u32` header length, JSON header, `frames x mel_bins`
/// little-endian `f32` mel, then optionally `frames` `f32` F0 values and
/// `frames` `u16` pitch bins.
pub fn write_feature_file(path: impl AsRef<Path>, f: &FeatureFile) -> Result<()> {
    let path = path.as_ref();
    let header = FeatureHeader {
        utterance_id: f.utterance_id.clone(),
        speaker_id: f.speaker_id.clone(),
        transcript: f.transcript.clone(),
        source: f.source.clone(),
        fingerprint: f.fingerprint.clone(),
        frames: f.mel.frames(),
        mel_bins: f.mel.bins(),
        hop_ms: f.mel.hop_ms,
        has_pitch: f.pitch.is_some(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + f.mel.values.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.write_u32::<LittleEndian>(json.len() as u32).unwrap();
    buf.extend_from_slice(&json);
    for &v in f.mel.values.data() {
        buf.write_f32::<LittleEndian>(v).unwrap();
    }
    if let Some((f0, bins)) = &f.pitch {
        if f0.frames() != header.frames || bins.frames() != header.frames {
            return Err(Error::shape("pitch track length differs from mel frames"));
        }
        for &v in &f0.f0_hz {
            buf.write_f32::<LittleEndian>(v).unwrap();
        }
        for &b in &bins.bins {
            buf.write_u16::<LittleEndian>(b).unwrap();
        }
    }
    let tmp = path.with_extension("feat.tmp");
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Decode {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let mut cur = &bytes[8..];
    let hlen = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
    if cur.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: FeatureHeader =
        serde_json::from_slice(&cur[..hlen]).map_err(|e| bad(&e.to_string()))?;
    cur = &cur[hlen..];
    let n = header.frames * header.mel_bins;
    let mut mel = vec![0.0f32; n];
    cur.read_f32_into::<LittleEndian>(&mut mel)
        .map_err(|_| bad("truncated mel"))?;
    let mel = MelSpectrogram::new(
        Tensor::from_vec(header.frames, header.mel_bins, mel)?,
        header.hop_ms,
    )?;
    let pitch = if header.has_pitch {
        let mut f0 = vec![0.0f32; header.frames];
        cur.read_f32_into::<LittleEndian>(&mut f0)
            .map_err(|_| bad("truncated f0"))?;
        let mut bins = vec![0u16; header.frames];
        cur.read_u16_into::<LittleEndian>(&mut bins)
            .map_err(|_| bad("truncated pitch bins"))?;
        if bins.iter().any(|&b| b as usize >= super::PITCH_BINS) {
            return Err(bad("pitch bin out of range"));
        }
        Some((PitchContour { f0_hz: f0 }, OneHotPitch { bins }))
    } else {
        None
    };
    let mut rest = Vec::new();
    cur.read_to_end(&mut rest).ok();
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(FeatureFile {
        utterance_id: header.utterance_id,
        speaker_id: header.speaker_id,
        transcript: header.transcript,
        source: header.source,
        fingerprint: header.fingerprint,
        mel,
        pitch,
    })
}

pub fn write_speaker_stats(path: impl AsRef<Path>, stats: &BTreeMap<String, SpeakerStats>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in stats.values() {
        text.push_str(&format!("{} {:.17e} {:.17e}\n", s.speaker_id, s.logf0_mean, s.logf0_std));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_speaker_stats(path: impl AsRef<Path>) -> Result<BTreeMap<String, SpeakerStats>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("bad speaker stats line `{line}`")))
        };
        if parts.len() != 3 {
            return Err(Error::Format(format!("bad speaker stats line `{line}`")));
        }
        out.insert(
            parts[0].to_string(),
            SpeakerStats {
                speaker_id: parts[0].to_string(),
                logf0_mean: parse(parts[1])?,
                logf0_std: parse(parts[2])?,
            },
        );
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<UtteranceRecord>,
    pub stats: BTreeMap<String, SpeakerStats>,
    pub features: FeatureConfig,
}

impl Dataset {
    pub fn speakers(&self) -> Vec<String> {
        self.stats.keys().cloned().collect()
    }

    pub fn find(&self, utterance_id: &str) -> Option<&UtteranceRecord> {
        self.records.iter().find(|r| r.utterance_id == utterance_id)
    }

    /// Record whose source audio is `path` (compared canonically).
    pub fn find_by_source(&self, path: &Path) -> Option<&UtteranceRecord> {
        let want = fs::canonicalize(path).ok()?;
        self.records.iter().find(|r| {
            r.source
                .as_ref()
                .and_then(|s| fs::canonicalize(s).ok())
                .is_some_and(|p| p == want)
        })
    }

    /// Loads a cache directory written by [`build_dataset`].
    pub fn load_cache(cache_dir: impl AsRef<Path>) -> Result<Self> {
        let dir = cache_dir.as_ref();
        let index = dir.join("index.txt");
        let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
        let mut records = Vec::new();
        let mut fingerprint = None;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let id = line.split('|').next().unwrap_or("").trim();
            let f = read_feature_file(dir.join(format!("{id}.feat")))?;
            fingerprint.get_or_insert_with(|| f.fingerprint.clone());
            records.push(UtteranceRecord::from_feature_file(f)?);
        }
        let stats = read_speaker_stats(dir.join("speakers.txt"))?;
        let features: FeatureConfig = match fs::read_to_string(dir.join("features.toml")) {
            Ok(t) => toml::from_str(&t).map_err(|e| Error::Config(e.to_string()))?,
            Err(_) => FeatureConfig::default(),
        };
        if let Some(fp) = fingerprint {
            if fp != features.fingerprint() {
                return Err(Error::Config(format!(
                    "cache fingerprint `{fp}` does not match its feature config"
                )));
            }
        }
        Ok(Self {
            records,
            stats,
            features,
        })
    }
}

#[derive(Serialize, Deserialize, PartialEq)]
struct SourceStamp {
    path: String,
    bytes: u64,
    modified_ns: u128,
}

fn source_stamp(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let modified_ns = meta
        .modified()
        .ok()
        .and_then(|t| t.duration_since(std::time::UNIX_EPOCH).ok())
        .map_or(0, |d| d.as_nanos());
    let stamp = SourceStamp {
        path: path.display().to_string(),
        bytes: meta.len(),
        modified_ns,
    };
    Ok(serde_json::to_string(&stamp).expect("stamp serializes"))
}

fn utterance_ids(entries: &[ManifestEntry]) -> Result<Vec<String>> {
    let stem = |e: &ManifestEntry| {
        e.audio_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "utt".into())
    };
    let mut counts: HashMap<String, usize> = HashMap::new();
    for e in entries {
        *counts.entry(stem(e)).or_default() += 1;
    }
    let ids: Vec<String> = entries
        .iter()
        .map(|e| {
            let s = stem(e);
            if counts[&s] > 1 {
                format!("{}_{s}", e.speaker_id)
            } else {
                s
            }
        })
        .collect();
    let mut seen = std::collections::HashSet::new();
    for id in &ids {
        if !seen.insert(id) {
            return Err(Error::Format(format!("duplicate utterance id `{id}` in manifest")));
        }
    }
    Ok(ids)
}

fn analyze(path: &Path, extractor: &MelExtractor, yin: &Yin, cfg: &FeatureConfig) -> Result<(MelSpectrogram, PitchContour)> {
    let wave = load_audio(path)?;
    let mel = extractor.extract(&wave)?;
    let f0 = PitchContour {
        f0_hz: yin.estimate(&wave, cfg.hop_len()),
    }
    .fit_to(mel.frames());
    Ok((mel, f0))
}

/// Features of a single audio file outside any manifest, with pitch
/// quantized by `stats`.
pub fn analyze_audio(
    path: impl AsRef<Path>,
    speaker_id: &str,
    cfg: &FeatureConfig,
    stats: &SpeakerStats,
) -> Result<UtteranceRecord> {
    let path = path.as_ref();
    let extractor = MelExtractor::new(cfg)?;
    let yin = Yin::new(cfg.f0_min_hz, cfg.f0_max_hz);
    let (mel, f0) = analyze(path, &extractor, &yin, cfg)?;
    let onehot_pitch = quantize_pitch(&f0, stats)?;
    Ok(UtteranceRecord {
        utterance_id: path
            .file_stem()
            .map_or_else(|| "utt".into(), |s| s.to_string_lossy().into_owned()),
        speaker_id: speaker_id.to_string(),
        mel,
        f0,
        onehot_pitch,
        transcript: None,
        source: Some(path.to_path_buf()),
    })
}

/// Extracts (or reuses cached) features for every manifest entry, computes
/// per-speaker log-F0 statistics and quantizes each contour with its
/// speaker's statistics. Records keep manifest order.
pub fn build_dataset(
    manifest: impl AsRef<Path>,
    cfg: &FeatureConfig,
    cache_dir: impl AsRef<Path>,
) -> Result<Dataset> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::Config("manifest lists no utterances".into()));
    }
    for e in &entries {
        if !e.audio_path.is_file() {
            return Err(Error::io(
                &e.audio_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "audio file not found"),
            ));
        }
    }
    let ids = utterance_ids(&entries)?;
    let cache_dir = cache_dir.as_ref();
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let fingerprint = cfg.fingerprint();
    let extractor = MelExtractor::new(cfg)?;
    let yin = Yin::new(cfg.f0_min_hz, cfg.f0_max_hz);

    // DSP pass: mel + F0, reusing fresh cache entries
    let mut raw: Vec<(MelSpectrogram, PitchContour, Option<OneHotPitch>)> = Vec::new();
    for (entry, id) in entries.iter().zip(&ids) {
        let stamp = source_stamp(&entry.audio_path)?;
        let cache_path = cache_dir.join(format!("{id}.feat"));
        let cached = read_feature_file(&cache_path).ok().filter(|f| {
            f.fingerprint == fingerprint
                && f.source.as_deref() == Some(stamp.as_str())
                && f.pitch.is_some()
        });
        match cached {
            Some(f) => {
                let (f0, bins) = f.pitch.expect("filtered on pitch");
                raw.push((f.mel, f0, Some(bins)));
            }
            None => {
                log::debug!("extracting features for {}", entry.audio_path.display());
                let (mel, f0) = analyze(&entry.audio_path, &extractor, &yin, cfg)?;
                raw.push((mel, f0, None));
            }
        }
    }

    let mut by_speaker: BTreeMap<&str, Vec<&PitchContour>> = BTreeMap::new();
    for (entry, (_, f0, _)) in entries.iter().zip(&raw) {
        by_speaker.entry(&entry.speaker_id).or_default().push(f0);
    }
    let mut stats = BTreeMap::new();
    for (spk, contours) in by_speaker {
        stats.insert(spk.to_string(), SpeakerStats::from_contours(spk, contours)?);
    }

    let mut records = Vec::with_capacity(entries.len());
    let mut index = String::new();
    for ((entry, id), (mel, f0, cached_bins)) in entries.iter().zip(&ids).zip(raw) {
        let onehot = quantize_pitch(&f0, &stats[&entry.speaker_id])?;
        let stamp = source_stamp(&entry.audio_path)?;
        let record = UtteranceRecord {
            utterance_id: id.clone(),
            speaker_id: entry.speaker_id.clone(),
            mel,
            f0,
            onehot_pitch: onehot,
            transcript: entry
                .transcript
                .as_ref()
                .map(|t| t.split_whitespace().map(str::to_string).collect()),
            source: Some(entry.audio_path.clone()),
        };
        if cached_bins.as_ref() != Some(&record.onehot_pitch) {
            let mut file = record.to_feature_file(&fingerprint);
            file.source = Some(stamp);
            write_feature_file(cache_dir.join(format!("{id}.feat")), &file)?;
        }
        index.push_str(&format!(
            "{id}|{}|{}\n",
            entry.speaker_id,
            entry.audio_path.display()
        ));
        records.push(record);
    }
    write_if_changed(&cache_dir.join("index.txt"), index.as_bytes())?;
    let stats_path = cache_dir.join("speakers.txt");
    let mut stats_text = Vec::new();
    for s in stats.values() {
        writeln!(stats_text, "{} {:.17e} {:.17e}", s.speaker_id, s.logf0_mean, s.logf0_std).unwrap();
    }
    write_if_changed(&stats_path, &stats_text)?;
    let cfg_text = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    write_if_changed(&cache_dir.join("features.toml"), cfg_text.as_bytes())?;

    Ok(Dataset {
        records,
        stats,
        features: cfg.clone(),
    })
}

fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<()> {
    if fs::read(path).ok().as_deref() == Some(bytes) {
        return Ok(());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
