//! Checkpoint container: magic, JSON header, then little-endian `f32`
//! blobs for every parameter and (optionally) the Adam moments.

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SpeakerStats;
use crate::model::{FactorSlices, VcModel};
use crate::nn::{ParamStore, Tensor};
use crate::trainer::{build_network, RunConfig, RunningLoss};

const MAGIC: &[u8; 8] = b"MAPVCCK1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub step: u64,
    pub config: RunConfig,
    /// Speaker ids in embedding-row order.
    pub speakers: Vec<String>,
    pub slices: FactorSlices,
    pub feature_fingerprint: String,
    pub speaker_stats: Vec<SpeakerStats>,
    pub running: RunningLoss,
    pub params: Vec<ParamEntry>,
    pub adam_t: Option<u64>,
}

impl CheckpointHeader {
    pub fn new(
        step: u64,
        config: &RunConfig,
        speakers: Vec<String>,
        slices: FactorSlices,
        speaker_stats: Vec<SpeakerStats>,
        running: RunningLoss,
    ) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            step,
            feature_fingerprint: config.features.fingerprint(),
            config: config.clone(),
            speakers,
            slices,
            speaker_stats,
            running,
            params: Vec::new(),
            adam_t: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut header = self.header.clone();
        header.params = self
            .params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect();
        header.adam_t = self.adam.as_ref().map(|a| a.t);
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let scalars: usize = self.params.iter().map(|(_, t)| t.len()).sum();
        let mut buf = Vec::with_capacity(16 + json.len() + scalars * 12);
        buf.extend_from_slice(MAGIC);
        buf.write_u64::<LittleEndian>(json.len() as u64).unwrap();
        buf.extend_from_slice(&json);
        let mut put = |t: &Tensor| {
            for &v in t.data() {
                buf.write_f32::<LittleEndian>(v).unwrap();
            }
        };
        self.params.iter().for_each(|(_, t)| put(t));
        if let Some(a) = &self.adam {
            if a.m.len() != self.params.len() || a.v.len() != self.params.len() {
                return Err(Error::Format("optimizer state does not match the parameters".into()));
            }
            a.m.iter().for_each(&mut put);
            a.v.iter().for_each(&mut put);
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Decode {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint"));
        }
        let mut cur = &bytes[8..];
        let hlen = cur.read_u64::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
        if cur.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&cur[..hlen]).map_err(|e| bad(&format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {}", header.format_version)));
        }
        cur = &cur[hlen..];
        let mut take = |e: &ParamEntry| -> Result<Tensor> {
            let mut data = vec![0.0f32; e.rows * e.cols];
            cur.read_f32_into::<LittleEndian>(&mut data)
                .map_err(|_| bad(&format!("truncated at `{}`", e.name)))?;
            Tensor::from_vec(e.rows, e.cols, data)
        };
        let mut params = Vec::with_capacity(header.params.len());
        for e in &header.params {
            params.push((e.name.clone(), take(e)?));
        }
        let adam = match header.adam_t {
            Some(t) => {
                let m = header.params.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
                let v = header.params.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
                Some(AdamState { t, m, v })
            }
            None => None,
        };
        if !cur.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, params, adam })
    }

    /// Copies parameter values into `store`; names and shapes must match.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut other = ParamStore::new();
        for (n, t) in &self.params {
            other.add(n.clone(), t.clone());
        }
        store.load_from(&other)
    }

    /// Rebuilds the model for inference.
    pub fn restore(&self) -> Result<LoadedModel> {
        let (mut store, model, _) = build_network(&self.header.config, &self.header.speakers)?;
        self.load_into(&mut store)?;
        if model.slices() != self.header.slices {
            return Err(Error::Format("checkpoint channel layout differs from its config".into()));
        }
        Ok(LoadedModel {
            config: self.header.config.clone(),
            model,
            store,
            speaker_stats: self.header.speaker_stats.clone(),
            step: self.header.step,
        })
    }
}

/// Inference-ready model with the speaker statistics it was trained with.
pub struct LoadedModel {
    pub config: RunConfig,
    pub model: VcModel,
    pub store: ParamStore,
    pub speaker_stats: Vec<SpeakerStats>,
    pub step: u64,
}

impl LoadedModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::load(path)?.restore()
    }

    pub fn stats(&self, speaker: &str) -> Result<&SpeakerStats> {
        self.speaker_stats
            .iter()
            .find(|s| s.speaker_id == speaker)
            .ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))
    }
}
