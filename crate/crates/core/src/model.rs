//! Rhythm, content and pitch encoders, the speaker embedding table, bundle
//! assembly and the mel decoder.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{mbv_encode, MBVBottleneck};
use crate::error::{Error, Result};
use crate::features::{MelSpectrogram, OneHotPitch, PITCH_BINS};
use crate::nn::{normal, BiLstm, Conv1d, Graph, Linear, Norm, ParamId, ParamStore, SeqLayout, Tensor, Var};

/// The four representations, in assembled channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Factor {
    Rhythm,
    Content,
    Pitch,
    Timbre,
}

impl Factor {
    pub const ALL: [Factor; 4] = [Factor::Rhythm, Factor::Content, Factor::Pitch, Factor::Timbre];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Factor::Rhythm => "rhythm",
            Factor::Content => "content",
            Factor::Pitch => "pitch",
            Factor::Timbre => "timbre",
        })
    }
}

impl std::str::FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rhythm" => Ok(Factor::Rhythm),
            "content" => Ok(Factor::Content),
            "pitch" => Ok(Factor::Pitch),
            "timbre" => Ok(Factor::Timbre),
            other => Err(Error::InvalidInput(format!(
                "unknown factor `{other}` (expected rhythm, content, pitch or timbre)"
            ))),
        }
    }
}

/// Conv stack followed by bidirectional recurrence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub conv_layers: usize,
    pub conv_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Hidden units per direction.
    pub recurrent_width: usize,
    #[serde(default = "default_recurrent_layers")]
    pub recurrent_layers: usize,
}

fn default_kernel() -> usize {
    5
}

fn default_recurrent_layers() -> usize {
    1
}

impl EncoderSpec {
    fn new(conv_layers: usize, conv_channels: usize, recurrent_width: usize) -> Self {
        Self {
            conv_layers,
            conv_channels,
            kernel: 5,
            recurrent_width,
            recurrent_layers: 1,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.conv_channels == 0 || self.recurrent_width == 0 || self.recurrent_layers == 0 {
            return Err(Error::Config(format!("{name} encoder has a zero-sized layer")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("{name} encoder kernel must be odd")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub rhythm: EncoderSpec,
    pub content: EncoderSpec,
    pub pitch: EncoderSpec,
    /// Shared time downsampling factor of the three frame-rate codes.
    pub downsample: usize,
    /// Rhythm code width `d_r` (MBV channels).
    pub mbv_dim: usize,
    pub mbv_temperature: f32,
    pub timbre_dim: usize,
    pub decoder_layers: usize,
    /// Decoder hidden units per direction.
    pub decoder_width: usize,
    /// Conv-stack group norm uses `channels / group_size` groups.
    pub group_size: usize,
    pub mel_bins: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            rhythm: EncoderSpec::new(1, 128, 2),
            content: EncoderSpec::new(3, 512, 8),
            pitch: EncoderSpec::new(3, 256, 16),
            downsample: 8,
            mbv_dim: 2,
            mbv_temperature: 1.0,
            timbre_dim: 16,
            decoder_layers: 3,
            decoder_width: 512,
            group_size: 16,
            mel_bins: 80,
        }
    }
}

impl EncoderConfig {
    /// Small profile for CPU smoke runs and tests.
    pub fn tiny() -> Self {
        Self {
            rhythm: EncoderSpec::new(1, 32, 2),
            content: EncoderSpec::new(3, 64, 8),
            pitch: EncoderSpec::new(3, 32, 16),
            decoder_layers: 2,
            decoder_width: 64,
            ..Self::default()
        }
    }

    pub fn content_dim(&self) -> usize {
        2 * self.content.recurrent_width
    }

    pub fn pitch_dim(&self) -> usize {
        2 * self.pitch.recurrent_width
    }

    pub fn slices(&self) -> FactorSlices {
        FactorSlices::new(self.mbv_dim, self.content_dim(), self.pitch_dim(), self.timbre_dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.rhythm.validate("rhythm")?;
        self.content.validate("content")?;
        self.pitch.validate("pitch")?;
        if self.downsample == 0 {
            return Err(Error::Config("downsample must be at least 1".into()));
        }
        if self.mbv_dim == 0 || !(self.mbv_temperature > 0.0) {
            return Err(Error::Config("MBV needs mbv_dim > 0 and mbv_temperature > 0".into()));
        }
        if self.timbre_dim == 0 || self.decoder_layers == 0 || self.decoder_width == 0 {
            return Err(Error::Config("timbre and decoder sizes must be nonzero".into()));
        }
        if self.group_size == 0 || self.mel_bins == 0 {
            return Err(Error::Config("group_size and mel_bins must be nonzero".into()));
        }
        Ok(())
    }
}

/// Column ranges of each factor within the assembled `T x D` matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSlices {
    pub rhythm: Range<usize>,
    pub content: Range<usize>,
    pub pitch: Range<usize>,
    pub timbre: Range<usize>,
}

impl FactorSlices {
    pub fn new(d_r: usize, d_c: usize, d_f: usize, d_u: usize) -> Self {
        Self {
            rhythm: 0..d_r,
            content: d_r..d_r + d_c,
            pitch: d_r + d_c..d_r + d_c + d_f,
            timbre: d_r + d_c + d_f..d_r + d_c + d_f + d_u,
        }
    }

    pub fn get(&self, f: Factor) -> Range<usize> {
        match f {
            Factor::Rhythm => self.rhythm.clone(),
            Factor::Content => self.content.clone(),
            Factor::Pitch => self.pitch.clone(),
            Factor::Timbre => self.timbre.clone(),
        }
    }

    pub fn total(&self) -> usize {
        self.timbre.end
    }
}

/// Speaker id to embedding row.
#[derive(Clone, Debug)]
pub struct SpeakerTable {
    pub index: BTreeMap<String, usize>,
    pub embedding: ParamId,
    pub dim: usize,
}

impl SpeakerTable {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, speakers: &[String], dim: usize) -> Result<Self> {
        let mut index = BTreeMap::new();
        for s in speakers {
            let next = index.len();
            if index.insert(s.clone(), next).is_some() {
                return Err(Error::Config(format!("speaker `{s}` listed twice")));
            }
        }
        if index.is_empty() {
            return Err(Error::Config("speaker table needs at least one speaker".into()));
        }
        let embedding = store.add("speakers.embedding", normal(rng, index.len(), dim, 0.5));
        Ok(Self { index, embedding, dim })
    }

    pub fn id(&self, speaker: &str) -> Result<usize> {
        self.index
            .get(speaker)
            .copied()
            .ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))
    }

    /// Speakers in row order.
    pub fn speakers(&self) -> Vec<String> {
        let mut v: Vec<(&String, &usize)> = self.index.iter().collect();
        v.sort_by_key(|(_, &i)| i);
        v.into_iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// One embedding row as a `1 x d_u` graph node.
pub fn lookup_timbre(g: &mut Graph, store: &ParamStore, table: &SpeakerTable, speaker: &str) -> Result<Var> {
    let id = table.id(speaker)?;
    let e = g.param(store, table.embedding);
    Ok(g.gather(e, vec![id]))
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: Conv1d,
    norm: Norm,
    groups: usize,
}

#[derive(Clone, Debug)]
struct Encoder {
    convs: Vec<ConvBlock>,
    lstms: Vec<BiLstm>,
    width: usize,
}

fn norm_groups(channels: usize, group_size: usize) -> usize {
    let mut g = (channels / group_size).max(1);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

impl Encoder {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        spec: &EncoderSpec,
        group_size: usize,
    ) -> Self {
        let mut convs = Vec::new();
        let mut ch = in_dim;
        for i in 0..spec.conv_layers {
            let conv = Conv1d::new(store, rng, &format!("{name}.conv{i}"), ch, spec.conv_channels, spec.kernel);
            let norm = Norm::new(store, &format!("{name}.gn{i}"), spec.conv_channels);
            convs.push(ConvBlock {
                conv,
                norm,
                groups: norm_groups(spec.conv_channels, group_size),
            });
            ch = spec.conv_channels;
        }
        let mut lstms = Vec::new();
        for i in 0..spec.recurrent_layers {
            lstms.push(BiLstm::new(store, rng, &format!("{name}.lstm{i}"), ch, spec.recurrent_width));
            ch = 2 * spec.recurrent_width;
        }
        Self {
            convs,
            lstms,
            width: spec.recurrent_width,
        }
    }

    /// Frame-rate recurrent output, `rows x 2 * width`.
    fn features(&self, g: &mut Graph, store: &ParamStore, x: Var, layout: &SeqLayout) -> Var {
        let mut h = x;
        for block in &self.convs {
            h = block.conv.forward(g, store, h, layout);
            h = block.norm.group(g, store, h, layout, block.groups);
            h = g.relu(h);
        }
        for l in &self.lstms {
            h = l.forward(g, store, h, layout);
        }
        h
    }
}

/// Downsampled layout: `ceil(len / factor)` rows per item.
pub fn code_layout(layout: &SeqLayout, factor: usize) -> SeqLayout {
    SeqLayout {
        batch: layout.batch,
        time: layout.time.div_ceil(factor),
        lens: layout.lens.iter().map(|l| l.div_ceil(factor)).collect(),
    }
}

/// Keeps the forward direction at the last frame of each window and the
/// backward direction at its first frame, so each code row summarizes its
/// whole window from both sides.
fn downsample(g: &mut Graph, h: Var, width: usize, layout: &SeqLayout, factor: usize) -> Var {
    let cl = code_layout(layout, factor);
    let mut fwd_idx = Vec::with_capacity(cl.rows());
    let mut bwd_idx = Vec::with_capacity(cl.rows());
    for b in 0..layout.batch {
        let len = layout.lens[b];
        for k in 0..cl.time {
            if k < cl.lens[b] {
                fwd_idx.push(layout.row(b, (k * factor + factor - 1).min(len - 1)));
                bwd_idx.push(layout.row(b, k * factor));
            } else {
                fwd_idx.push(layout.row(b, 0));
                bwd_idx.push(layout.row(b, 0));
            }
        }
    }
    let f = g.slice_cols(h, 0, width);
    let bw = g.slice_cols(h, width, 2 * width);
    let f = g.gather(f, fwd_idx);
    let bw = g.gather(bw, bwd_idx);
    g.concat_cols(&[f, bw])
}

/// Nearest-neighbour upsampling: frame `t` takes code row `t / factor`.
pub fn upsample(g: &mut Graph, code: Var, layout: &SeqLayout, factor: usize) -> Var {
    let ct = layout.time.div_ceil(factor);
    let idx = (0..layout.batch)
        .flat_map(|b| (0..layout.time).map(move |t| b * ct + t / factor))
        .collect();
    g.gather(code, idx)
}

fn upsample_tensor(code: &Tensor, frames: usize, factor: usize) -> Tensor {
    let idx: Vec<usize> = (0..frames).map(|t| t / factor).collect();
    code.gather_rows(&idx)
}

/// Inputs for one padded batch, all laid out `[batch * time, C]`.
#[derive(Clone, Debug)]
pub struct BatchInputs {
    pub layout: SeqLayout,
    /// Raw mel, rhythm encoder input and reconstruction target.
    pub mel: Tensor,
    /// Mel fed to the content encoder (randomly resampled in training).
    pub content_mel: Tensor,
    /// One-hot pitch fed to the pitch encoder.
    pub pitch: Tensor,
    /// Speaker row per batch item.
    pub speakers: Vec<usize>,
}

/// Graph nodes produced by [`VcModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub z_r: Var,
    pub z_c: Var,
    pub z_f: Var,
    /// Assembled `rows x D` representation.
    pub z: Var,
    pub mel_hat: Var,
}

/// Codes of one utterance plus their frame-rate concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationBundle {
    pub z_r: Tensor,
    pub z_c: Tensor,
    pub z_f: Tensor,
    pub z_u: Vec<f32>,
    pub assembled: Tensor,
    pub slices: FactorSlices,
    pub downsample: usize,
}

impl RepresentationBundle {
    pub fn frames(&self) -> usize {
        self.assembled.rows()
    }

    pub fn slice(&self, f: Factor) -> Tensor {
        let r = self.slices.get(f);
        self.assembled.slice_cols(r.start, r.end)
    }

    /// Copy with one factor's channels set to zero.
    pub fn zeroed(&self, f: Factor) -> RepresentationBundle {
        let mut out = self.clone();
        let r = self.slices.get(f);
        for t in 0..out.assembled.rows() {
            out.assembled.row_mut(t)[r.clone()].fill(0.0);
        }
        out
    }
}

/// Upsamples each frame-rate code to `frames` rows, broadcasts `z_u` and
/// concatenates in `[rhythm | content | pitch | timbre]` order.
pub fn assemble_bundle(
    z_r: Tensor,
    z_c: Tensor,
    z_f: Tensor,
    z_u: Vec<f32>,
    frames: usize,
    downsample: usize,
) -> Result<RepresentationBundle> {
    let tp = z_r.rows();
    if z_c.rows() != tp || z_f.rows() != tp {
        return Err(Error::shape(format!(
            "code lengths differ: rhythm {tp}, content {}, pitch {}",
            z_c.rows(),
            z_f.rows()
        )));
    }
    if downsample == 0 || frames == 0 || tp * downsample < frames || (tp - 1) * downsample >= frames {
        return Err(Error::shape(format!(
            "{tp} code rows at factor {downsample} cannot cover {frames} frames"
        )));
    }
    let u = Tensor::from_fn(frames, z_u.len(), |_, c| z_u[c]);
    let parts = [
        upsample_tensor(&z_r, frames, downsample),
        upsample_tensor(&z_c, frames, downsample),
        upsample_tensor(&z_f, frames, downsample),
        u,
    ];
    let assembled = Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())?;
    Ok(RepresentationBundle {
        slices: FactorSlices::new(z_r.cols(), z_c.cols(), z_f.cols(), z_u.len()),
        z_r,
        z_c,
        z_f,
        z_u,
        assembled,
        downsample,
    })
}

/// Encoders, rhythm logit projection, speaker table and decoder. Parameters
/// live in a caller-owned [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VcModel {
    pub config: EncoderConfig,
    pub speakers: SpeakerTable,
    mbv: MBVBottleneck,
    rhythm: Encoder,
    rhythm_logits: Linear,
    content: Encoder,
    pitch: Encoder,
    decoder: Vec<BiLstm>,
    out_proj: Linear,
}

impl VcModel {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: &EncoderConfig, speakers: &[String]) -> Result<Self> {
        config.validate()?;
        let gs = config.group_size;
        let rhythm = Encoder::new(store, rng, "rhythm", config.mel_bins, &config.rhythm, gs);
        let rhythm_logits = Linear::new(
            store,
            rng,
            "rhythm.logits",
            2 * config.rhythm.recurrent_width,
            2 * config.mbv_dim,
        );
        let content = Encoder::new(store, rng, "content", config.mel_bins, &config.content, gs);
        let pitch = Encoder::new(store, rng, "pitch", PITCH_BINS, &config.pitch, gs);
        let table = SpeakerTable::new(store, rng, speakers, config.timbre_dim)?;
        let mut decoder = Vec::new();
        let mut ch = config.slices().total();
        for i in 0..config.decoder_layers {
            decoder.push(BiLstm::new(store, rng, &format!("decoder.lstm{i}"), ch, config.decoder_width));
            ch = 2 * config.decoder_width;
        }
        let out_proj = Linear::new(store, rng, "decoder.out", ch, config.mel_bins);
        Ok(Self {
            mbv: MBVBottleneck::new(config.mbv_dim, config.mbv_temperature, true)?,
            config: config.clone(),
            speakers: table,
            rhythm,
            rhythm_logits,
            content,
            pitch,
            decoder,
            out_proj,
        })
    }

    pub fn slices(&self) -> FactorSlices {
        self.config.slices()
    }

    /// Binary rhythm code over the downsampled layout. Gumbel noise is drawn
    /// from `noise` when given.
    pub fn rhythm_code(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mel: Var,
        layout: &SeqLayout,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let h = self.rhythm.features(g, store, mel, layout);
        let d = downsample(g, h, self.rhythm.width, layout, self.config.downsample);
        let logits = self.rhythm_logits.forward(g, store, d);
        mbv_encode(g, logits, &self.mbv, noise)
    }

    pub fn content_code(&self, g: &mut Graph, store: &ParamStore, mel: Var, layout: &SeqLayout) -> Var {
        let h = self.content.features(g, store, mel, layout);
        downsample(g, h, self.content.width, layout, self.config.downsample)
    }

    pub fn pitch_code(&self, g: &mut Graph, store: &ParamStore, onehot: Var, layout: &SeqLayout) -> Var {
        let h = self.pitch.features(g, store, onehot, layout);
        downsample(g, h, self.pitch.width, layout, self.config.downsample)
    }

    /// Upsamples the codes and broadcasts each item's timbre row.
    pub fn assemble(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        codes: [Var; 3],
        speakers: &[usize],
        layout: &SeqLayout,
    ) -> Var {
        let ds = self.config.downsample;
        let [r, c, f] = codes.map(|v| upsample(g, v, layout, ds));
        let e = g.param(store, self.speakers.embedding);
        let idx = (0..layout.batch)
            .flat_map(|b| std::iter::repeat_n(speakers[b], layout.time))
            .collect();
        let u = g.gather(e, idx);
        g.concat_cols(&[r, c, f, u])
    }

    pub fn decode_var(&self, g: &mut Graph, store: &ParamStore, z: Var, layout: &SeqLayout) -> Var {
        let mut h = z;
        for l in &self.decoder {
            h = l.forward(g, store, h, layout);
        }
        self.out_proj.forward(g, store, h)
    }

    /// Full batch pass: encoders, assembly and decoder.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &BatchInputs,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<ForwardVars> {
        let layout = &batch.layout;
        let rows = layout.rows();
        let bins = self.config.mel_bins;
        if batch.mel.shape() != (rows, bins) || batch.content_mel.shape() != (rows, bins) {
            return Err(Error::shape(format!("batch mel must be {rows} x {bins}")));
        }
        if batch.pitch.shape() != (rows, PITCH_BINS) {
            return Err(Error::shape(format!("batch pitch must be {rows} x {PITCH_BINS}")));
        }
        if batch.speakers.len() != layout.batch || batch.speakers.iter().any(|&s| s >= self.speakers.len()) {
            return Err(Error::InvalidInput("batch speaker rows out of range".into()));
        }
        let mel = g.constant(batch.mel.clone());
        let cmel = g.constant(batch.content_mel.clone());
        let pitch = g.constant(batch.pitch.clone());
        let z_r = self.rhythm_code(g, store, mel, layout, noise)?;
        let z_c = self.content_code(g, store, cmel, layout);
        let z_f = self.pitch_code(g, store, pitch, layout);
        let z = self.assemble(g, store, [z_r, z_c, z_f], &batch.speakers, layout);
        let mel_hat = self.decode_var(g, store, z, layout);
        Ok(ForwardVars {
            z_r,
            z_c,
            z_f,
            z,
            mel_hat,
        })
    }

    fn check_bins(&self, mel: &MelSpectrogram) -> Result<()> {
        if mel.bins() != self.config.mel_bins {
            return Err(Error::shape(format!(
                "model expects {} mel bins, got {}",
                self.config.mel_bins,
                mel.bins()
            )));
        }
        Ok(())
    }

    /// Inference-mode rhythm code: `ceil(T / downsample) x d_r`, entries in {0, 1}.
    pub fn encode_rhythm(&self, store: &ParamStore, mel: &MelSpectrogram) -> Result<Tensor> {
        self.check_bins(mel)?;
        let mut g = Graph::new();
        let x = g.constant(mel.values.clone());
        let z = self.rhythm_code(&mut g, store, x, &SeqLayout::single(mel.frames()), None)?;
        Ok(g.value(z).clone())
    }

    pub fn encode_content(&self, store: &ParamStore, mel: &MelSpectrogram) -> Result<Tensor> {
        self.check_bins(mel)?;
        let mut g = Graph::new();
        let x = g.constant(mel.values.clone());
        let z = self.content_code(&mut g, store, x, &SeqLayout::single(mel.frames()));
        Ok(g.value(z).clone())
    }

    pub fn encode_pitch(&self, store: &ParamStore, pitch: &OneHotPitch) -> Result<Tensor> {
        if pitch.frames() == 0 {
            return Err(Error::InvalidInput("empty pitch contour".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(pitch.to_matrix());
        let z = self.pitch_code(&mut g, store, x, &SeqLayout::single(pitch.frames()));
        Ok(g.value(z).clone())
    }

    pub fn timbre(&self, store: &ParamStore, speaker: &str) -> Result<Vec<f32>> {
        let id = self.speakers.id(speaker)?;
        Ok(store.value(self.speakers.embedding).row(id).to_vec())
    }

    pub fn decode(&self, store: &ParamStore, bundle: &RepresentationBundle) -> Result<MelSpectrogram> {
        if bundle.assembled.cols() != self.slices().total() {
            return Err(Error::shape(format!(
                "bundle has {} channels, decoder expects {}",
                bundle.assembled.cols(),
                self.slices().total()
            )));
        }
        let mut g = Graph::new();
        let z = g.constant(bundle.assembled.clone());
        let y = self.decode_var(&mut g, store, z, &SeqLayout::single(bundle.frames()));
        MelSpectrogram::new(g.value(y).clone(), 12.5)
    }

    /// Inference-mode bundle of one utterance.
    pub fn bundle(
        &self,
        store: &ParamStore,
        mel: &MelSpectrogram,
        pitch: &OneHotPitch,
        speaker: &str,
    ) -> Result<RepresentationBundle> {
        if pitch.frames() != mel.frames() {
            return Err(Error::shape(format!(
                "pitch has {} frames, mel has {}",
                pitch.frames(),
                mel.frames()
            )));
        }
        assemble_bundle(
            self.encode_rhythm(store, mel)?,
            self.encode_content(store, mel)?,
            self.encode_pitch(store, pitch)?,
            self.timbre(store, speaker)?,
            mel.frames(),
            self.config.downsample,
        )
    }

    pub fn reconstruct(
        &self,
        store: &ParamStore,
        mel: &MelSpectrogram,
        pitch: &OneHotPitch,
        speaker: &str,
    ) -> Result<MelSpectrogram> {
        let b = self.bundle(store, mel, pitch, speaker)?;
        self.decode(store, &b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;
    use rand::SeedableRng;

    fn setup() -> (ParamStore, VcModel) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig {
            decoder_width: 16,
            ..EncoderConfig::tiny()
        };
        let m = VcModel::new(&mut store, &mut rng, &cfg, &["a".into(), "b".into()]).unwrap();
        (store, m)
    }

    fn mel(t: usize, seed: u64) -> MelSpectrogram {
        MelSpectrogram::new(normal(&mut ChaCha8Rng::seed_from_u64(seed), t, 80, 1.0), 12.5).unwrap()
    }

    fn pitch(t: usize, voiced: bool) -> OneHotPitch {
        OneHotPitch {
            bins: (0..t).map(|i| if voiced { 100 + (i % 50) as u16 } else { 0 }).collect(),
        }
    }

    #[test]
    fn code_shapes() {
        let (store, m) = setup();
        let s = mel(64, 1);
        let zr = m.encode_rhythm(&store, &s).unwrap();
        assert_eq!(zr.shape(), (8, 2));
        assert!(zr.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(m.encode_content(&store, &s).unwrap().shape(), (8, 16));
        assert_eq!(m.encode_pitch(&store, &pitch(64, true)).unwrap().shape(), (8, 32));
        assert_eq!(m.encode_rhythm(&store, &mel(63, 1)).unwrap().rows(), 8);
    }

    #[test]
    fn inference_is_deterministic_and_input_sensitive() {
        let (store, m) = setup();
        let s = mel(40, 2);
        assert_eq!(m.encode_rhythm(&store, &s).unwrap(), m.encode_rhythm(&store, &s).unwrap());
        let c1 = m.encode_content(&store, &s).unwrap();
        assert_eq!(c1, m.encode_content(&store, &s).unwrap());
        assert!(c1.sq_dist(&m.encode_content(&store, &mel(40, 3)).unwrap()) > 0.0);
        let p1 = m.encode_pitch(&store, &pitch(40, true)).unwrap();
        assert_eq!(p1, m.encode_pitch(&store, &pitch(40, true)).unwrap());
        assert!(p1.sq_dist(&m.encode_pitch(&store, &pitch(40, false)).unwrap()) > 0.0);
    }

    #[test]
    fn timbre_lookup() {
        let (store, m) = setup();
        assert_ne!(m.timbre(&store, "a").unwrap(), m.timbre(&store, "b").unwrap());
        let err = m.timbre(&store, "zed").unwrap_err();
        assert!(err.to_string().contains("zed"));
    }

    #[test]
    fn gradient_only_touches_the_looked_up_row() {
        let (mut store, m) = setup();
        let before = store.value(m.speakers.embedding).clone();
        let mut g = Graph::new();
        let a = lookup_timbre(&mut g, &store, &m.speakers, "a").unwrap();
        let sq = g.mul(a, a);
        let loss = g.sum_all(sq);
        let grads = g.backward(&[(loss, 1.0)]).params(&g);
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store, &grads, |_| true);
        let after = store.value(m.speakers.embedding);
        let (ia, ib) = (m.speakers.id("a").unwrap(), m.speakers.id("b").unwrap());
        assert_eq!(after.row(ib), before.row(ib));
        assert_ne!(after.row(ia), before.row(ia));
    }

    #[test]
    fn assembly_arithmetic() {
        let zr = Tensor::from_fn(8, 2, |r, _| r as f32);
        let zc = Tensor::from_fn(8, 8, |r, c| (r * 10 + c) as f32);
        let zf = Tensor::from_fn(8, 32, |r, _| -(r as f32));
        let b = assemble_bundle(zr.clone(), zc, zf, vec![0.5; 16], 64, 8).unwrap();
        assert_eq!(b.assembled.shape(), (64, 58));
        for t in 0..64 {
            assert_eq!(b.assembled.get(t, 0), (t / 8) as f32);
        }
        let b63 = assemble_bundle(
            zr.clone(),
            Tensor::zeros(8, 8),
            Tensor::zeros(8, 32),
            vec![0.0; 16],
            63,
            8,
        )
        .unwrap();
        let last = (0..63).filter(|&t| b63.assembled.get(t, 0) == 7.0).count();
        assert_eq!(last, 7);
        assert!(assemble_bundle(zr, Tensor::zeros(7, 8), Tensor::zeros(8, 32), vec![0.0; 16], 64, 8).is_err());
    }

    #[test]
    fn slices_invert_assembly() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let zr = Tensor::from_fn(5, 2, |i, c| ((i + c) % 2) as f32);
        let zc = normal(&mut r, 5, 4, 1.0);
        let zf = normal(&mut r, 5, 3, 1.0);
        let zu = vec![0.1, 0.2];
        let b = assemble_bundle(zr.clone(), zc.clone(), zf.clone(), zu.clone(), 37, 8).unwrap();
        assert_eq!(b.slice(Factor::Rhythm), upsample_tensor(&zr, 37, 8));
        assert_eq!(b.slice(Factor::Content), upsample_tensor(&zc, 37, 8));
        assert_eq!(b.slice(Factor::Pitch), upsample_tensor(&zf, 37, 8));
        assert!((0..37).all(|t| b.slice(Factor::Timbre).row(t) == zu.as_slice()));
        // upsample-then-slice equals slice-then-upsample
        let joined = Tensor::concat_cols(&[&zc, &zf]).unwrap();
        assert_eq!(
            upsample_tensor(&joined, 37, 8).slice_cols(4, 7),
            upsample_tensor(&joined.slice_cols(4, 7), 37, 8)
        );
    }

    #[test]
    fn decode_shape_and_finiteness() {
        let (store, m) = setup();
        let d = m.slices().total();
        let zero = RepresentationBundle {
            z_r: Tensor::zeros(8, 2),
            z_c: Tensor::zeros(8, 16),
            z_f: Tensor::zeros(8, 32),
            z_u: vec![0.0; 16],
            assembled: Tensor::zeros(64, d),
            slices: m.slices(),
            downsample: 8,
        };
        let out = m.decode(&store, &zero).unwrap();
        assert_eq!(out.values.shape(), (64, 80));
        assert!(out.values.is_finite());
        let rec = m.reconstruct(&store, &mel(50, 4), &pitch(50, true), "b").unwrap();
        assert_eq!(rec.frames(), 50);
        assert!(rec.values.is_finite());
    }

    #[test]
    fn batched_forward_matches_single_items() {
        let (store, m) = setup();
        let (m1, m2) = (mel(30, 5), mel(21, 6));
        let layout = SeqLayout {
            batch: 2,
            time: 30,
            lens: vec![30, 21],
        };
        let mut mel_b = Tensor::full(60, 80, -4.6);
        mel_b.data_mut()[..30 * 80].copy_from_slice(m1.values.data());
        mel_b.data_mut()[30 * 80..30 * 80 + 21 * 80].copy_from_slice(m2.values.data());
        let mut p = Tensor::zeros(60, PITCH_BINS);
        for t in 0..60 {
            p.set(t, 0, 1.0);
        }
        let batch = BatchInputs {
            layout,
            mel: mel_b.clone(),
            content_mel: mel_b,
            pitch: p,
            speakers: vec![0, 1],
        };
        let mut g = Graph::new();
        let out = m.forward(&mut g, &store, &batch, None).unwrap();
        let y = g.value(out.mel_hat);
        let single = m.reconstruct(&store, &m2, &pitch(21, false), "b").unwrap();
        let part = y.slice_rows(30, 51);
        assert!(part.max_abs_diff(&single.values) < 1e-4, "{}", part.max_abs_diff(&single.values));
    }
}
