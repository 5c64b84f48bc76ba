//! Loss composition, the reconstruction-weight schedule, batching and the
//! joint optimization loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{adversary_forward, sample_mask, FactorMask, MAPNetwork, MAP_PREFIX};
use crate::checkpoint::{AdamState, Checkpoint, CheckpointHeader};
use crate::error::{Error, Result};
use crate::features::{fit_rows, random_resample, Dataset, FeatureConfig, ResampleRanges, SpeakerStats, UtteranceRecord, PITCH_BINS};
use crate::model::{BatchInputs, EncoderConfig, SpeakerTable, VcModel};
use crate::nn::{Adam, Graph, ParamId, ParamStore, SeqLayout, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub beta_initial: f64,
    pub beta_decay: f64,
    pub beta_interval_steps: u64,
    pub grl_lambda: f64,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_every: u64,
    /// 0 disables periodic validation.
    pub validate_every: u64,
    /// Batches per length-sorted bucket.
    pub bucket_batches: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta_initial: 1.0,
            beta_decay: 0.9,
            beta_interval_steps: 500_000,
            grl_lambda: 1.0,
            learning_rate: 1e-4,
            batch_size: 64,
            total_steps: 800_000,
            seed: 0,
            checkpoint_every: 10_000,
            validate_every: 5_000,
            bucket_batches: 4,
        }
    }
}

impl TrainingConfig {
    /// Small-corpus profile: batch 8, 5000 steps, weight decay every 2000.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            total_steps: 5000,
            beta_interval_steps: 2000,
            checkpoint_every: 1000,
            validate_every: 500,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta_initial > 0.0) {
            return Err(Error::Config("need alpha >= 0 and beta_initial > 0".into()));
        }
        if !(self.beta_decay > 0.0 && self.beta_decay <= 1.0) || self.beta_interval_steps == 0 {
            return Err(Error::Config("need 0 < beta_decay <= 1 and beta_interval_steps > 0".into()));
        }
        if !(self.grl_lambda >= 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("need grl_lambda >= 0 and learning_rate > 0".into()));
        }
        if self.batch_size == 0 || self.bucket_batches == 0 {
            return Err(Error::Config("batch_size and bucket_batches must be positive".into()));
        }
        Ok(())
    }
}

/// How the masked-slice L1 is normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L1Normalization {
    /// Divide by valid frames times slice width, then average over the batch.
    Mean,
    /// Sum over the slice, averaged over the batch only.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub heads: usize,
    /// Hidden width as a multiple of the representation width.
    pub hidden_multiplier: usize,
    pub l1_normalization: L1Normalization,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self {
            heads: 3,
            hidden_multiplier: 4,
            l1_normalization: L1Normalization::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            cache_dir: PathBuf::from("features"),
            out_dir: PathBuf::from("run"),
        }
    }
}

/// Everything that determines a run; one TOML section per part.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureConfig,
    pub model: EncoderConfig,
    pub adversary: AdversaryConfig,
    pub augment: ResampleRanges,
    pub training: TrainingConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            training: TrainingConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.model.mel_bins != self.features.mel_bins {
            return Err(Error::Config("model.mel_bins must equal features.mel_bins".into()));
        }
        if self.adversary.heads == 0 || self.adversary.hidden_multiplier == 0 {
            return Err(Error::Config("adversary needs heads > 0 and hidden_multiplier > 0".into()));
        }
        let a = &self.augment;
        if a.seg_min == 0 || a.seg_min > a.seg_max || !(a.rate_min > 0.0 && a.rate_min <= a.rate_max) {
            return Err(Error::Config("invalid resampling ranges".into()));
        }
        Ok(())
    }

    /// Parses a TOML file; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(m) = cfg.data.manifest.as_mut() {
            fix(m);
        }
        fix(&mut cfg.data.cache_dir);
        fix(&mut cfg.data.out_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Mean squared error over all entries.
pub fn reconstruction_loss(s: &Tensor, s_hat: &Tensor) -> Result<f64> {
    if s.shape() != s_hat.shape() || s.is_empty() {
        return Err(Error::shape(format!(
            "reconstruction loss of {:?} against {:?}",
            s.shape(),
            s_hat.shape()
        )));
    }
    Ok(s.sq_dist(s_hat) / s.len() as f64)
}

/// `beta_initial * beta_decay ^ floor(step / beta_interval_steps)`.
pub fn beta_schedule(step: u64, cfg: &TrainingConfig) -> f64 {
    // repeated products, not powi: 1.0 * 0.9 * 0.9 == 0.81 exactly
    let mut beta = cfg.beta_initial;
    for _ in 0..step / cfg.beta_interval_steps {
        beta *= cfg.beta_decay;
        if beta == 0.0 {
            break;
        }
    }
    beta
}

pub fn total_loss(l_adv: f64, l_rec: f64, step: u64, cfg: &TrainingConfig) -> f64 {
    cfg.alpha * l_adv + beta_schedule(step, cfg) * l_rec
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub l_adv: f64,
    pub l_rec: f64,
    pub beta: f64,
    pub total: f64,
}

impl StepReport {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.l_adv, self.l_rec, self.beta, self.total)
    }
}

pub const LOSS_LOG_HEADER: &str = "step,l_adv,l_rec,beta,total";

fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    r.set_stream(index);
    r
}

const DOMAIN_INIT: u64 = 1;
const DOMAIN_ORDER: u64 = 2;
const DOMAIN_STEP: u64 = 3;

/// Batches of one epoch: shuffle, sort buckets of `bucket_batches` batches
/// by length, cut into batches and shuffle batch order.
pub fn epoch_batches(lens: &[usize], batch_size: usize, bucket_batches: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(seed, DOMAIN_ORDER, epoch);
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for bucket in order.chunks(batch_size * bucket_batches) {
        let mut bucket = bucket.to_vec();
        bucket.sort_by_key(|&i| lens[i]);
        batches.extend(bucket.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    batches
}

fn pitch_pad_row(floor: f32, mel_bins: usize) -> Vec<f32> {
    let mut row = vec![floor; mel_bins + PITCH_BINS];
    row[mel_bins..].fill(0.0);
    row[mel_bins] = 1.0;
    row
}

/// Pads a batch with the log floor (mel) and the unvoiced bin (pitch). With
/// `augment`, the content and pitch inputs of each item are jointly
/// resampled and fit back to the item's length.
pub fn prepare_batch(
    records: &[&UtteranceRecord],
    speakers: &SpeakerTable,
    log_floor: f32,
    augment: Option<(&ResampleRanges, &mut dyn RngCore)>,
) -> Result<BatchInputs> {
    if records.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let bins = records[0].mel.bins();
    let lens: Vec<usize> = records.iter().map(|r| r.frames()).collect();
    let time = *lens.iter().max().unwrap();
    let layout = SeqLayout {
        batch: records.len(),
        time,
        lens,
    };
    let rows = layout.rows();
    let mut mel = Tensor::full(rows, bins, log_floor);
    let mut content_mel = Tensor::full(rows, bins, log_floor);
    let mut pitch = Tensor::zeros(rows, PITCH_BINS);
    let pad = pitch_pad_row(log_floor, bins);
    let mut augment = augment;
    let mut speaker_rows = Vec::with_capacity(records.len());
    for (b, r) in records.iter().enumerate() {
        if r.mel.bins() != bins || r.onehot_pitch.frames() != r.frames() {
            return Err(Error::shape(format!("record `{}` has misaligned features", r.utterance_id)));
        }
        speaker_rows.push(speakers.id(&r.speaker_id)?);
        let len = r.frames();
        let joint = Tensor::concat_cols(&[&r.mel.values, &r.onehot_pitch.to_matrix()])?;
        let joint = match augment.as_mut() {
            Some((ranges, rng)) => fit_rows(&random_resample(&joint, ranges, &mut **rng), len, &pad),
            None => joint,
        };
        for t in 0..time {
            let dst = layout.row(b, t);
            if t < len {
                mel.row_mut(dst).copy_from_slice(r.mel.values.row(t));
                content_mel.row_mut(dst).copy_from_slice(&joint.row(t)[..bins]);
                pitch.row_mut(dst).copy_from_slice(&joint.row(t)[bins..]);
            } else {
                pitch.set(dst, 0, 1.0);
            }
        }
    }
    Ok(BatchInputs {
        layout,
        mel,
        content_mel,
        pitch,
        speakers: speaker_rows,
    })
}

/// Parameters, model and adversary built from a config with its seed.
pub fn build_network(config: &RunConfig, speakers: &[String]) -> Result<(ParamStore, VcModel, MAPNetwork)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = stream_rng(config.training.seed, DOMAIN_INIT, 0);
    let model = VcModel::new(&mut store, &mut rng, &config.model, speakers)?;
    let d = model.slices().total();
    let map = MAPNetwork::new(
        &mut store,
        &mut rng,
        d,
        config.adversary.heads,
        config.adversary.hidden_multiplier * d,
    )?;
    Ok((store, model, map))
}

/// Exponential moving averages of the logged losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningLoss {
    pub l_adv: f64,
    pub l_rec: f64,
    pub total: f64,
}

impl RunningLoss {
    fn update(&mut self, r: &StepReport, first: bool) {
        let k = if first { 1.0 } else { 0.02 };
        self.l_adv += k * (r.l_adv - self.l_adv);
        self.l_rec += k * (r.l_rec - self.l_rec);
        self.total += k * (r.total - self.total);
    }
}

/// Training state: parameters, optimizer and step counter.
pub struct Trainer {
    pub config: RunConfig,
    pub model: VcModel,
    pub map: MAPNetwork,
    pub store: ParamStore,
    pub adam: Adam,
    pub step: u64,
    pub running: RunningLoss,
    pub speaker_stats: BTreeMap<String, SpeakerStats>,
    epoch_cache: Option<(u64, Vec<Vec<usize>>)>,
}

/// Gradients of one step before the optimizer sees them.
pub struct StepGradients {
    pub report: StepReport,
    pub grads: Vec<(ParamId, Tensor)>,
}

impl Trainer {
    pub fn new(config: &RunConfig, speaker_stats: BTreeMap<String, SpeakerStats>) -> Result<Self> {
        let speakers: Vec<String> = speaker_stats.keys().cloned().collect();
        let (store, model, map) = build_network(config, &speakers)?;
        let adam = Adam::new(&store, config.training.learning_rate);
        Ok(Self {
            config: config.clone(),
            model,
            map,
            store,
            adam,
            step: 0,
            running: RunningLoss::default(),
            speaker_stats,
            epoch_cache: None,
        })
    }

    pub fn for_dataset(config: &RunConfig, dataset: &Dataset) -> Result<Self> {
        if dataset.records.is_empty() {
            return Err(Error::Config("dataset has no utterances".into()));
        }
        if dataset.features.fingerprint() != config.features.fingerprint() {
            return Err(Error::Config(
                "dataset features were extracted with a different feature config".into(),
            ));
        }
        Self::new(config, dataset.stats.clone())
    }

    /// Forward and backward pass of step `self.step` on `batch` without
    /// updating anything. With `adversary` false the adversarial branch is
    /// left out of the backward pass entirely (its random draws still happen).
    pub fn gradients(&self, batch: &[&UtteranceRecord], adversary: bool) -> Result<StepGradients> {
        let cfg = &self.config.training;
        let step = self.step;
        let mut rng = stream_rng(cfg.seed, DOMAIN_STEP, step);
        let inputs = prepare_batch(
            batch,
            &self.model.speakers,
            self.config.features.log_floor(),
            Some((&self.config.augment, &mut rng)),
        )?;
        let slices = self.model.slices();
        let masks: Vec<FactorMask> = (0..batch.len()).map(|_| sample_mask(&mut rng, &slices)).collect();

        let mut g = Graph::new();
        let fv = self.model.forward(&mut g, &self.store, &inputs, Some(&mut rng))?;
        let layout = &inputs.layout;
        let valid: usize = layout.lens.iter().sum();
        let w = 1.0 / (valid * self.config.model.mel_bins) as f32;
        let row_w: Vec<f32> = (0..layout.batch)
            .flat_map(|b| (0..layout.time).map(move |t| (b, t)))
            .map(|(b, t)| if t < layout.lens[b] { w } else { 0.0 })
            .collect();
        let l_rec = g.masked_mse(fv.mel_hat, inputs.mel.clone(), row_w);
        // encoders see -lambda * alpha * dL_adv/dZ; the adversary sees dL_adv
        let adv = adversary_forward(
            &mut g,
            &self.store,
            fv.z,
            &masks,
            layout,
            &self.map,
            (cfg.grl_lambda * cfg.alpha) as f32,
        )?;
        let mut l_adv_var = adv.loss;
        if self.config.adversary.l1_normalization == L1Normalization::Sum {
            let scale: f32 = masks
                .iter()
                .zip(&layout.lens)
                .map(|(m, &l)| (m.width() * l) as f32)
                .sum::<f32>()
                / masks.len() as f32;
            l_adv_var = g.scale(adv.loss, scale);
        }
        let l_adv = g.value(l_adv_var).item() as f64;
        let l_rec_v = g.value(l_rec).item() as f64;
        let beta = beta_schedule(step, cfg);
        if !l_adv.is_finite() || !l_rec_v.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                l_adv,
                l_rec: l_rec_v,
            });
        }
        let mut seeds = vec![(l_rec, beta as f32)];
        if adversary {
            seeds.push((l_adv_var, 1.0));
        }
        let grads = g.backward(&seeds).params(&g);
        Ok(StepGradients {
            report: StepReport {
                step,
                l_adv,
                l_rec: l_rec_v,
                beta,
                total: total_loss(l_adv, l_rec_v, step, cfg),
            },
            grads,
        })
    }

    /// One joint update of every parameter.
    pub fn train_step(&mut self, batch: &[&UtteranceRecord]) -> Result<StepReport> {
        let StepGradients { report, grads } = self.gradients(batch, true)?;
        self.adam.step(&mut self.store, &grads, |_| true);
        self.running.update(&report, self.step == 0);
        self.step += 1;
        Ok(report)
    }

    /// Record indices of the batch used at `step`.
    pub fn batch_indices(&mut self, lens: &[usize], step: u64) -> Vec<usize> {
        let t = &self.config.training;
        let per_epoch = lens.len().div_ceil(t.batch_size) as u64;
        let epoch = step / per_epoch;
        if self.epoch_cache.as_ref().map(|c| c.0) != Some(epoch) {
            let batches = epoch_batches(lens, t.batch_size, t.bucket_batches, t.seed, epoch);
            self.epoch_cache = Some((epoch, batches));
        }
        let batches = &self.epoch_cache.as_ref().unwrap().1;
        batches[(step % per_epoch) as usize].clone()
    }

    /// Updates only the adversary on fixed, noise-free representations of
    /// `batch` with the given masks; returns the loss before the update.
    pub fn adversary_step(&mut self, batch: &[&UtteranceRecord], masks: &[FactorMask], adam: &mut Adam) -> Result<f64> {
        let inputs = prepare_batch(batch, &self.model.speakers, self.config.features.log_floor(), None)?;
        let mut g = Graph::new();
        let fv = self.model.forward(&mut g, &self.store, &inputs, None)?;
        let z = g.value(fv.z).clone();
        let mut g = Graph::new();
        let z = g.constant(z);
        let adv = adversary_forward(&mut g, &self.store, z, masks, &inputs.layout, &self.map, self.config.training.grl_lambda as f32)?;
        let loss = g.value(adv.loss).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                l_adv: loss,
                l_rec: 0.0,
            });
        }
        let grads = g.backward(&[(adv.loss, 1.0)]).params(&g);
        adam.step(&mut self.store, &grads, |n| n.starts_with(MAP_PREFIX));
        Ok(loss)
    }

    /// Inference-mode reconstruction MSE averaged over `records`.
    pub fn validation_loss(&self, records: &[UtteranceRecord]) -> Result<f64> {
        let mut sum = 0.0;
        for r in records {
            let out = self.model.reconstruct(&self.store, &r.mel, &r.onehot_pitch, &r.speaker_id)?;
            sum += reconstruction_loss(&r.mel.values, &out.values)?;
        }
        Ok(sum / records.len().max(1) as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .store
            .ids()
            .map(|id| (self.store.name(id).to_string(), self.store.value(id).clone()))
            .collect();
        Checkpoint {
            header: CheckpointHeader::new(
                self.step,
                &self.config,
                self.model.speakers.speakers(),
                self.model.slices(),
                self.speaker_stats.values().cloned().collect(),
                self.running,
            ),
            params,
            adam: Some(AdamState {
                t: self.adam.t,
                m: self.adam.m.clone(),
                v: self.adam.v.clone(),
            }),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let stats: BTreeMap<String, SpeakerStats> = ck
            .header
            .speaker_stats
            .iter()
            .map(|s| (s.speaker_id.clone(), s.clone()))
            .collect();
        let config = ck.header.config.clone();
        let (mut store, model, map) = build_network(&config, &ck.header.speakers)?;
        ck.load_into(&mut store)?;
        let mut adam = Adam::new(&store, config.training.learning_rate);
        if let Some(a) = &ck.adam {
            if a.m.len() != adam.m.len() || a.v.len() != adam.v.len() {
                return Err(Error::Format("optimizer state does not match the parameters".into()));
            }
            adam.t = a.t;
            adam.m = a.m.clone();
            adam.v = a.v.clone();
        }
        Ok(Self {
            config,
            model,
            map,
            store,
            adam,
            step: ck.header.step,
            running: ck.header.running,
            speaker_stats: stats,
            epoch_cache: None,
        })
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub reports: Vec<StepReport>,
    pub final_checkpoint: PathBuf,
}

/// Runs `config.training.total_steps` steps (continuing from `resume` when
/// given), logging to `<out_dir>/loss.csv` and checkpointing into `out_dir`.
pub fn train(dataset: &Dataset, config: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    config.validate()?;
    if dataset.records.is_empty() {
        return Err(Error::Config("dataset has no utterances".into()));
    }
    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut t = Trainer::from_checkpoint(&ck)?;
            // schedule and logging knobs may change on resume; the model may not
            if t.config.model != config.model || t.config.adversary != config.adversary {
                return Err(Error::Config("resume config changes the architecture".into()));
            }
            t.config.training.total_steps = config.training.total_steps;
            t.config.training.checkpoint_every = config.training.checkpoint_every;
            t.config.training.validate_every = config.training.validate_every;
            t.config.data = config.data.clone();
            t
        }
        None => Trainer::for_dataset(config, dataset)?,
    };
    for r in &dataset.records {
        trainer.model.speakers.id(&r.speaker_id)?;
    }
    let out_dir = config.data.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    fs::write(out_dir.join("config.toml"), trainer.config.to_toml()?).map_err(|e| Error::io(&out_dir, e))?;

    let log_path = out_dir.join("loss.csv");
    let mut log_text = String::from(LOSS_LOG_HEADER);
    log_text.push('\n');
    if trainer.step > 0 {
        if let Ok(old) = fs::read_to_string(&log_path) {
            for line in old.lines().skip(1) {
                let s: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if s.is_some_and(|s| s < trainer.step) {
                    log_text.push_str(line);
                    log_text.push('\n');
                }
            }
        }
    }
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    log.write_all(log_text.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
    let val_path = out_dir.join("validation.csv");
    let mut val_log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&val_path)
        .map_err(|e| Error::io(&val_path, e))?;

    let lens: Vec<usize> = dataset.records.iter().map(UtteranceRecord::frames).collect();
    let total = trainer.config.training.total_steps;
    let mut reports = Vec::new();
    while trainer.step < total {
        let step = trainer.step;
        let idx = trainer.batch_indices(&lens, step);
        let batch: Vec<&UtteranceRecord> = idx.iter().map(|&i| &dataset.records[i]).collect();
        let report = match trainer.train_step(&batch) {
            Ok(r) => r,
            Err(e) => {
                if let Error::NonFiniteLoss { .. } = e {
                    let ids: Vec<&str> = batch.iter().map(|r| r.utterance_id.as_str()).collect();
                    log::error!("aborting at step {step}; batch {ids:?}");
                }
                return Err(e);
            }
        };
        writeln!(log, "{}", report.csv_line()).map_err(|e| Error::io(&log_path, e))?;
        reports.push(report);
        let t = &trainer.config.training;
        if step % 100 == 0 {
            log::info!(
                "step {step}: l_rec {:.4} l_adv {:.4} total {:.4}",
                report.l_rec,
                report.l_adv,
                report.total
            );
        }
        let done = trainer.step;
        if t.validate_every > 0 && done % t.validate_every == 0 {
            let v = trainer.validation_loss(&dataset.records)?;
            writeln!(val_log, "{done},{v}").map_err(|e| Error::io(&val_path, e))?;
        }
        if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 && done < total {
            trainer.checkpoint().save(out_dir.join(format!("step_{done:08}.ckpt")))?;
        }
    }
    let final_checkpoint = out_dir.join("final.ckpt");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary {
        reports,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{MelSpectrogram, OneHotPitch, PitchContour};
    use crate::nn::normal;

    #[test]
    fn beta_values() {
        let c = TrainingConfig::default();
        assert_eq!(beta_schedule(0, &c), 1.0);
        assert_eq!(beta_schedule(499_999, &c), 1.0);
        assert_eq!(beta_schedule(500_000, &c), 0.9);
        assert_eq!(beta_schedule(1_250_000, &c), 0.81);
        let mut prev = f64::INFINITY;
        for s in (0..5_000_000).step_by(250_000) {
            let b = beta_schedule(s, &c);
            assert!(b <= prev);
            prev = b;
        }
    }

    #[test]
    fn total_loss_values() {
        let c = TrainingConfig::default();
        assert!((total_loss(2.0, 3.0, 0, &c) - 3.2).abs() < 1e-6);
        assert_eq!(total_loss(0.0, 0.0, 7, &c), 0.0);
        for step in [0, 600_000, 2_000_000] {
            assert!((total_loss(1.0, 0.0, step, &c) - 0.1).abs() < 1e-7);
        }
    }

    #[test]
    fn reconstruction_mse() {
        let z = Tensor::zeros(4, 80);
        let o = Tensor::full(4, 80, 1.0);
        assert_eq!(reconstruction_loss(&z, &z).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&z, &o).unwrap(), 1.0);
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0, 2.5, 1.0], vec![0.5, 1.0, 3.0]]).unwrap();
        // (1 + 0.25 + 4 + 0 + 4 + 1) / 6
        assert!((reconstruction_loss(&a, &b).unwrap() - 10.25 / 6.0).abs() < 1e-12);
        assert!(reconstruction_loss(&a, &z).is_err());
    }

    #[test]
    fn epochs_cover_every_item_once() {
        let lens: Vec<usize> = (0..23).map(|i| 10 + (i * 7) % 13).collect();
        let batches = epoch_batches(&lens, 4, 2, 9, 3);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
        assert_eq!(batches, epoch_batches(&lens, 4, 2, 9, 3));
        assert_ne!(batches, epoch_batches(&lens, 4, 2, 9, 4));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = RunConfig::desk();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = toml::from_str("[training]\nalpha = 0.5\n").unwrap();
        assert_eq!(partial.training.alpha, 0.5);
        assert_eq!(partial.training.batch_size, 64);
        assert!(toml::from_str::<RunConfig>("[training]\nalhpa = 0.5\n").is_err());
    }

    pub(crate) fn toy_records() -> Vec<UtteranceRecord> {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        (0..4)
            .map(|i| {
                let t = 20 + 5 * i;
                UtteranceRecord {
                    utterance_id: format!("u{i}"),
                    speaker_id: if i % 2 == 0 { "a".into() } else { "b".into() },
                    mel: MelSpectrogram::new(normal(&mut r, t, 80, 1.0), 12.5).unwrap(),
                    f0: PitchContour { f0_hz: vec![150.0; t] },
                    onehot_pitch: OneHotPitch {
                        bins: (0..t).map(|k| (k % 40) as u16).collect(),
                    },
                    transcript: None,
                    source: None,
                }
            })
            .collect()
    }

    pub(crate) fn toy_config() -> RunConfig {
        let mut c = RunConfig::desk();
        c.model = EncoderConfig {
            decoder_layers: 1,
            decoder_width: 16,
            ..EncoderConfig::tiny()
        };
        c.training.batch_size = 2;
        c.training.learning_rate = 1e-3;
        c
    }

    pub(crate) fn toy_stats() -> BTreeMap<String, SpeakerStats> {
        ["a", "b"]
            .iter()
            .map(|s| {
                (
                    s.to_string(),
                    SpeakerStats {
                        speaker_id: s.to_string(),
                        logf0_mean: 5.0,
                        logf0_std: 0.2,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn alpha_zero_matches_plain_autoencoder_gradients() {
        let recs = toy_records();
        let batch: Vec<&UtteranceRecord> = recs.iter().take(3).collect();
        let mut cfg = toy_config();
        cfg.training.alpha = 0.0;
        let t = Trainer::new(&cfg, toy_stats()).unwrap();
        let joint = t.gradients(&batch, true).unwrap();
        let plain = t.gradients(&batch, false).unwrap();
        let plain_by_id: BTreeMap<ParamId, &Tensor> = plain.grads.iter().map(|(i, g)| (*i, g)).collect();
        let mut map_moved = false;
        for (id, ga) in &joint.grads {
            if t.store.name(*id).starts_with(MAP_PREFIX) {
                assert!(!plain_by_id.contains_key(id));
                map_moved |= ga.data().iter().any(|&v| v != 0.0);
            } else {
                assert_eq!(ga, plain_by_id[id], "{}", t.store.name(*id));
            }
        }
        assert_eq!(plain_by_id.len() + t.map.heads.len() * 6, joint.grads.len());
        assert!(map_moved);
        // grl scale zero: the adversarial branch contributes nothing upstream
        cfg.training.grl_lambda = 0.0;
        let t = Trainer::new(&cfg, toy_stats()).unwrap();
        let joint = t.gradients(&batch, true).unwrap();
        let plain = t.gradients(&batch, false).unwrap();
        for ((ia, ga), (_, gb)) in joint.grads.iter().zip(&plain.grads) {
            if !t.store.name(*ia).starts_with(MAP_PREFIX) {
                assert_eq!(ga, gb);
            }
        }
    }

    #[test]
    fn seeded_steps_repeat_exactly() {
        let recs = toy_records();
        let run = || {
            let mut t = Trainer::new(&toy_config(), toy_stats()).unwrap();
            let lens: Vec<usize> = recs.iter().map(|r| r.frames()).collect();
            (0..6)
                .map(|s| {
                    let idx = t.batch_indices(&lens, s);
                    let b: Vec<&UtteranceRecord> = idx.iter().map(|&i| &recs[i]).collect();
                    t.train_step(&b).unwrap()
                })
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|r| r.l_adv.is_finite() && r.l_rec > 0.0));
    }

    #[test]
    fn padding_rows_are_floor_and_unvoiced() {
        let recs = toy_records();
        let t = Trainer::new(&toy_config(), toy_stats()).unwrap();
        let b = prepare_batch(&[&recs[0], &recs[3]], &t.model.speakers, -4.6, None).unwrap();
        assert_eq!(b.layout.time, 35);
        let pad = b.layout.row(0, 30);
        assert!(b.mel.row(pad).iter().all(|&v| v == -4.6));
        assert_eq!(b.pitch.get(pad, 0), 1.0);
        assert_eq!(b.speakers, vec![0, 1]);
    }

    fn toy_dataset() -> Dataset {
        Dataset {
            records: toy_records(),
            stats: toy_stats(),
            features: FeatureConfig::default(),
        }
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset();
        let mut cfg = toy_config();
        cfg.training.total_steps = 8;
        cfg.training.checkpoint_every = 4;
        cfg.training.validate_every = 4;
        cfg.data.out_dir = dir.path().join("full");
        let full = train(&ds, &cfg, None).unwrap();
        assert_eq!(full.reports.len(), 8);
        let log = fs::read_to_string(dir.path().join("full/loss.csv")).unwrap();
        assert_eq!(log.lines().count(), 9);
        assert_eq!(log.lines().next(), Some(LOSS_LOG_HEADER));

        let mid = dir.path().join("full/step_00000004.ckpt");
        cfg.data.out_dir = dir.path().join("resumed");
        let resumed = train(&ds, &cfg, Some(&mid)).unwrap();
        assert_eq!(resumed.reports, full.reports[4..]);
        let a = Checkpoint::load(&full.final_checkpoint).unwrap();
        let b = Checkpoint::load(&resumed.final_checkpoint).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.adam, b.adam);
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config();
        cfg.data.out_dir = dir.path().join("x");
        let ds = Dataset {
            records: vec![],
            stats: toy_stats(),
            features: FeatureConfig::default(),
        };
        assert!(matches!(train(&ds, &cfg, None), Err(Error::Config(_))));
        assert!(!cfg.data.out_dir.exists());
    }

    #[test]
    fn checkpoint_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let recs = toy_records();
        let mut t = Trainer::new(&toy_config(), toy_stats()).unwrap();
        t.train_step(&[&recs[0], &recs[1]]).unwrap();
        let ck = t.checkpoint();
        let p = dir.path().join("c.ckpt");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.params, ck.params);
        assert_eq!(back.adam, ck.adam);
        assert_eq!(back.header.step, 1);
        let loaded = back.restore().unwrap();
        let r = &recs[2];
        assert_eq!(
            loaded.model.reconstruct(&loaded.store, &r.mel, &r.onehot_pitch, &r.speaker_id).unwrap(),
            t.model.reconstruct(&t.store, &r.mel, &r.onehot_pitch, &r.speaker_id).unwrap()
        );
        fs::write(&p, b"MAPVCCK1junk").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
