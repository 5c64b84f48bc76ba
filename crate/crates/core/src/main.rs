use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use mapvc::checkpoint::LoadedModel;
use mapvc::converter::{ablate, convert, preview_audio, AblationRequest, ConversionRequest};
use mapvc::corpus::{write_corpus, SyntheticSpeaker};
use mapvc::evaluator::{evaluate_pairs, read_embeddings, read_pairs, EmbeddingSource, FallbackEmbedder};
use mapvc::features::{
    analyze_audio, build_dataset, read_feature_file, write_feature_file, write_wav, Dataset, FeatureConfig,
    FeatureFile, MelSpectrogram, UtteranceRecord, SAMPLE_RATE,
};
use mapvc::model::Factor;
use mapvc::trainer::{train, RunConfig};

#[derive(Parser)]
#[command(name = "mapvc", version, about = "Multi-factor voice conversion with adversarially disentangled representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract and cache features for a manifest (`audio|speaker|transcript`).
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "features")]
        cache_dir: PathBuf,
        /// Run config whose `[features]` section to use.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Convert an utterance by swapping factors, or ablate one factor.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source audio (.wav) or feature file (.feat).
        #[arg(long)]
        source: PathBuf,
        /// Speaker of a .wav source; feature files carry their own.
        #[arg(long)]
        source_speaker: Option<String>,
        #[arg(long)]
        rhythm_target: Option<PathBuf>,
        #[arg(long)]
        pitch_target: Option<PathBuf>,
        /// Speaker of a .wav pitch target.
        #[arg(long)]
        pitch_speaker: Option<String>,
        /// Speaker id whose timbre embedding to use.
        #[arg(long)]
        timbre_target: Option<String>,
        /// Quantize the pitch target with the source speaker's statistics.
        #[arg(long)]
        pitch_absolute: bool,
        /// Decode the source with one factor zeroed instead of converting.
        #[arg(long, value_name = "FACTOR")]
        ablate: Option<Factor>,
        #[arg(long, default_value = "converted")]
        out_dir: PathBuf,
        /// Also write a Griffin-Lim waveform preview.
        #[arg(long)]
        preview_audio: bool,
    },
    /// Score converted/reference feature pairs.
    Evaluate {
        /// Lines `ref.feat|hyp.feat[|ref transcript|hyp transcript]`.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "eval")]
        out_dir: PathBuf,
        /// Embedding file (`utterance_id dim v1 ... vdim`).
        #[arg(long, conflicts_with = "fallback_embedder")]
        embeddings: Option<PathBuf>,
        /// Feature cache to train the built-in speaker classifier on.
        #[arg(long)]
        fallback_embedder: Option<PathBuf>,
    },
    /// Write a small synthetic two-speaker corpus with a manifest.
    SynthCorpus {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        per_speaker: usize,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Features {
            manifest,
            cache_dir,
            config,
        } => {
            let features = match config {
                Some(p) => RunConfig::load(&p)?.features,
                None => FeatureConfig::default(),
            };
            let ds = build_dataset(&manifest, &features, &cache_dir)?;
            info!("{} utterances from {} speakers cached in {}", ds.records.len(), ds.stats.len(), cache_dir.display());
        }
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config)?;
            let manifest = cfg.data.manifest.as_ref().context("config has no data.manifest")?;
            let ds = build_dataset(manifest, &cfg.features, &cfg.data.cache_dir)?;
            let summary = train(&ds, &cfg, resume.as_deref())?;
            if let Some(last) = summary.reports.last() {
                info!("finished at step {}: l_rec {:.4} l_adv {:.4}", last.step + 1, last.l_rec, last.l_adv);
            }
            println!("{}", summary.final_checkpoint.display());
        }
        Command::Convert {
            checkpoint,
            source,
            source_speaker,
            rhythm_target,
            pitch_target,
            pitch_speaker,
            timbre_target,
            pitch_absolute,
            ablate: removed,
            out_dir,
            preview_audio: preview,
        } => {
            let model = LoadedModel::load(&checkpoint)?;
            let features = &model.config.features;
            let src = load_record(&model, &source, source_speaker.as_deref(), "--source-speaker")?;
            fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            let (mel, label, speaker) = if let Some(f) = removed {
                if rhythm_target.is_some() || pitch_target.is_some() || timbre_target.is_some() {
                    bail!("--ablate cannot be combined with conversion targets");
                }
                let speaker = src.speaker_id.clone();
                let mel = ablate(&AblationRequest { source: src.clone(), removed: f }, &model)?;
                (mel, format!("without-{f}"), speaker)
            } else {
                // a rhythm target's pitch is unused, so any speaker's statistics do
                let rhythm = rhythm_target
                    .map(|p| load_record(&model, &p, Some(&src.speaker_id), ""))
                    .transpose()?;
                let pitch = pitch_target
                    .map(|p| load_record(&model, &p, pitch_speaker.as_deref(), "--pitch-speaker"))
                    .transpose()?;
                let req = ConversionRequest {
                    source: src.clone(),
                    rhythm_target: rhythm,
                    pitch_target: pitch,
                    timbre_target,
                    pitch_absolute,
                };
                let ty = req.conversion_type();
                if ty.is_reconstruction() {
                    warn!("no conversion targets given; reconstructing the source");
                }
                let out = convert(&req, &model)?;
                (out.mel, ty.to_string().replace('+', "-"), out.timbre_speaker)
            };
            println!("{}", label.replace('-', "+"));
            let stem = format!("{}_{label}", src.utterance_id);
            let path = write_mel(&out_dir, &stem, &speaker, mel.clone(), features)?;
            println!("{}", path.display());
            if preview {
                let wav = out_dir.join(format!("{stem}.wav"));
                write_wav(&wav, &preview_audio(&mel, features)?, SAMPLE_RATE)?;
                println!("{}", wav.display());
            }
        }
        Command::Evaluate {
            pairs,
            out_dir,
            embeddings,
            fallback_embedder,
        } => {
            let pairs = read_pairs(&pairs)?;
            let summary = if let Some(p) = embeddings {
                let table = read_embeddings(&p)?;
                evaluate_pairs(&pairs, EmbeddingSource::Table(&table), &out_dir)?
            } else if let Some(cache) = fallback_embedder {
                let ds = Dataset::load_cache(&cache)?;
                let e = FallbackEmbedder::train(&ds.records, 300, 0)?;
                evaluate_pairs(&pairs, EmbeddingSource::Fallback(&e), &out_dir)?
            } else {
                evaluate_pairs(&pairs, EmbeddingSource::None, &out_dir)?
            };
            println!("pairs {}", summary.scores.len());
            println!("mean_mcd_db {:.4}", summary.mean_mcd_db);
            if let Some(w) = summary.wer_percent {
                println!("wer_percent {w:.2}");
            }
            if let Some(s) = &summary.similarity {
                if let (Some(a), Some(b)) = (s.same_median(), s.different_median()) {
                    println!("similarity_median same {a:.4} different {b:.4}");
                }
            }
        }
        Command::SynthCorpus {
            out_dir,
            per_speaker,
            seconds,
            seed,
        } => {
            let m = write_corpus(&out_dir, &SyntheticSpeaker::pair(), per_speaker, seconds, seed)?;
            println!("{}", m.display());
        }
    }
    Ok(())
}

/// Features for a .feat file as stored, or computed from audio using the
/// checkpoint's statistics for `speaker`.
fn load_record(model: &LoadedModel, path: &Path, speaker: Option<&str>, flag: &str) -> Result<UtteranceRecord> {
    let is_feat = path.extension().is_some_and(|e| e == "feat");
    if is_feat {
        let f = read_feature_file(path)?;
        if f.fingerprint != model.config.features.fingerprint() {
            bail!("{} was extracted with different feature settings than the checkpoint", path.display());
        }
        return Ok(UtteranceRecord::from_feature_file(f)?);
    }
    let Some(speaker) = speaker else {
        bail!("{flag} is required for audio input {}", path.display());
    };
    Ok(analyze_audio(path, speaker, &model.config.features, model.stats(speaker)?)?)
}

fn write_mel(dir: &Path, stem: &str, speaker: &str, mel: MelSpectrogram, cfg: &FeatureConfig) -> Result<PathBuf> {
    let path = dir.join(format!("{stem}.feat"));
    let file = FeatureFile {
        utterance_id: stem.to_string(),
        speaker_id: speaker.to_string(),
        transcript: None,
        source: None,
        fingerprint: cfg.fingerprint(),
        mel,
        pitch: None,
    };
    write_feature_file(&path, &file)?;
    Ok(path)
}
