//! Objective metrics: mel-cepstral distortion with DTW alignment, word error
//! rate, and speaker-embedding similarity histograms.

use std::collections::BTreeMap;
use std::f64::consts::{LN_10, PI, SQRT_2};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{read_feature_file, MelSpectrogram, UtteranceRecord};
use crate::nn::{Adam, Graph, Linear, ParamStore, Tensor};

pub const CEPSTRAL_ORDER: usize = 13;
pub const HISTOGRAM_BINS: usize = 20;

/// Recorded at the top of every report.
pub const MCD_CONVENTION: &str =
    "mcd: c1..c13 of an orthonormal DCT-II over log-mel bands, DTW on squared cepstral distance";

/// `(10 / ln 10) sqrt(2)`: dB per unit of cepstral Euclidean distance.
pub fn mcd_scale() -> f64 {
    10.0 / LN_10 * SQRT_2
}

/// Per-frame cepstral coefficients `c1..=c13`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelCepstra {
    pub frames: Vec<[f64; CEPSTRAL_ORDER]>,
}

impl MelCepstra {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Orthonormal type-II DCT of each log-mel frame, keeping `c1..c13`.
pub fn mel_cepstra(mel: &MelSpectrogram) -> MelCepstra {
    let m = mel.bins();
    let w = (2.0 / m as f64).sqrt();
    let basis: Vec<Vec<f64>> = (1..=CEPSTRAL_ORDER)
        .map(|k| (0..m).map(|n| w * (PI * k as f64 * (n as f64 + 0.5) / m as f64).cos()).collect())
        .collect();
    let frames = (0..mel.frames())
        .map(|t| {
            let row = mel.values.row(t);
            let mut c = [0.0; CEPSTRAL_ORDER];
            for (ck, b) in c.iter_mut().zip(&basis) {
                *ck = row.iter().zip(b).map(|(&x, &bv)| x as f64 * bv).sum();
            }
            c
        })
        .collect();
    MelCepstra { frames }
}

fn sq_dist(a: &[f64; CEPSTRAL_ORDER], b: &[f64; CEPSTRAL_ORDER]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost monotonic alignment with steps (1,0), (0,1), (1,1) under
/// squared cepstral distance. Returns the path from (0,0) to the last pair.
pub fn dtw_path(a: &MelCepstra, b: &MelCepstra) -> Result<Vec<(usize, usize)>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("mcd of an empty sequence".into()));
    }
    let (n, m) = (a.len(), b.len());
    let mut cost = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let mut c = f64::INFINITY;
                if i > 0 && j > 0 {
                    c = c.min(cost[(i - 1) * m + j - 1]);
                }
                if i > 0 {
                    c = c.min(cost[(i - 1) * m + j]);
                }
                if j > 0 {
                    c = c.min(cost[i * m + j - 1]);
                }
                c
            };
            cost[i * m + j] = prev + sq_dist(&a.frames[i], &b.frames[j]);
        }
    }
    let (mut i, mut j) = (n - 1, m - 1);
    let mut path = vec![(i, j)];
    while i > 0 || j > 0 {
        let mut best: Option<(usize, usize)> = None;
        for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
            if i < di || j < dj {
                continue;
            }
            let c = (i - di, j - dj);
            if best.is_none_or(|b| cost[c.0 * m + c.1] < cost[b.0 * m + b.1]) {
                best = Some(c);
            }
        }
        (i, j) = best.unwrap();
        path.push((i, j));
    }
    path.reverse();
    Ok(path)
}

/// Mean over the DTW path of `(10/ln10) sqrt(2 sum_d (c_d - c'_d)^2)`.
pub fn mcd(reference: &MelCepstra, hypothesis: &MelCepstra) -> Result<f64> {
    let path = dtw_path(reference, hypothesis)?;
    let total: f64 = path
        .iter()
        .map(|&(i, j)| sq_dist(&reference.frames[i], &hypothesis.frames[j]).sqrt())
        .sum();
    Ok(mcd_scale() * total / path.len() as f64)
}

pub fn mcd_mel(reference: &MelSpectrogram, hypothesis: &MelSpectrogram) -> Result<f64> {
    mcd(&mel_cepstra(reference), &mel_cepstra(hypothesis))
}

/// Case-folds and strips everything but letters, digits and apostrophes;
/// words left empty are dropped.
pub fn normalize_words<S: AsRef<str>>(words: &[S]) -> Vec<String> {
    words
        .iter()
        .flat_map(|w| w.as_ref().split_whitespace())
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Word error rate in percent.
    pub fn wer(&self) -> Result<f64> {
        if self.reference_words == 0 {
            return Err(Error::InvalidInput("word error rate of an empty reference".into()));
        }
        Ok(100.0 * self.errors() as f64 / self.reference_words as f64)
    }
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
        self.reference_words += o.reference_words;
    }
}

/// Levenshtein alignment of word sequences (compared verbatim).
pub fn edit_counts<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // (cost, subs, dels, ins)
    let mut d = vec![(0usize, 0usize, 0usize, 0usize); (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 1..=n {
        d[at(i, 0)] = (i, 0, i, 0);
    }
    for j in 1..=m {
        d[at(0, j)] = (j, 0, 0, j);
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[at(i - 1, j - 1)];
            let diag = if reference[i - 1].as_ref() == hypothesis[j - 1].as_ref() {
                diag
            } else {
                (diag.0 + 1, diag.1 + 1, diag.2, diag.3)
            };
            let up = d[at(i - 1, j)];
            let left = d[at(i, j - 1)];
            d[at(i, j)] = [diag, (up.0 + 1, up.1, up.2 + 1, up.3), (left.0 + 1, left.1, left.2, left.3 + 1)]
                .into_iter()
                .min_by_key(|c| c.0)
                .unwrap();
        }
    }
    let (_, substitutions, deletions, insertions) = d[at(n, m)];
    EditCounts {
        substitutions,
        deletions,
        insertions,
        reference_words: n,
    }
}

/// Word error rate in percent after normalization of both sides.
pub fn wer<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    edit_counts(&normalize_words(reference), &normalize_words(hypothesis)).wer()
}

pub fn wer_text(reference: &str, hypothesis: &str) -> Result<f64> {
    wer(&[reference], &[hypothesis])
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("zero-norm embedding".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Normalized histogram with `bins` equal bins over `[0, 1]`; values outside
/// are clamped into the end bins.
pub fn histogram(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if values.is_empty() {
        return h;
    }
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    h.iter_mut().for_each(|c| *c /= values.len() as f64);
    h
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Utterance id to embedding vector.
pub type Embeddings = BTreeMap<String, Vec<f32>>;

/// Reads `utterance_id dim v1 ... vdim` lines.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Embeddings> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Embeddings::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Decode {
            path: path.to_path_buf(),
            msg: format!("line {}: {msg}", n + 1),
        };
        let mut it = line.split_whitespace();
        let id = it.next().unwrap();
        let dim: usize = it
            .next()
            .ok_or_else(|| bad("missing dimension".into()))?
            .parse()
            .map_err(|e| bad(format!("dimension: {e}")))?;
        let v = it
            .map(|s| s.parse::<f32>().map_err(|e| bad(format!("`{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != dim || dim == 0 {
            return Err(bad(format!("declared {dim} values, found {}", v.len())));
        }
        if out.insert(id.to_string(), v).is_some() {
            return Err(bad(format!("duplicate utterance `{id}`")));
        }
    }
    Ok(out)
}

pub fn write_embeddings(path: impl AsRef<Path>, emb: &Embeddings) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for (id, v) in emb {
        write!(out, "{id} {}", v.len()).unwrap();
        for x in v {
            write!(out, " {x}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityPair {
    pub utterance_a: String,
    pub utterance_b: String,
    pub same_speaker: bool,
    pub cosine: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    pub pairs: Vec<SimilarityPair>,
}

impl SimilarityReport {
    fn group(&self, same: bool) -> Vec<f64> {
        self.pairs.iter().filter(|p| p.same_speaker == same).map(|p| p.cosine).collect()
    }

    pub fn same_scores(&self) -> Vec<f64> {
        self.group(true)
    }

    pub fn different_scores(&self) -> Vec<f64> {
        self.group(false)
    }

    pub fn same_median(&self) -> Option<f64> {
        median(&self.same_scores())
    }

    pub fn different_median(&self) -> Option<f64> {
        median(&self.different_scores())
    }

    pub fn same_histogram(&self) -> Vec<f64> {
        histogram(&self.same_scores(), HISTOGRAM_BINS)
    }

    pub fn different_histogram(&self) -> Vec<f64> {
        histogram(&self.different_scores(), HISTOGRAM_BINS)
    }
}

/// Every unordered pair of utterances, flagged by shared speaker.
pub fn all_pairs(speakers: &BTreeMap<String, String>) -> Vec<(String, String, bool)> {
    let items: Vec<(&String, &String)> = speakers.iter().collect();
    let mut out = Vec::new();
    for (i, (a, sa)) in items.iter().enumerate() {
        for (b, sb) in &items[i + 1..] {
            out.push(((*a).clone(), (*b).clone(), sa == sb));
        }
    }
    out
}

pub fn similarity_report(emb: &Embeddings, pairs: &[(String, String, bool)]) -> Result<SimilarityReport> {
    let get = |id: &str| emb.get(id).ok_or_else(|| Error::InvalidInput(format!("no embedding for `{id}`")));
    let pairs = pairs
        .iter()
        .map(|(a, b, same)| {
            Ok(SimilarityPair {
                utterance_a: a.clone(),
                utterance_b: b.clone(),
                same_speaker: *same,
                cosine: cosine_similarity(get(a)?, get(b)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarityReport { pairs })
}

fn histogram_text(h: &[f64]) -> String {
    let mut out = String::from("bin_left,bin_right,mass\n");
    for (b, mass) in h.iter().enumerate() {
        let lo = b as f64 / h.len() as f64;
        let hi = (b + 1) as f64 / h.len() as f64;
        writeln!(out, "{lo:.2},{hi:.2},{mass:.6}").unwrap();
    }
    out
}

/// Writes `similarity_pairs.csv`, `histogram_same.txt` and
/// `histogram_different.txt`.
pub fn write_similarity(report: &SimilarityReport, out_dir: impl AsRef<Path>) -> Result<()> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv = String::from("utterance_a,utterance_b,same_speaker,cosine\n");
    for p in &report.pairs {
        writeln!(csv, "{},{},{},{:.6}", p.utterance_a, p.utterance_b, p.same_speaker, p.cosine).unwrap();
    }
    for (name, body) in [
        ("similarity_pairs.csv", csv),
        ("histogram_same.txt", histogram_text(&report.same_histogram())),
        ("histogram_different.txt", histogram_text(&report.different_histogram())),
    ] {
        let p = out_dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Small frame-level speaker classifier whose mean-pooled bottleneck serves
/// as a speaker embedding when no external one is supplied. Its scores are
/// not comparable to a real speaker-verification system.
pub struct FallbackEmbedder {
    store: ParamStore,
    hidden: Linear,
    bottleneck: Linear,
    out: Linear,
    speakers: Vec<String>,
}

impl FallbackEmbedder {
    pub const DIM: usize = 16;

    pub fn train(records: &[UtteranceRecord], steps: usize, seed: u64) -> Result<Self> {
        let speakers: Vec<String> = {
            let mut s: Vec<String> = records.iter().map(|r| r.speaker_id.clone()).collect();
            s.sort();
            s.dedup();
            s
        };
        if speakers.len() < 2 {
            return Err(Error::InvalidInput("the fallback embedder needs at least two speakers".into()));
        }
        let bins = records[0].mel.bins();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hidden = Linear::new(&mut store, &mut rng, "emb.hidden", bins, 64);
        let bottleneck = Linear::new(&mut store, &mut rng, "emb.bottleneck", 64, Self::DIM);
        let out = Linear::new(&mut store, &mut rng, "emb.out", Self::DIM, speakers.len());
        let mut frames: Vec<(usize, usize, usize)> = Vec::new();
        for (ri, r) in records.iter().enumerate() {
            let label = speakers.binary_search(&r.speaker_id).unwrap();
            frames.extend((0..r.frames()).map(|t| (ri, t, label)));
        }
        let mut me = Self {
            store,
            hidden,
            bottleneck,
            out,
            speakers,
        };
        let mut adam = Adam::new(&me.store, 3e-3);
        for _ in 0..steps {
            frames.shuffle(&mut rng);
            let batch = &frames[..frames.len().min(256)];
            let rows: Vec<&[f32]> = batch.iter().map(|&(r, t, _)| records[r].mel.values.row(t)).collect();
            let x = Tensor::from_vec(rows.len(), bins, rows.concat())?;
            let mut g = Graph::new();
            let xv = g.input(x);
            let e = me.embed_var(&mut g, xv);
            let logits = me.out.forward(&mut g, &me.store, e);
            let loss = g.softmax_ce(logits, batch.iter().map(|b| b.2).collect());
            let grads = g.backward(&[(loss, 1.0)]).params(&g);
            adam.step(&mut me.store, &grads, |_| true);
        }
        Ok(me)
    }

    fn embed_var(&self, g: &mut Graph, x: crate::nn::Var) -> crate::nn::Var {
        let h = self.hidden.forward(g, &self.store, x);
        let h = g.tanh(h);
        let b = self.bottleneck.forward(g, &self.store, h);
        g.tanh(b)
    }

    pub fn speakers(&self) -> &[String] {
        &self.speakers
    }

    /// Unit-norm mean bottleneck activation over the frames of `mel`.
    pub fn embed(&self, mel: &MelSpectrogram) -> Vec<f32> {
        let mut g = Graph::new();
        let x = g.input(mel.values.clone());
        let e = self.embed_var(&mut g, x);
        let v = g.value(e);
        let mut mean = vec![0.0f64; Self::DIM];
        for t in 0..v.rows() {
            for (m, &x) in mean.iter_mut().zip(v.row(t)) {
                *m += x as f64;
            }
        }
        let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt().max(1e-12);
        mean.iter().map(|m| (m / norm) as f32).collect()
    }
}

/// One line of a pair manifest: `reference|converted[|ref text|hyp text]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub reference: PathBuf,
    pub converted: PathBuf,
    pub reference_text: Option<String>,
    pub hypothesis_text: Option<String>,
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<EvalPair>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('|').map(str::trim).collect();
        if (f.len() != 2 && f.len() != 4) || f[0].is_empty() || f[1].is_empty() {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                msg: format!("line {}: expected `ref|hyp[|ref text|hyp text]`", n + 1),
            });
        }
        pairs.push(EvalPair {
            reference: base.join(f[0]),
            converted: base.join(f[1]),
            reference_text: f.get(2).map(|s| s.to_string()),
            hypothesis_text: f.get(3).map(|s| s.to_string()),
        });
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub pair: EvalPair,
    pub mcd_db: f64,
    pub wer_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationSummary {
    pub scores: Vec<PairScore>,
    pub mean_mcd_db: f64,
    /// Corpus-level WER in percent (total errors over total reference words).
    pub wer_percent: Option<f64>,
    pub similarity: Option<SimilarityReport>,
}

/// Where speaker embeddings come from during pair evaluation.
pub enum EmbeddingSource<'a> {
    None,
    /// Precomputed vectors keyed by the feature files' utterance ids.
    Table(&'a Embeddings),
    Fallback(&'a FallbackEmbedder),
}

/// Scores every pair of feature files and writes `pairs.csv`,
/// `summary.txt` and, with embeddings, the similarity files into `out_dir`.
pub fn evaluate_pairs(pairs: &[EvalPair], embeddings: EmbeddingSource, out_dir: impl AsRef<Path>) -> Result<EvaluationSummary> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no pairs to evaluate".into()));
    }
    let out_dir = out_dir.as_ref();
    let mut scores = Vec::with_capacity(pairs.len());
    let mut counts = EditCounts::default();
    let mut any_text = false;
    let mut speakers = BTreeMap::new();
    let mut computed = Embeddings::new();
    for p in pairs {
        let r = read_feature_file(&p.reference)?;
        let h = read_feature_file(&p.converted)?;
        let mcd_db = mcd_mel(&r.mel, &h.mel)?;
        for f in [&r, &h] {
            speakers.insert(f.utterance_id.clone(), f.speaker_id.clone());
            if let EmbeddingSource::Fallback(e) = &embeddings {
                computed.insert(f.utterance_id.clone(), e.embed(&f.mel));
            }
        }
        let wer_percent = match (&p.reference_text, &p.hypothesis_text) {
            (Some(rt), Some(ht)) => {
                let c = edit_counts(&normalize_words(&[rt]), &normalize_words(&[ht]));
                counts += c;
                any_text = true;
                Some(c.wer()?)
            }
            _ => None,
        };
        scores.push(PairScore {
            pair: p.clone(),
            mcd_db,
            wer_percent,
        });
    }
    let mean_mcd_db = scores.iter().map(|s| s.mcd_db).sum::<f64>() / scores.len() as f64;
    let wer_percent = if any_text { Some(counts.wer()?) } else { None };
    let similarity = match embeddings {
        EmbeddingSource::None => None,
        EmbeddingSource::Table(t) => Some(similarity_report(t, &all_pairs(&speakers))?),
        EmbeddingSource::Fallback(_) => Some(similarity_report(&computed, &all_pairs(&speakers))?),
    };

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv = String::from("reference,converted,mcd_db,wer_percent\n");
    for s in &scores {
        let w = s.wer_percent.map(|w| format!("{w:.4}")).unwrap_or_default();
        writeln!(csv, "{},{},{:.6},{w}", s.pair.reference.display(), s.pair.converted.display(), s.mcd_db).unwrap();
    }
    let p = out_dir.join("pairs.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    let mut summary = format!("# {MCD_CONVENTION}\npairs {}\nmean_mcd_db {mean_mcd_db:.6}\n", scores.len());
    if let Some(w) = wer_percent {
        writeln!(summary, "wer_percent {w:.4}").unwrap();
    }
    if let Some(rep) = &similarity {
        let fmt = |m: Option<f64>| m.map_or_else(|| "none".to_string(), |v| format!("{v:.6}"));
        writeln!(summary, "same_speaker_median {}", fmt(rep.same_median())).unwrap();
        writeln!(summary, "different_speaker_median {}", fmt(rep.different_median())).unwrap();
        if matches!(embeddings, EmbeddingSource::Fallback(_)) {
            summary.push_str("# embeddings: built-in fallback classifier, not comparable to published scores\n");
        }
        write_similarity(rep, out_dir)?;
    }
    let p = out_dir.join("summary.txt");
    fs::write(&p, summary).map_err(|e| Error::io(&p, e))?;
    Ok(EvaluationSummary {
        scores,
        mean_mcd_db,
        wer_percent,
        similarity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{write_feature_file, FeatureFile};
    use proptest::prelude::*;

    fn mel(rows: Vec<Vec<f32>>) -> MelSpectrogram {
        MelSpectrogram::new(Tensor::from_rows(&rows).unwrap(), 12.5).unwrap()
    }

    fn wavy(frames: usize, k: f32) -> MelSpectrogram {
        mel((0..frames).map(|t| (0..80).map(|i| ((i as f32 + 3.0 * t as f32) * k).sin()).collect()).collect())
    }

    #[test]
    fn cepstra_match_direct_sum() {
        let m = wavy(4, 0.37);
        let c = mel_cepstra(&m);
        for t in 0..4 {
            for k in 1..=CEPSTRAL_ORDER {
                let direct: f64 = (0..80)
                    .map(|n| {
                        m.values.get(t, n) as f64
                            * (2.0f64 / 80.0).sqrt()
                            * (PI * k as f64 * (2 * n + 1) as f64 / 160.0).cos()
                    })
                    .sum();
                assert!((c.frames[t][k - 1] - direct).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_frame_has_no_cepstrum_beyond_c0() {
        let c = mel_cepstra(&mel(vec![vec![-2.5; 80]]));
        assert!(c.frames[0].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn unit_offset_in_c1_gives_closed_form() {
        let a = MelCepstra {
            frames: vec![[0.0; CEPSTRAL_ORDER]],
        };
        let mut b = a.clone();
        b.frames[0][0] = 1.0;
        let d = mcd(&a, &b).unwrap();
        assert_eq!(d, 10.0 / LN_10 * SQRT_2);
        assert!((d - 6.1418).abs() < 1e-4);
    }

    #[test]
    fn mcd_identity_symmetry_duplication() {
        let a = wavy(10, 0.17);
        let b = wavy(7, 0.11);
        assert_eq!(mcd_mel(&a, &a).unwrap(), 0.0);
        assert!((mcd_mel(&a, &b).unwrap() - mcd_mel(&b, &a).unwrap()).abs() < 1e-12);
        let ca = mel_cepstra(&a);
        let dup = MelCepstra {
            frames: ca.frames.iter().flat_map(|f| [*f, *f]).collect(),
        };
        assert_eq!(mcd(&ca, &dup).unwrap(), 0.0);
        assert!(mcd(&ca, &MelCepstra { frames: vec![] }).is_err());
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&["a", "b", "c"], &["a", "b", "c"]).unwrap(), 0.0);
        assert!((wer(&["a", "b", "c"], &["a", "x", "c"]).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(wer(&["a", "b"], &[] as &[&str]).unwrap(), 100.0);
        assert_eq!(wer_text("Hello, World!", "hello world").unwrap(), 0.0);
        assert!(wer(&[] as &[&str], &["a"]).is_err());
    }

    /// Exhaustive minimum over every edit script.
    fn brute_force(r: &[u8], h: &[u8]) -> usize {
        match (r, h) {
            ([], _) => h.len(),
            (_, []) => r.len(),
            _ => {
                let sub = brute_force(&r[1..], &h[1..]) + usize::from(r[0] != h[0]);
                let del = brute_force(&r[1..], h) + 1;
                let ins = brute_force(r, &h[1..]) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    proptest! {
        #[test]
        fn edit_counts_agree_with_exhaustive_search(
            r in proptest::collection::vec(0u8..3, 0..6),
            h in proptest::collection::vec(0u8..3, 0..6),
        ) {
            let rw: Vec<String> = r.iter().map(|i| i.to_string()).collect();
            let hw: Vec<String> = h.iter().map(|i| i.to_string()).collect();
            let c = edit_counts(&rw, &hw);
            prop_assert_eq!(c.errors(), brute_force(&r, &h));
            prop_assert_eq!(r.len() + c.insertions - c.deletions, h.len());
            prop_assert_eq!(edit_counts(&rw, &rw).errors(), 0);
        }

        #[test]
        fn histograms_sum_to_one(v in proptest::collection::vec(-1.0f64..1.0, 1..60)) {
            let s: f64 = histogram(&v, HISTOGRAM_BINS).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_extremes() {
        assert_eq!(cosine_similarity(&[2.0, 0.0], &[2.0, 0.0]).unwrap(), 1.0);
        assert!((cosine_similarity(&[0.6, 0.8], &[0.6, 0.8]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn similarity_groups_and_missing_embedding() {
        let emb: Embeddings = [("u1", vec![1.0, 0.0]), ("u2", vec![1.0, 0.0]), ("u3", vec![0.0, 1.0])]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let spk: BTreeMap<String, String> =
            [("u1", "a"), ("u2", "a"), ("u3", "b")].iter().map(|(u, s)| (u.to_string(), s.to_string())).collect();
        let r = similarity_report(&emb, &all_pairs(&spk)).unwrap();
        assert_eq!((r.same_scores(), r.different_scores()), (vec![1.0], vec![0.0, 0.0]));
        assert_eq!(r.same_histogram()[HISTOGRAM_BINS - 1], 1.0);
        assert_eq!(r.different_histogram()[0], 1.0);
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
        let missing = vec![("u1".to_string(), "zz".to_string(), false)];
        assert!(similarity_report(&emb, &missing).is_err());
    }

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let emb: Embeddings = [("u1".to_string(), vec![0.25, -1.5]), ("u2".to_string(), vec![3.0, 0.125])].into();
        let p = dir.path().join("emb.txt");
        write_embeddings(&p, &emb).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), emb);
        fs::write(&p, "u1 3 1 2\n").unwrap();
        assert!(read_embeddings(&p).is_err());
    }

    fn feature(dir: &Path, id: &str, spk: &str, m: MelSpectrogram) -> PathBuf {
        let p = dir.join(format!("{id}.feat"));
        let f = FeatureFile {
            utterance_id: id.into(),
            speaker_id: spk.into(),
            transcript: None,
            source: None,
            fingerprint: "test".into(),
            mel: m,
            pitch: None,
        };
        write_feature_file(&p, &f).unwrap();
        p
    }

    #[test]
    fn identical_pairs_score_zero_and_reports_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        feature(dir.path(), "r1", "a", wavy(9, 0.2));
        feature(dir.path(), "c1", "a", wavy(9, 0.2));
        feature(dir.path(), "r2", "b", wavy(6, 0.3));
        feature(dir.path(), "c2", "b", wavy(6, 0.3));
        let manifest = dir.path().join("pairs.txt");
        fs::write(&manifest, "r1.feat|c1.feat|The cat.|the cat\nr2.feat|c2.feat\n").unwrap();
        let pairs = read_pairs(&manifest).unwrap();
        let emb: Embeddings = [("r1", [1.0, 0.0]), ("c1", [0.9, 0.1]), ("r2", [0.0, 1.0]), ("c2", [0.1, 0.9])]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_vec()))
            .collect();
        let out = dir.path().join("out");
        let s = evaluate_pairs(&pairs, EmbeddingSource::Table(&emb), &out).unwrap();
        assert_eq!(s.mean_mcd_db, 0.0);
        assert_eq!(s.wer_percent, Some(0.0));
        assert_eq!(s.similarity.as_ref().unwrap().pairs.len(), 6);
        let csv = fs::read_to_string(out.join("pairs.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + pairs.len());
        let snapshot: Vec<Vec<u8>> = ["pairs.csv", "summary.txt", "histogram_same.txt", "similarity_pairs.csv"]
            .iter()
            .map(|f| fs::read(out.join(f)).unwrap())
            .collect();
        evaluate_pairs(&pairs, EmbeddingSource::Table(&emb), &out).unwrap();
        for (f, before) in ["pairs.csv", "summary.txt", "histogram_same.txt", "similarity_pairs.csv"].iter().zip(snapshot) {
            assert_eq!(fs::read(out.join(f)).unwrap(), before);
        }
        fs::write(&manifest, "r1.feat|missing.feat\n").unwrap();
        assert!(evaluate_pairs(&read_pairs(&manifest).unwrap(), EmbeddingSource::None, &out).is_err());
    }

    #[test]
    fn fallback_embedder_separates_distinct_speakers() {
        let rec = |id: &str, spk: &str, k: f32| UtteranceRecord {
            utterance_id: id.into(),
            speaker_id: spk.into(),
            mel: wavy(30, k),
            f0: crate::features::PitchContour { f0_hz: vec![0.0; 30] },
            onehot_pitch: crate::features::OneHotPitch::unvoiced(30),
            transcript: None,
            source: None,
        };
        let records = vec![rec("a1", "a", 0.05), rec("a2", "a", 0.051), rec("b1", "b", 0.4), rec("b2", "b", 0.41)];
        let e = FallbackEmbedder::train(&records, 150, 3).unwrap();
        let emb: Embeddings = records.iter().map(|r| (r.utterance_id.clone(), e.embed(&r.mel))).collect();
        let spk = records.iter().map(|r| (r.utterance_id.clone(), r.speaker_id.clone())).collect();
        let rep = similarity_report(&emb, &all_pairs(&spk)).unwrap();
        assert!(rep.same_median().unwrap() > rep.different_median().unwrap());
    }
}
