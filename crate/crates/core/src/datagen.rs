//! Synthetic corpora with planted moments.
//!
//! A shared pool of random unit "atoms" supplies all semantics. Each moment
//! is a contiguous frame span showing one concept, the normalised sum of two
//! atoms, taken from a fixed pool. Training moments may repeat pool concepts;
//! test moments never share one, so every test query has a single correct
//! video. Its query is a short word sequence alternating the two atoms. Frames outside moments show single
//! atoms held for a few frames, so no single background frame matches a
//! concept exactly. With every noise level at zero the query's mean word
//! equals its moment's frames up to scale.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{sha256_hex, write_atomic, Decoder, Encoder};
use crate::encoders::{downsample_mean, BranchEmbeddings, FeatureSequence};
use crate::error::{Error, Result};
use crate::numerics::{norm, Matrix};
use crate::retrieval::{evaluate, MetricsReport, RetrievalIndex, SimilarityWeights};

pub const CORPUS_MAGIC: &[u8; 8] = b"PRVRCRP\0";
pub const CORPUS_VERSION: u32 = 1;
pub const CORPUS_FILE: &str = "corpus.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub train_videos: usize,
    pub test_videos: usize,
    /// Inclusive frame-count range.
    pub frames: (usize, usize),
    /// Inclusive moments-per-video range.
    pub moments: (usize, usize),
    /// Moment-to-video length ratio range, within (0, 1].
    pub moment_ratio: (f64, f64),
    pub feature_dim: usize,
    /// Inclusive query word-count range; counts are rounded down to even.
    pub query_words: (usize, usize),
    pub atoms: usize,
    /// Size of the concept pool, at most the number of atom pairs.
    pub concepts: usize,
    /// Inclusive run length of a background atom.
    pub background_run: (usize, usize),
    pub query_noise: f64,
    pub frame_noise: f64,
    pub background_noise: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            train_videos: 200,
            test_videos: 50,
            frames: (16, 32),
            moments: (2, 5),
            moment_ratio: (0.1, 0.5),
            feature_dim: 32,
            query_words: (4, 8),
            atoms: 64,
            concepts: 256,
            background_run: (2, 6),
            query_noise: 0.05,
            frame_noise: 0.05,
            background_noise: 0.05,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InfeasibleSpec(msg));
        if self.train_videos + self.test_videos == 0 {
            return bad("no videos requested".into());
        }
        for (name, (lo, hi)) in [
            ("frames", self.frames),
            ("moments", self.moments),
            ("query_words", self.query_words),
            ("background_run", self.background_run),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!(
                    "{name} range ({lo}, {hi}) is empty or starts at zero"
                ));
            }
        }
        if self.query_words.1 < 2 {
            return bad("queries need at least two words".into());
        }
        let (rlo, rhi) = self.moment_ratio;
        if !(rlo > 0.0 && rlo <= rhi && rhi <= 1.0) {
            return bad(format!(
                "moment ratio range ({rlo}, {rhi}) not within (0, 1]"
            ));
        }
        if self.feature_dim < 2 || self.atoms < 2 {
            return bad("need at least two feature dimensions and two atoms".into());
        }
        let pairs = self.atoms * (self.atoms - 1) / 2;
        if self.concepts > pairs {
            return bad(format!(
                "{} concepts but only {pairs} distinct atom pairs",
                self.concepts
            ));
        }
        let most_test = self.test_videos * self.moments.1;
        if self.concepts < self.moments.1 || most_test > self.concepts {
            return bad(format!(
                "{} concepts cannot cover {} moments per video and {most_test} distinct test moments",
                self.concepts, self.moments.1
            ));
        }
        for len in self.frames.0..=self.frames.1 {
            let (min_len, max_len) = span_bounds(len, self.moment_ratio);
            if min_len > max_len {
                return bad(format!(
                    "no moment length fits ratio range in a {len}-frame video"
                ));
            }
            if self.moments.1 * min_len > len {
                return bad(format!(
                    "{} moments cannot fit in {len} frames",
                    self.moments.1
                ));
            }
        }
        for noise in [self.query_noise, self.frame_noise, self.background_noise] {
            if !(noise >= 0.0 && noise.is_finite()) {
                return bad(format!("noise level {noise} must be a nonnegative number"));
            }
        }
        Ok(())
    }
}

fn span_bounds(len: usize, (lo, hi): (f64, f64)) -> (usize, usize) {
    let min_len = ((lo * len as f64).ceil() as usize).max(1);
    let max_len = ((hi * len as f64).floor() as usize).min(len);
    (min_len, max_len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Ground truth of one query: its video and frame span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Moment {
    pub video: u32,
    pub start: usize,
    pub end: usize,
}

impl Moment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    /// Indexed by video id.
    pub videos: Vec<FeatureSequence>,
    pub splits: Vec<Split>,
    /// Indexed by query id.
    pub queries: Vec<FeatureSequence>,
    pub truth: Vec<Moment>,
}

impl Corpus {
    pub fn video_ids(&self, split: Split) -> Vec<u32> {
        (0..self.videos.len() as u32)
            .filter(|&v| self.splits[v as usize] == split)
            .collect()
    }

    pub fn query_ids_of(&self, video: u32) -> Vec<u32> {
        (0..self.queries.len() as u32)
            .filter(|&q| self.truth[q as usize].video == video)
            .collect()
    }

    /// Query ids grouped by video, indexed by video id.
    pub fn queries_by_video(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.videos.len()];
        for (q, m) in self.truth.iter().enumerate() {
            out[m.video as usize].push(q as u32);
        }
        out
    }

    pub fn moment_ratios(&self) -> Vec<f64> {
        self.truth
            .iter()
            .map(|m| m.len() as f64 / self.videos[m.video as usize].valid_length as f64)
            .collect()
    }

    /// Checks the structural invariants: ids in range, spans within valid
    /// lengths and pairwise disjoint per video, every video queried.
    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.videos.len() || self.truth.len() != self.queries.len() {
            return Err(Error::dim("corpus tables differ in length"));
        }
        for (v, seq) in self.videos.iter().enumerate() {
            if seq.source_id as usize != v || seq.valid_length == 0 {
                return Err(Error::Config(format!("video record {v} is malformed")));
            }
        }
        for (q, seq) in self.queries.iter().enumerate() {
            if seq.source_id as usize != q || seq.valid_length == 0 {
                return Err(Error::Config(format!("query record {q} is malformed")));
            }
        }
        for (v, qs) in self.queries_by_video().iter().enumerate() {
            if qs.is_empty() {
                return Err(Error::MissingTruth(v as u32));
            }
            let mut spans: Vec<(usize, usize)> = qs
                .iter()
                .map(|&q| (self.truth[q as usize].start, self.truth[q as usize].end))
                .collect();
            spans.sort_unstable();
            let len = self.videos[v].valid_length;
            for (i, &(s, e)) in spans.iter().enumerate() {
                if s >= e || e > len || (i > 0 && spans[i - 1].1 > s) {
                    return Err(Error::Config(format!(
                        "bad or overlapping span in video {v}"
                    )));
                }
            }
        }
        for m in &self.truth {
            if m.video as usize >= self.videos.len() {
                return Err(Error::MissingTruth(m.video));
            }
        }
        Ok(())
    }
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v = Matrix::random_normal(1, dim, 1.0, rng).into_vec();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy_row(base: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let eps = Matrix::random_normal(1, base.len(), noise, rng);
    base.iter()
        .zip(eps.as_slice())
        .map(|(b, e)| b + e)
        .collect()
}

/// Moment lengths for a `len`-frame video, summing to at most `len`.
fn moment_lengths(len: usize, k: usize, spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (min_len, max_len) = span_bounds(len, spec.moment_ratio);
    let mut used = 0;
    let mut lengths = Vec::with_capacity(k);
    for i in 0..k {
        let reserve = (k - i - 1) * min_len;
        let cap = max_len.min(len - used - reserve);
        let l = rng.random_range(min_len..=cap);
        used += l;
        lengths.push(l);
    }
    lengths.shuffle(rng);
    lengths
}

/// Places spans in order with random gaps; returns `[start, end)` pairs.
fn place_spans(len: usize, lengths: &[usize], rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let free = len - lengths.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..lengths.len())
        .map(|_| rng.random_range(0..=free))
        .collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(lengths.len());
    let mut at = 0;
    let mut prev_cut = 0;
    for (l, cut) in lengths.iter().zip(cuts) {
        at += cut - prev_cut;
        prev_cut = cut;
        spans.push((at, at + l));
        at += l;
    }
    spans
}

pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let atoms: Vec<Vec<f64>> = (0..spec.atoms).map(|_| unit_vector(d, &mut rng)).collect();
    let mut pairs: Vec<(usize, usize)> = (0..spec.atoms)
        .flat_map(|a| (a + 1..spec.atoms).map(move |b| (a, b)))
        .collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(spec.concepts);
    let mut test_order: Vec<usize> = (0..spec.concepts).collect();
    test_order.shuffle(&mut rng);
    let mut test_order = test_order.into_iter();

    let total = spec.train_videos + spec.test_videos;
    let mut videos = Vec::with_capacity(total);
    let mut queries = Vec::new();
    let mut truth = Vec::new();
    for v in 0..total {
        let len = rng.random_range(spec.frames.0..=spec.frames.1);
        let k = rng.random_range(spec.moments.0..=spec.moments.1);
        let lengths = moment_lengths(len, k, spec, &mut rng);
        let spans = place_spans(len, &lengths, &mut rng);
        let chosen: Vec<usize> = if v < spec.train_videos {
            rand::seq::index::sample(&mut rng, spec.concepts, k).into_vec()
        } else {
            test_order.by_ref().take(k).collect()
        };

        let mut frames = Matrix::zeros(len, d);
        let mut i = 0;
        while i < len {
            let run = rng.random_range(spec.background_run.0..=spec.background_run.1);
            let atom = rng.random_range(0..spec.atoms);
            for f in i..(i + run).min(len) {
                frames.row_mut(f).copy_from_slice(&noisy_row(
                    &atoms[atom],
                    spec.background_noise,
                    &mut rng,
                ));
            }
            i += run;
        }
        for (&(start, end), &c) in spans.iter().zip(&chosen) {
            let (a, b) = pairs[c];
            let concept: Vec<f64> = atoms[a].iter().zip(&atoms[b]).map(|(x, y)| x + y).collect();
            let cn = norm(&concept);
            let concept: Vec<f64> = concept.iter().map(|x| x / cn).collect();
            for f in start..end {
                frames
                    .row_mut(f)
                    .copy_from_slice(&noisy_row(&concept, spec.frame_noise, &mut rng));
            }
            let words = rng
                .random_range(spec.query_words.0..=spec.query_words.1)
                .max(2)
                & !1;
            let first = rng.random_bool(0.5);
            let mut text = Matrix::zeros(words, d);
            for w in 0..words {
                let atom = if (w % 2 == 0) == first { a } else { b };
                text.row_mut(w).copy_from_slice(&noisy_row(
                    &atoms[atom],
                    spec.query_noise,
                    &mut rng,
                ));
            }
            text.quantize_f32();
            let id = queries.len() as u32;
            queries.push(FeatureSequence::dense(text, id)?);
            truth.push(Moment {
                video: v as u32,
                start,
                end,
            });
        }
        frames.quantize_f32();
        videos.push(FeatureSequence::dense(frames, v as u32)?);
    }
    let splits = (0..total)
        .map(|v| {
            if v < spec.train_videos {
                Split::Train
            } else {
                Split::Test
            }
        })
        .collect();
    let corpus = Corpus {
        spec: spec.clone(),
        videos,
        splits,
        queries,
        truth,
    };
    corpus.validate()?;
    Ok(corpus)
}

/// Retrieval with identity encoders: mean word vs raw frames, frame branch
/// only. The ceiling any model can be compared against.
pub fn oracle_retrieval(corpus: &Corpus, split: Split) -> Result<MetricsReport> {
    let ids = corpus.video_ids(split);
    let max_frames = ids
        .iter()
        .map(|&v| corpus.videos[v as usize].valid_length)
        .max()
        .ok_or_else(|| Error::Empty("split".into()))?;
    let mut index = RetrievalIndex::new(corpus.spec.feature_dim, max_frames, 1, 0);
    for &v in &ids {
        let seq = &corpus.videos[v as usize];
        let emb = BranchEmbeddings {
            frame: seq.valid().pad_rows(max_frames),
            clip: downsample_mean(seq, 1)?,
            valid_frames: seq.valid_length,
        };
        index.insert(v, &emb)?;
    }
    let queries: Vec<(Vec<f64>, u32)> = ids
        .iter()
        .flat_map(|&v| corpus.query_ids_of(v))
        .map(|q| {
            (
                corpus.queries[q as usize].valid().mean_rows().into_vec(),
                corpus.truth[q as usize].video,
            )
        })
        .collect();
    evaluate(&index, &queries, SimilarityWeights::new(1.0, 0.0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub checksum: String,
    pub spec: CorpusSpec,
    pub videos: Vec<VideoEntry>,
    pub queries: Vec<QueryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: u32,
    pub frames: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub id: u32,
    pub words: usize,
    pub video: u32,
    pub start: usize,
    pub end: usize,
}

fn encode_sequences(e: &mut Encoder, seqs: &[FeatureSequence]) {
    e.usize(seqs.len());
    for s in seqs {
        e.u32(s.source_id);
        e.u32(s.features.rows() as u32);
        e.u32(s.valid_length as u32);
        e.u32(s.features.cols() as u32);
        let values: Vec<f32> = s.features.as_slice().iter().map(|&v| v as f32).collect();
        e.f32s(&values);
    }
}

fn decode_sequences(d: &mut Decoder<'_>) -> Result<Vec<FeatureSequence>> {
    let n = d.count(16)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let id = d.u32()?;
        let rows = d.u32()? as usize;
        let valid = d.u32()? as usize;
        let cols = d.u32()? as usize;
        let values = d.f32s(rows * cols)?;
        let m = Matrix::from_vec(rows, cols, values.into_iter().map(f64::from).collect())?;
        out.push(FeatureSequence::new(m, valid, id).map_err(|_| d.corrupt("bad sequence record"))?);
    }
    Ok(out)
}

/// Binary features to `dir/corpus.bin` plus a JSON manifest carrying ids,
/// spans, splits and the binary's checksum.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<CorpusManifest> {
    let mut e = Encoder::new(CORPUS_MAGIC, CORPUS_VERSION);
    encode_sequences(&mut e, &corpus.videos);
    encode_sequences(&mut e, &corpus.queries);
    let data = e.finish();
    let manifest = CorpusManifest {
        version: CORPUS_VERSION,
        checksum: sha256_hex(&data),
        spec: corpus.spec.clone(),
        videos: corpus
            .videos
            .iter()
            .zip(&corpus.splits)
            .map(|(v, &split)| VideoEntry {
                id: v.source_id,
                frames: v.valid_length,
                split,
            })
            .collect(),
        queries: corpus
            .queries
            .iter()
            .zip(&corpus.truth)
            .map(|(q, m)| QueryEntry {
                id: q.source_id,
                words: q.valid_length,
                video: m.video,
                start: m.start,
                end: m.end,
            })
            .collect(),
    };
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join(CORPUS_FILE), &data)?;
    write_atomic(
        &dir.join(MANIFEST_FILE),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let bin_path = dir.join(CORPUS_FILE);
    let manifest_path = dir.join(MANIFEST_FILE);
    let data = fs::read(&bin_path)?;
    let manifest: CorpusManifest = serde_json::from_slice(&fs::read(&manifest_path)?)
        .map_err(|e| Error::corrupt(&manifest_path, e.to_string()))?;
    if manifest.version != CORPUS_VERSION {
        return Err(Error::Version {
            expected: CORPUS_VERSION,
            found: manifest.version,
        });
    }
    let mut d = Decoder::open(&data, &bin_path, CORPUS_MAGIC, CORPUS_VERSION)?;
    if sha256_hex(&data) != manifest.checksum {
        return Err(Error::corrupt(&bin_path, "checksum differs from manifest"));
    }
    let videos = decode_sequences(&mut d)?;
    let queries = decode_sequences(&mut d)?;
    d.finish()?;
    if videos.len() != manifest.videos.len() || queries.len() != manifest.queries.len() {
        return Err(Error::corrupt(
            &manifest_path,
            "record counts differ from binary",
        ));
    }
    let corpus = Corpus {
        spec: manifest.spec,
        splits: manifest.videos.iter().map(|v| v.split).collect(),
        truth: manifest
            .queries
            .iter()
            .map(|q| Moment {
                video: q.video,
                start: q.start,
                end: q.end,
            })
            .collect(),
        videos,
        queries,
    };
    corpus
        .validate()
        .map_err(|e| Error::corrupt(&manifest_path, e.to_string()))?;
    Ok(corpus)
}
