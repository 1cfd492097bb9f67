//! Scoring, ranking, recall metrics and the persistent embedding index.
//!
//! A text scores against a video as `alpha_f S_f + alpha_c S_c`, where each
//! branch score is the best cosine between the sentence vector and that
//! branch's rows.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{write_atomic, Decoder, Encoder};
use crate::encoders::BranchEmbeddings;
use crate::error::{Error, Result};
use crate::numerics::{max_cosine, norm, Matrix};

pub const INDEX_MAGIC: &[u8; 8] = b"PRVRIDX\0";
pub const INDEX_VERSION: u32 = 1;
/// Bytes before the first record: magic, version, three `u32` shape fields,
/// the fingerprint and the record count.
pub const INDEX_HEADER_BYTES: usize = 8 + 4 + 4 * 3 + 8 + 8;
/// Per-record prefix: id and valid frame count.
pub const INDEX_RECORD_PREFIX_BYTES: usize = 8;
pub const INDEX_DIGEST_BYTES: usize = 32;

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 100];

/// Best cosine between `q` and the first `valid` rows.
pub fn branch_similarity(q: &[f64], embeddings: &Matrix, valid: usize) -> Result<f64> {
    Ok(max_cosine(q, embeddings, valid)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityWeights {
    pub alpha_f: f64,
    pub alpha_c: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        Self {
            alpha_f: 0.3,
            alpha_c: 0.7,
        }
    }
}

impl SimilarityWeights {
    pub fn new(alpha_f: f64, alpha_c: f64) -> Result<Self> {
        let w = Self { alpha_f, alpha_c };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |a: f64| (0.0..=1.0).contains(&a);
        if !unit(self.alpha_f)
            || !unit(self.alpha_c)
            || (self.alpha_f + self.alpha_c - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidWeights(self.alpha_f, self.alpha_c));
        }
        Ok(())
    }
}

pub fn overall_similarity(s_f: f64, s_c: f64, weights: SimilarityWeights) -> Result<f64> {
    weights.validate()?;
    Ok(weights.alpha_f * s_f + weights.alpha_c * s_c)
}

/// Embeddings of many videos held as little-endian-ready `f32`, the same
/// precision as the file.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    width: usize,
    max_frames: usize,
    clips: usize,
    fingerprint: u64,
    ids: Vec<u32>,
    valid_frames: Vec<usize>,
    frames: Vec<f32>,
    clip_rows: Vec<f32>,
}

impl RetrievalIndex {
    pub fn new(width: usize, max_frames: usize, clips: usize, fingerprint: u64) -> Self {
        Self {
            width,
            max_frames,
            clips,
            fingerprint,
            ids: Vec::new(),
            valid_frames: Vec::new(),
            frames: Vec::new(),
            clip_rows: Vec::new(),
        }
    }

    pub fn insert(&mut self, id: u32, emb: &BranchEmbeddings) -> Result<()> {
        if self.ids.contains(&id) {
            return Err(Error::DuplicateId(id));
        }
        if emb.frame.shape() != (self.max_frames, self.width)
            || emb.clip.shape() != (self.clips, self.width)
        {
            return Err(Error::dim(format!(
                "embeddings {:?}/{:?} for an index of {}x{} frames and {} clips",
                emb.frame.shape(),
                emb.clip.shape(),
                self.max_frames,
                self.width,
                self.clips
            )));
        }
        if emb.valid_frames == 0 || emb.valid_frames > self.max_frames {
            return Err(Error::dim(format!("{} valid frames", emb.valid_frames)));
        }
        if !emb.frame.is_finite() || !emb.clip.is_finite() {
            return Err(Error::NonFinite(format!("embeddings of video {id}")));
        }
        self.ids.push(id);
        self.valid_frames.push(emb.valid_frames);
        self.frames
            .extend(emb.frame.as_slice().iter().map(|&v| v as f32));
        self.clip_rows
            .extend(emb.clip.as_slice().iter().map(|&v| v as f32));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn max_frames(&self) -> usize {
        self.max_frames
    }

    pub fn clips(&self) -> usize {
        self.clips
    }

    pub fn position(&self, id: u32) -> Option<usize> {
        self.ids.iter().position(|&v| v == id)
    }

    /// Bytes of resident embedding storage.
    pub fn payload_bytes(&self) -> usize {
        (self.frames.len() + self.clip_rows.len()) * std::mem::size_of::<f32>()
    }

    /// Exact size of the file [`save_index`] writes.
    pub fn file_bytes(&self) -> usize {
        INDEX_HEADER_BYTES
            + self.len() * INDEX_RECORD_PREFIX_BYTES
            + self.payload_bytes()
            + INDEX_DIGEST_BYTES
    }

    pub fn embedding(&self, pos: usize) -> BranchEmbeddings {
        let fsz = self.max_frames * self.width;
        let csz = self.clips * self.width;
        let to_matrix = |rows: usize, data: &[f32]| {
            Matrix::from_vec(
                rows,
                self.width,
                data.iter().map(|&v| f64::from(v)).collect(),
            )
            .expect("stored shape")
        };
        BranchEmbeddings {
            frame: to_matrix(self.max_frames, &self.frames[pos * fsz..(pos + 1) * fsz]),
            clip: to_matrix(self.clips, &self.clip_rows[pos * csz..(pos + 1) * csz]),
            valid_frames: self.valid_frames[pos],
        }
    }

    /// Frame and clip scores of every indexed video, in index order.
    pub fn branch_scores(&self, q: &[f64]) -> Result<Vec<(f64, f64)>> {
        if q.len() != self.width {
            return Err(Error::dim(format!(
                "query width {} for index width {}",
                q.len(),
                self.width
            )));
        }
        let qn = norm(q);
        if qn == 0.0 {
            return Err(Error::UndefinedSimilarity);
        }
        let d = self.width;
        (0..self.len())
            .map(|v| {
                let frames = &self.frames[v * self.max_frames * d..];
                let clips = &self.clip_rows[v * self.clips * d..];
                Ok((
                    best_cosine(q, qn, &frames[..self.valid_frames[v] * d], d)?,
                    best_cosine(q, qn, &clips[..self.clips * d], d)?,
                ))
            })
            .collect()
    }

    pub fn scores(&self, q: &[f64], weights: SimilarityWeights) -> Result<Vec<f64>> {
        weights.validate()?;
        Ok(self
            .branch_scores(q)?
            .into_iter()
            .map(|(f, c)| weights.alpha_f * f + weights.alpha_c * c)
            .collect())
    }
}

fn best_cosine(q: &[f64], qn: f64, rows: &[f32], d: usize) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for row in rows.chunks_exact(d) {
        let mut dot = 0.0;
        let mut rn = 0.0;
        for (a, &b) in q.iter().zip(row) {
            let b = f64::from(b);
            dot += a * b;
            rn += b * b;
        }
        if rn == 0.0 {
            return Err(Error::UndefinedSimilarity);
        }
        best = best.max((dot / (qn * rn.sqrt())).clamp(-1.0, 1.0));
    }
    Ok(best)
}

/// Descending score, ties by ascending id.
fn better(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

pub fn rank_videos(
    q: &[f64],
    index: &RetrievalIndex,
    weights: SimilarityWeights,
) -> Result<Vec<(u32, f64)>> {
    if index.is_empty() {
        return Err(Error::Empty("retrieval index".into()));
    }
    let scores = index.scores(q, weights)?;
    let mut ranked: Vec<(u32, f64)> = index.ids.iter().copied().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// 1-based rank of `truth` among `scores` (aligned with `ids`).
pub fn rank_of(scores: &[f64], ids: &[u32], truth: u32) -> Result<usize> {
    let pos = ids
        .iter()
        .position(|&v| v == truth)
        .ok_or(Error::MissingTruth(truth))?;
    let target = (scores[pos], truth);
    Ok(1 + scores
        .iter()
        .zip(ids)
        .filter(|&(&s, &id)| better((s, id), target))
        .count())
}

/// Percentage of queries whose rank is at most `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub r100: f64,
    pub sum_r: f64,
    pub queries: usize,
}

impl MetricsReport {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let [r1, r5, r10, r100] = RECALL_KS.map(|k| recall_at_k(ranks, k));
        Self {
            r1,
            r5,
            r10,
            r100,
            sum_r: sum_recall(r1, r5, r10, r100),
            queries: ranks.len(),
        }
    }
}

pub fn sum_recall(r1: f64, r5: f64, r10: f64, r100: f64) -> f64 {
    r1 + r5 + r10 + r100
}

/// Expected SumR of a uniformly random ranking over `videos` candidates.
pub fn random_ranking_sum_r(videos: usize) -> f64 {
    RECALL_KS
        .iter()
        .map(|&k| 100.0 * k.min(videos) as f64 / videos as f64)
        .sum()
}

/// Ranks every `(sentence, true video id)` pair against the index in
/// parallel and summarises the recalls.
pub fn evaluate(
    index: &RetrievalIndex,
    queries: &[(Vec<f64>, u32)],
    weights: SimilarityWeights,
) -> Result<MetricsReport> {
    weights.validate()?;
    if index.is_empty() {
        return Err(Error::Empty("retrieval index".into()));
    }
    let ranks = queries
        .par_iter()
        .map(|(q, truth)| rank_of(&index.scores(q, weights)?, &index.ids, *truth))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_ranks(&ranks))
}

/// One structured metrics record per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub config_hash: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub wall_time_s: f64,
    pub peak_index_bytes: usize,
}

pub fn save_index(index: &RetrievalIndex, path: &Path) -> Result<()> {
    let mut e = Encoder::new(INDEX_MAGIC, INDEX_VERSION);
    for v in [index.width, index.max_frames, index.clips] {
        e.u32(v as u32);
    }
    e.u64(index.fingerprint);
    e.usize(index.len());
    let fsz = index.max_frames * index.width;
    let csz = index.clips * index.width;
    for (v, &id) in index.ids.iter().enumerate() {
        e.u32(id);
        e.u32(index.valid_frames[v] as u32);
        e.f32s(&index.frames[v * fsz..(v + 1) * fsz]);
        e.f32s(&index.clip_rows[v * csz..(v + 1) * csz]);
    }
    write_atomic(path, &e.finish())
}

/// Loads an index, refusing it if `expected_fingerprint` is given and differs.
pub fn load_index(path: &Path, expected_fingerprint: Option<u64>) -> Result<RetrievalIndex> {
    let data = fs::read(path)?;
    let mut d = Decoder::open(&data, path, INDEX_MAGIC, INDEX_VERSION)?;
    let width = d.u32()? as usize;
    let max_frames = d.u32()? as usize;
    let clips = d.u32()? as usize;
    let fingerprint = d.u64()?;
    if let Some(expected) = expected_fingerprint {
        if expected != fingerprint {
            return Err(Error::FingerprintMismatch {
                expected,
                found: fingerprint,
            });
        }
    }
    let record = INDEX_RECORD_PREFIX_BYTES + (max_frames + clips) * width * 4;
    let count = d.count(record)?;
    let mut index = RetrievalIndex::new(width, max_frames, clips, fingerprint);
    for _ in 0..count {
        let id = d.u32()?;
        let valid = d.u32()? as usize;
        if valid == 0 || valid > max_frames || index.ids.contains(&id) {
            return Err(d.corrupt("invalid record header"));
        }
        index.ids.push(id);
        index.valid_frames.push(valid);
        index.frames.extend(d.f32s(max_frames * width)?);
        index.clip_rows.extend(d.f32s(clips * width)?);
    }
    d.finish()?;
    Ok(index)
}
