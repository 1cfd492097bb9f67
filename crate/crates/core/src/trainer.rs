//! Mini-batch training with Adam, a plateau learning-rate schedule and
//! resumable checkpoints.
//!
//! Each batch item (one video and all of its queries) gets its own graph, so
//! items run in parallel. The loss is evaluated on the gathered embeddings,
//! its gradient is pushed back through every item graph, and the per-item
//! parameter gradients are summed in batch order. The result does not depend
//! on the thread count.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{sha256_hex, sha256_u64, write_atomic, Decoder, Encoder};
use crate::datagen::{Corpus, Split};
use crate::encoders::{check_text, text_graph, video_graph, video_inputs, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBatch, LossConfig, LossTerms};
use crate::numerics::Matrix;
use crate::retrieval::{evaluate, MetricsReport, RetrievalIndex, SimilarityWeights};
use crate::tape::{Graph, Parameters, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRVRCKP\0";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

const INIT_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub learning_rate: f64,
    /// Videos per batch; each brings all of its queries.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: SimilarityWeights,
    /// Share of training videos held out for model selection.
    pub validation_fraction: f64,
    pub patience: usize,
    pub lr_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            learning_rate: 2e-3,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            weights: SimilarityWeights::default(),
            validation_fraction: 0.1,
            patience: 3,
            lr_floor: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation fraction must lie in [0, 1)".into(),
            ));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.learning_rate) {
            return Err(Error::Config(
                "lr floor must lie in [0, learning rate]".into(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form with the epoch budget zeroed, so a run
    /// can be extended by resuming under a larger budget.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::dim(format!(
            "adam step over {} parameters with {} gradients and {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient {i} is {}", grads[i])));
    }
    let (b1, b2) = betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}

/// Halve-on-plateau schedule driven by validation SumR.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub best: f64,
    pub stale: usize,
    pub patience: usize,
    pub floor: f64,
}

impl LrSchedule {
    pub fn new(base: f64, patience: usize, floor: f64) -> Self {
        Self {
            lr: base,
            best: f64::NEG_INFINITY,
            stale: 0,
            patience,
            floor,
        }
    }

    /// Records one epoch's validation score and returns the next rate.
    pub fn observe(&mut self, score: f64) -> f64 {
        if score > self.best {
            self.best = score;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr = (self.lr * 0.5).max(self.floor);
                self.stale = 0;
            }
        }
        self.lr
    }
}

pub fn lr_schedule(state: &mut LrSchedule, validation_sum_r: f64) -> f64 {
    state.observe(validation_sum_r)
}

/// Full training state. `params` continue the run; `best` is the
/// parameter snapshot with the highest validation SumR.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub schedule: LrSchedule,
    pub best: Vec<f64>,
    pub best_epoch: usize,
    pub best_sum_r: f64,
    /// Stream of the next epoch's generator; together with the seed this is
    /// the complete RNG state.
    pub rng_stream: u64,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// The best-validation model.
    pub fn model(&self) -> Result<Model> {
        model_from_flat(&self.config, &self.best)
    }

    pub fn current_model(&self) -> Result<Model> {
        model_from_flat(&self.config, &self.params)
    }

    /// Identifies the best-validation model; indexes built from it carry it.
    pub fn fingerprint(&self) -> u64 {
        model_fingerprint(&self.config, &self.best)
    }
}

fn model_from_flat(config: &TrainConfig, flat: &[f64]) -> Result<Model> {
    let mut model = init_model(config)?;
    if flat.len() != model.num_parameters() {
        return Err(Error::dim(format!(
            "{} stored parameters, model has {}",
            flat.len(),
            model.num_parameters()
        )));
    }
    model.load_flat(flat);
    Ok(model)
}

pub fn model_fingerprint(config: &TrainConfig, flat: &[f64]) -> u64 {
    let mut bytes = config.hash().into_bytes();
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sha256_u64(&bytes)
}

fn init_model(config: &TrainConfig) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(INIT_STREAM);
    Model::init(&config.model, &mut rng)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut e = Encoder::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    e.bytes(&serde_json::to_vec(&ckpt.config)?);
    e.bytes(ckpt.config_hash().as_bytes());
    e.usize(ckpt.epochs_done);
    e.u64(ckpt.rng_stream);
    e.usize(ckpt.params.len());
    e.f64s(&ckpt.params);
    e.u64(ckpt.adam.t);
    e.f64s(&ckpt.adam.m);
    e.f64s(&ckpt.adam.v);
    e.f64(ckpt.schedule.lr);
    e.f64(ckpt.schedule.best);
    e.usize(ckpt.schedule.stale);
    e.usize(ckpt.schedule.patience);
    e.f64(ckpt.schedule.floor);
    e.f64s(&ckpt.best);
    e.usize(ckpt.best_epoch);
    e.f64(ckpt.best_sum_r);
    write_atomic(path, &e.finish())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = std::fs::read(path)?;
    let mut d = Decoder::open(&data, path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let config: TrainConfig =
        serde_json::from_slice(d.bytes()?).map_err(|e| d.corrupt(&format!("config: {e}")))?;
    let hash =
        String::from_utf8(d.bytes()?.to_vec()).map_err(|_| d.corrupt("config hash is not text"))?;
    if hash != config.hash() {
        return Err(d.corrupt("config hash does not match stored config"));
    }
    let epochs_done = d.usize()?;
    let rng_stream = d.u64()?;
    let n = d.count(8 * 4)?;
    let params = d.f64s(n)?;
    let t = d.u64()?;
    let m = d.f64s(n)?;
    let v = d.f64s(n)?;
    let schedule = LrSchedule {
        lr: d.f64()?,
        best: d.f64()?,
        stale: d.usize()?,
        patience: d.usize()?,
        floor: d.f64()?,
    };
    let best = d.f64s(n)?;
    let best_epoch = d.usize()?;
    let best_sum_r = d.f64()?;
    d.finish()?;
    let ckpt = Checkpoint {
        config,
        epochs_done,
        params,
        adam: AdamState { m, v, t },
        schedule,
        best,
        best_epoch,
        best_sum_r,
        rng_stream,
    };
    if init_model(&ckpt.config).map(|m| m.num_parameters()).ok() != Some(n) {
        return Err(Error::corrupt(
            path,
            "parameter count does not match config",
        ));
    }
    Ok(ckpt)
}

/// One record of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    /// Mean over batches.
    pub loss: LossTerms,
    pub validation: MetricsReport,
    pub best_epoch: usize,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
}

/// Deterministic split of the training videos into (train, validation).
pub fn validation_split(config: &TrainConfig, corpus: &Corpus) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut ids = corpus.video_ids(Split::Train);
    if ids.len() < 2 {
        return Err(Error::NoNegatives(ids.len()));
    }
    if config.validation_fraction == 0.0 {
        return Ok((ids.clone(), ids));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SPLIT_STREAM);
    ids.shuffle(&mut rng);
    let n_val = ((ids.len() as f64 * config.validation_fraction).round() as usize).max(1);
    if ids.len() - n_val < 2 {
        return Err(Error::Config(format!(
            "{} training videos leave fewer than two after holding out {n_val}",
            ids.len()
        )));
    }
    let val = ids.split_off(ids.len() - n_val);
    ids.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    Ok((ids, val))
}

fn batches(train: &[u32], batch_size: usize, epoch_rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let mut order = train.to_vec();
    order.shuffle(epoch_rng);
    let mut out: Vec<Vec<u32>> = order.chunks(batch_size).map(<[u32]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(tail);
    }
    out
}

struct ItemForward<'p> {
    graph: Graph<'p>,
    frame: Var,
    clip: Var,
    sentences: Vec<Var>,
}

fn forward_item<'p>(
    model: &'p Model,
    corpus: &Corpus,
    video: u32,
    queries: &[u32],
) -> Result<ItemForward<'p>> {
    let (frames, clips) = video_inputs(&corpus.videos[video as usize], &model.config)?;
    let mut graph = Graph::new();
    let fv = graph.constant(frames);
    let cv = graph.constant(clips);
    let (frame, clip) = video_graph(&mut graph, fv, cv, &model.video, model.config.frame_branch)?;
    let mut sentences = Vec::with_capacity(queries.len());
    for &q in queries {
        let words = &corpus.queries[q as usize];
        check_text(words, model)?;
        let x = graph.constant(words.valid());
        sentences.push(text_graph(&mut graph, x, &model.text).1);
    }
    Ok(ItemForward {
        graph,
        frame,
        clip,
        sentences,
    })
}

/// Loss terms and the flat parameter gradient of one batch.
pub fn batch_gradient(
    model: &Model,
    corpus: &Corpus,
    videos: &[u32],
    loss: &LossConfig,
) -> Result<(LossTerms, Vec<f64>)> {
    let by_video = corpus.queries_by_video();
    let items = videos
        .par_iter()
        .map(|&v| forward_item(model, corpus, v, &by_video[v as usize]))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut owners = Vec::new();
    for (i, item) in items.iter().enumerate() {
        for &s in &item.sentences {
            rows.push(item.graph.value(s).row(0).to_vec());
            owners.push(i);
        }
    }
    let queries = Matrix::from_rows(&rows)?;
    let frames: Vec<Matrix> = items
        .iter()
        .map(|it| it.graph.value(it.frame).clone())
        .collect();
    let clips: Vec<Matrix> = items
        .iter()
        .map(|it| it.graph.value(it.clip).clone())
        .collect();
    if !queries.is_finite() || !frames.iter().chain(&clips).all(Matrix::is_finite) {
        return Err(Error::NonFinite("batch embeddings".into()));
    }
    let batch = LossBatch {
        queries: &queries,
        owners: &owners,
        frames: &frames,
        clips: &clips,
    };
    let (terms, grads) = total_loss(&batch, loss)?;
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {}", terms.total)));
    }

    let mut first_row = Vec::with_capacity(items.len());
    let mut at = 0;
    for item in &items {
        first_row.push(at);
        at += item.sentences.len();
    }
    let per_item: Vec<Vec<f64>> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut seeds = vec![
                (item.frame, grads.frames[i].clone()),
                (item.clip, grads.clips[i].clone()),
            ];
            for (j, &s) in item.sentences.iter().enumerate() {
                seeds.push((s, Matrix::row_vector(grads.queries.row(first_row[i] + j))));
            }
            let g = item.graph.backward(&seeds);
            item.graph.param_grads(&g, model)
        })
        .collect();
    let mut total = vec![0.0; model.num_parameters()];
    for g in &per_item {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    Ok((terms, total))
}

/// Encodes the given videos into an index stamped with `fingerprint`.
pub fn build_index(
    model: &Model,
    corpus: &Corpus,
    videos: &[u32],
    fingerprint: u64,
) -> Result<RetrievalIndex> {
    let embeddings = videos
        .par_iter()
        .map(|&v| model.encode_video(&corpus.videos[v as usize]))
        .collect::<Result<Vec<_>>>()?;
    let mut index = RetrievalIndex::new(
        model.config.width,
        model.config.max_frames,
        model.config.clips,
        fingerprint,
    );
    for (&v, emb) in videos.iter().zip(&embeddings) {
        index.insert(v, emb)?;
    }
    Ok(index)
}

/// Sentence embeddings of every query owned by `videos`, with their truth.
pub fn encode_queries(
    model: &Model,
    corpus: &Corpus,
    videos: &[u32],
) -> Result<Vec<(Vec<f64>, u32)>> {
    let by_video = corpus.queries_by_video();
    let ids: Vec<u32> = videos
        .iter()
        .flat_map(|&v| by_video[v as usize].iter().copied())
        .collect();
    ids.par_iter()
        .map(|&q| {
            Ok((
                model.encode_text(&corpus.queries[q as usize])?.sentence,
                corpus.truth[q as usize].video,
            ))
        })
        .collect()
}

/// Retrieval metrics of `model` over `videos` and their queries.
pub fn evaluate_model(
    model: &Model,
    corpus: &Corpus,
    videos: &[u32],
    weights: SimilarityWeights,
) -> Result<MetricsReport> {
    let index = build_index(model, corpus, videos, 0)?;
    evaluate(&index, &encode_queries(model, corpus, videos)?, weights)
}

/// Fresh training state for `config`.
pub fn initial_checkpoint(config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let params = init_model(config)?.to_flat();
    Ok(Checkpoint {
        config: config.clone(),
        epochs_done: 0,
        adam: AdamState::new(params.len()),
        schedule: LrSchedule::new(config.learning_rate, config.patience, config.lr_floor),
        best: params.clone(),
        params,
        best_epoch: 0,
        best_sum_r: f64::NEG_INFINITY,
        rng_stream: 1,
    })
}

/// Trains until `config.epochs` epochs are done, starting from `resume` if
/// given. `on_epoch` sees every finished epoch with the state after it; an
/// error from it stops training. Divergence aborts with the last good state
/// already handed to `on_epoch`.
pub fn train_with(
    config: &TrainConfig,
    corpus: &Corpus,
    resume: Option<Checkpoint>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    corpus.validate()?;
    let mut ckpt = match resume {
        Some(c) => {
            if c.config_hash() != config.hash() {
                return Err(Error::Config(
                    "checkpoint was trained under a different config".into(),
                ));
            }
            c
        }
        None => initial_checkpoint(config)?,
    };
    ckpt.config = config.clone();
    let (train, val) = validation_split(config, corpus)?;
    let mut model = model_from_flat(config, &ckpt.params)?;
    let mut log = Vec::new();

    while ckpt.epochs_done < config.epochs {
        let epoch = ckpt.epochs_done;
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(ckpt.rng_stream);
        let plan = batches(&train, config.batch_size, &mut rng);
        let mut sums = LossTerms::default();
        for videos in &plan {
            let (terms, grads) = batch_gradient(&model, corpus, videos, &config.loss)
                .map_err(|e| diverged(epoch, e))?;
            add_terms(&mut sums, &terms);
            let mut flat = model.to_flat();
            adam_step(
                &mut flat,
                &grads,
                &mut ckpt.adam,
                ckpt.schedule.lr,
                ADAM_BETAS,
                ADAM_EPS,
            )
            .map_err(|e| diverged(epoch, e))?;
            if flat.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    reason: "parameters became non-finite".into(),
                });
            }
            model.load_flat(&flat);
        }
        let loss = scale_terms(&sums, 1.0 / plan.len() as f64);
        let lr = ckpt.schedule.lr;
        let validation = evaluate_model(&model, corpus, &val, config.weights)?;
        ckpt.params = model.to_flat();
        if validation.sum_r > ckpt.best_sum_r {
            ckpt.best_sum_r = validation.sum_r;
            ckpt.best = ckpt.params.clone();
            ckpt.best_epoch = epoch;
        }
        ckpt.schedule.observe(validation.sum_r);
        ckpt.epochs_done += 1;
        ckpt.rng_stream += 1;
        let record = EpochRecord {
            epoch,
            lr,
            batches: plan.len(),
            loss,
            validation,
            best_epoch: ckpt.best_epoch,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record, &ckpt)?;
        log.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
    })
}

pub fn train(config: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_with(config, corpus, None, &mut |_, _| Ok(()))
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(reason) => Error::Diverged { epoch, reason },
        other => other,
    }
}

fn add_terms(acc: &mut LossTerms, t: &LossTerms) {
    acc.triplet_frame += t.triplet_frame;
    acc.triplet_clip += t.triplet_clip;
    acc.infonce_frame += t.infonce_frame;
    acc.infonce_clip += t.infonce_clip;
    acc.diversity += t.diversity;
    acc.matching += t.matching;
    acc.total += t.total;
}

fn scale_terms(t: &LossTerms, s: f64) -> LossTerms {
    LossTerms {
        triplet_frame: t.triplet_frame * s,
        triplet_clip: t.triplet_clip * s,
        infonce_frame: t.infonce_frame * s,
        infonce_clip: t.infonce_clip * s,
        diversity: t.diversity * s,
        matching: t.matching * s,
        total: t.total * s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, CorpusSpec};
    use proptest::prelude::*;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                video_feature_dim: 8,
                text_feature_dim: 8,
                width: 8,
                heads: 2,
                ffn_hidden: 8,
                max_frames: 12,
                clips: 4,
                max_words: 4,
                sigmas: vec![0.5, 3.0, f64::INFINITY],
                ..ModelConfig::default()
            },
            batch_size: 3,
            epochs: 2,
            validation_fraction: 0.2,
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus(videos: usize) -> Corpus {
        generate(&CorpusSpec {
            train_videos: videos,
            test_videos: 2,
            frames: (8, 12),
            moments: (1, 3),
            moment_ratio: (0.1, 0.3),
            feature_dim: 8,
            query_words: (2, 4),
            atoms: 12,
            concepts: 40,
            seed: 11,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.0; 3], &mut s, 0.1, ADAM_BETAS, ADAM_EPS).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; corrected both are 1, so the step is lr / (1 + eps).
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, 0.1, ADAM_BETAS, ADAM_EPS).unwrap();
        let expected = -0.1 / (1.0 + ADAM_EPS);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
        assert!((s.m[0] - 0.1).abs() < 1e-15 && (s.v[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        assert!(matches!(
            adam_step(&mut p, &[f64::NAN], &mut s, 0.1, ADAM_BETAS, ADAM_EPS),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn schedule_behaviour() {
        let mut s = LrSchedule::new(1e-3, 3, 1e-6);
        for i in 0..10 {
            assert_eq!(lr_schedule(&mut s, i as f64), 1e-3);
        }
        let mut s = LrSchedule::new(1e-3, 3, 1e-6);
        s.observe(10.0);
        s.observe(10.0);
        s.observe(9.0);
        assert_eq!(s.observe(10.0), 5e-4);
        let mut s = LrSchedule::new(1e-3, 1, 1e-6);
        s.observe(1.0);
        for _ in 0..100 {
            s.observe(0.0);
        }
        assert_eq!(s.lr, 1e-6);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let config = tiny_config();
        let corpus = tiny_corpus(4);
        let model = init_model(&config).unwrap();
        let videos = [0, 1, 2];
        let (_, analytic) = batch_gradient(&model, &corpus, &videos, &config.loss).unwrap();
        let base = model.to_flat();
        let loss_at = |flat: &[f64]| {
            let mut m = model.clone();
            m.load_flat(flat);
            batch_gradient(&m, &corpus, &videos, &config.loss)
                .unwrap()
                .0
                .total
        };
        // Spot-check a spread of coordinates; the loss is piecewise smooth.
        let step = 1e-6;
        let mut checked = 0;
        let mut passed = 0;
        for i in (0..base.len()).step_by(base.len() / 40 + 1) {
            let mut hi = base.clone();
            hi[i] += step;
            let mut lo = base.clone();
            lo[i] -= step;
            let numeric = (loss_at(&hi) - loss_at(&lo)) / (2.0 * step);
            let rel =
                (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-5);
            checked += 1;
            if rel < 1e-4 {
                passed += 1;
            }
        }
        assert!(passed * 10 >= checked * 9, "{passed}/{checked}");
    }

    #[test]
    fn smoke_four_videos() {
        let corpus = tiny_corpus(4);
        let config = TrainConfig {
            epochs: 1,
            validation_fraction: 0.0,
            ..tiny_config()
        };
        let out = train(&config, &corpus).unwrap();
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].loss.total.is_finite());
        assert!(out.log[0].validation.sum_r > 0.0);
    }

    #[test]
    fn identical_runs_and_resume_are_bit_exact() {
        let corpus = tiny_corpus(8);
        let config = TrainConfig {
            epochs: 4,
            ..tiny_config()
        };
        let a = train(&config, &corpus).unwrap();
        let b = train(&config, &corpus).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);

        let half = train(
            &TrainConfig {
                epochs: 2,
                ..config.clone()
            },
            &corpus,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&half.checkpoint, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, half.checkpoint.params);
        let resumed = train_with(&config, &corpus, Some(loaded), &mut |_, _| Ok(())).unwrap();
        assert_eq!(resumed.checkpoint.params, a.checkpoint.params);
        assert_eq!(resumed.checkpoint.best, a.checkpoint.best);
        assert_eq!(resumed.checkpoint.adam, a.checkpoint.adam);
        assert_eq!(
            resumed.log,
            a.log[2..]
                .iter()
                .map(|r| EpochRecord {
                    wall_time_s: resumed.log[r.epoch - 2].wall_time_s,
                    ..r.clone()
                })
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let ckpt = initial_checkpoint(&tiny_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params, ckpt.params);
        assert_eq!(loaded.schedule, ckpt.schedule);
        assert_eq!(loaded.fingerprint(), ckpt.fingerprint());
        let data = std::fs::read(&path).unwrap();
        std::fs::write(&path, &data[..data.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn mismatched_resume_is_refused() {
        let corpus = tiny_corpus(6);
        let ckpt = initial_checkpoint(&tiny_config()).unwrap();
        let other = TrainConfig {
            learning_rate: 1e-2,
            ..tiny_config()
        };
        assert!(matches!(
            train_with(&other, &corpus, Some(ckpt), &mut |_, _| Ok(())),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn divergence_aborts() {
        let corpus = tiny_corpus(6);
        let config = TrainConfig {
            learning_rate: 1e300,
            lr_floor: 0.0,
            ..tiny_config()
        };
        let mut seen = 0;
        let r = train_with(&config, &corpus, None, &mut |_, _| {
            seen += 1;
            Ok(())
        });
        assert!(matches!(r, Err(Error::Diverged { .. })), "{r:?}");
    }

    #[test]
    fn invalid_configs() {
        for c in [
            TrainConfig {
                epochs: 0,
                ..tiny_config()
            },
            TrainConfig {
                batch_size: 1,
                ..tiny_config()
            },
            TrainConfig {
                model: ModelConfig {
                    sigmas: vec![],
                    ..tiny_config().model
                },
                ..tiny_config()
            },
        ] {
            assert!(c.validate().is_err());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn batches_partition_training_videos(n in 2usize..60, size in 2usize..20, stream in any::<u64>()) {
            let ids: Vec<u32> = (0..n as u32).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            rng.set_stream(stream);
            let plan = batches(&ids, size, &mut rng);
            let mut seen: Vec<u32> = plan.iter().flatten().copied().collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, ids);
            prop_assert!(plan.iter().all(|b| b.len() >= 2));
        }

        #[test]
        fn adam_moves_against_gradient_sign(g in -10.0f64..10.0, lr in 1e-4f64..1.0) {
            prop_assume!(g.abs() > 1e-6);
            let mut p = vec![0.0];
            let mut s = AdamState::new(1);
            adam_step(&mut p, &[g], &mut s, lr, ADAM_BETAS, ADAM_EPS).unwrap();
            prop_assert!(p[0] * g < 0.0);
            prop_assert!(p[0].abs() <= lr * (1.0 + 1e-12));
        }
    }
}
