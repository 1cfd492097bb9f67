//! Text and video encoders.
//!
//! Text: FC, learned positional embeddings, one encoder layer, then simple
//! attention pooling into a sentence vector. Video: a frame branch (FC then a
//! multi-scale block) and a clip branch (mean-pool downsampling to a fixed
//! number of clips, FC, multi-scale block). Video branches carry no
//! positional embeddings; the locality masks provide temporal structure.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian_attention::{encoder_layer_graph, BlockParams, ConstraintKind, LinearParams};
use crate::numerics::Matrix;
use crate::tape::{Graph, Parameters, Var};
use crate::tc_gmmblock::{
    tc_gmmblock_graph, AggregationKind, TcGmmInit, TcGmmParams, DEFAULT_SIGMAS, DEFAULT_TAU,
};

/// Raw per-position features. Rows past `valid_length` are padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub features: Matrix,
    pub valid_length: usize,
    pub source_id: u32,
}

impl FeatureSequence {
    pub fn new(features: Matrix, valid_length: usize, source_id: u32) -> Result<Self> {
        if valid_length > features.rows() {
            return Err(Error::dim(format!(
                "valid length {valid_length} exceeds stored length {}",
                features.rows()
            )));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite(format!(
                "features of sequence {source_id}"
            )));
        }
        Ok(Self {
            features,
            valid_length,
            source_id,
        })
    }

    /// An unpadded sequence.
    pub fn dense(features: Matrix, source_id: u32) -> Result<Self> {
        let n = features.rows();
        Self::new(features, n, source_id)
    }

    pub fn valid(&self) -> Matrix {
        self.features.slice_rows(0, self.valid_length)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchEmbeddings {
    /// `M_f x d`; rows past `valid_frames` are zero.
    pub frame: Matrix,
    /// `M_c x d`.
    pub clip: Matrix,
    pub valid_frames: usize,
}

impl BranchEmbeddings {
    pub fn valid_frame_rows(&self) -> Matrix {
        self.frame.slice_rows(0, self.valid_frames)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// `N x d` contextual word embeddings; padded rows zero.
    pub words: Matrix,
    pub sentence: Vec<f64>,
}

mod sigma_list {
    //! Sigma lists with `inf` spelled as a string, since JSON has no infinity.
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Sigma {
        Finite(f64),
        Named(String),
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let items: Vec<Sigma> = v
            .iter()
            .map(|&x| {
                if x.is_infinite() {
                    Sigma::Named("inf".into())
                } else {
                    Sigma::Finite(x)
                }
            })
            .collect();
        items.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let items = Vec::<Sigma>::deserialize(d)?;
        items
            .into_iter()
            .map(|item| match item {
                Sigma::Finite(x) => Ok(x),
                Sigma::Named(s) if matches!(s.as_str(), "inf" | "infinity" | "Infinity") => {
                    Ok(f64::INFINITY)
                }
                Sigma::Named(s) => Err(serde::de::Error::custom(format!("bad sigma {s:?}"))),
            })
            .collect()
    }
}

/// Architecture hyper-parameters. Defaults are desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub video_feature_dim: usize,
    pub text_feature_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_frames: usize,
    pub clips: usize,
    pub max_words: usize,
    #[serde(with = "sigma_list")]
    pub sigmas: Vec<f64>,
    pub constraint: ConstraintKind,
    pub aggregation: AggregationKind,
    pub tau: f64,
    /// When false the frame branch is replaced by a single video-level row
    /// (mean over frames of the branch output).
    pub frame_branch: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            video_feature_dim: 32,
            text_feature_dim: 32,
            width: 32,
            heads: 4,
            ffn_hidden: 64,
            max_frames: 32,
            clips: 8,
            max_words: 8,
            sigmas: DEFAULT_SIGMAS.to_vec(),
            constraint: ConstraintKind::Gaussian,
            aggregation: AggregationKind::Tcm,
            tau: DEFAULT_TAU,
            frame_branch: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("video_feature_dim", self.video_feature_dim),
            ("text_feature_dim", self.text_feature_dim),
            ("width", self.width),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("max_frames", self.max_frames),
            ("clips", self.clips),
            ("max_words", self.max_words),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide width {}",
                self.heads, self.width
            )));
        }
        if self.sigmas.is_empty() {
            return Err(Error::Config("sigma list must be nonempty".into()));
        }
        if let Some(s) = self.sigmas.iter().find(|s| s.is_nan() || **s <= 0.0) {
            return Err(Error::InvalidVariance(*s));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::InvalidTemperature(self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextParams {
    pub fc: LinearParams,
    pub positions: Matrix,
    pub layer: BlockParams,
    /// Pooling vector `b`, `1 x d`.
    pub pool: Matrix,
}

impl Parameters for TextParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.fc.visit(f);
        f(&self.positions);
        self.layer.visit(f);
        f(&self.pool);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.fc.visit_mut(f);
        f(&mut self.positions);
        self.layer.visit_mut(f);
        f(&mut self.pool);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoParams {
    pub frame_fc: LinearParams,
    pub frame_block: TcGmmParams,
    pub clip_fc: LinearParams,
    pub clip_block: TcGmmParams,
}

impl Parameters for VideoParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.frame_fc.visit(f);
        self.frame_block.visit(f);
        self.clip_fc.visit(f);
        self.clip_block.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.frame_fc.visit_mut(f);
        self.frame_block.visit_mut(f);
        self.clip_fc.visit_mut(f);
        self.clip_block.visit_mut(f);
    }
}

/// All trainable parameters plus the configuration that shaped them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub text: TextParams,
    pub video: VideoParams,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let text = TextParams {
            fc: LinearParams::xavier(config.text_feature_dim, d, rng),
            positions: Matrix::random_normal(config.max_words, d, 0.02, rng),
            layer: BlockParams::init(d, d, config.heads, config.ffn_hidden, rng)?,
            pool: Matrix::random_normal(1, d, 0.02, rng),
        };
        let block = |max_len: usize, rng: &mut R| {
            let shape = TcGmmInit {
                width: d,
                heads: config.heads,
                ffn_hidden: config.ffn_hidden,
                max_len,
                tau: config.tau,
            };
            TcGmmParams::init(
                &config.sigmas,
                config.constraint,
                config.aggregation,
                &shape,
                rng,
            )
        };
        let frame_fc = LinearParams::xavier(config.video_feature_dim, d, rng);
        let frame_block = block(config.max_frames, rng)?;
        let clip_fc = LinearParams::xavier(config.video_feature_dim, d, rng);
        let clip_block = block(config.clips, rng)?;
        Ok(Self {
            config: config.clone(),
            text,
            video: VideoParams {
                frame_fc,
                frame_block,
                clip_fc,
                clip_block,
            },
        })
    }

    pub fn encode_text(&self, words: &FeatureSequence) -> Result<TextEmbedding> {
        encode_text(words, self)
    }

    pub fn encode_video(&self, video: &FeatureSequence) -> Result<BranchEmbeddings> {
        encode_video(video, self)
    }
}

impl Parameters for Model {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.text.visit(f);
        self.video.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.text.visit_mut(f);
        self.video.visit_mut(f);
    }
}

/// `softmax(b Q^T) Q` over the first `valid` rows of `Q`.
pub fn attention_pool(q: &Matrix, b: &[f64], valid: usize) -> Result<Vec<f64>> {
    if valid == 0 {
        return Err(Error::Empty("attention pooling input".into()));
    }
    if valid > q.rows() || b.len() != q.cols() {
        return Err(Error::dim(format!(
            "pooling {valid} rows of a {}x{} matrix with a {}-vector",
            q.rows(),
            q.cols(),
            b.len()
        )));
    }
    let mut g = Graph::new();
    let qv = g.constant(q.slice_rows(0, valid));
    let bv = g.constant(Matrix::row_vector(b));
    let out = pool_graph(&mut g, qv, bv);
    Ok(g.value(out).row(0).to_vec())
}

fn pool_graph(g: &mut Graph<'_>, q: Var, b: Var) -> Var {
    let logits = g.matmul_t(b, q);
    let l = g.softmax_rows(logits);
    g.matmul(l, q)
}

/// Text branch on unpadded word features. Returns `(Q, q)` with `q` a `1 x d`
/// row.
pub(crate) fn text_graph<'p>(g: &mut Graph<'p>, words: Var, p: &'p TextParams) -> (Var, Var) {
    let n = g.value(words).rows();
    let x = p.fc.forward(g, words);
    let pos = g.param(&p.positions);
    let pos = g.slice_rows(pos, 0, n);
    let x = g.add(x, pos);
    let q = encoder_layer_graph(g, x, &p.layer);
    let b = g.param(&p.pool);
    let sentence = pool_graph(g, q, b);
    (q, sentence)
}

pub(crate) fn check_text(words: &FeatureSequence, model: &Model) -> Result<()> {
    if words.valid_length == 0 {
        return Err(Error::Empty(format!("query {}", words.source_id)));
    }
    if words.valid_length > model.config.max_words {
        return Err(Error::dim(format!(
            "query of {} words exceeds the maximum of {}",
            words.valid_length, model.config.max_words
        )));
    }
    if words.features.cols() != model.config.text_feature_dim {
        return Err(Error::dim(format!(
            "word features of width {}, expected {}",
            words.features.cols(),
            model.config.text_feature_dim
        )));
    }
    Ok(())
}

pub fn encode_text(words: &FeatureSequence, model: &Model) -> Result<TextEmbedding> {
    check_text(words, model)?;
    let mut g = Graph::new();
    let x = g.constant(words.valid());
    let (q, sentence) = text_graph(&mut g, x, &model.text);
    Ok(TextEmbedding {
        words: g.value(q).pad_rows(words.features.rows()),
        sentence: g.value(sentence).row(0).to_vec(),
    })
}

/// Mean-pools the valid frames into `clips` contiguous segments. Segment `j`
/// covers frames `[floor(jL/M), floor((j+1)L/M))`; when `L < M` it is the
/// single frame `floor(jL/M)`.
pub fn downsample_mean(seq: &FeatureSequence, clips: usize) -> Result<Matrix> {
    if clips == 0 {
        return Err(Error::Config("clip count must be at least 1".into()));
    }
    let len = seq.valid_length;
    if len == 0 {
        return Err(Error::Empty(format!("video {}", seq.source_id)));
    }
    let mut out = Matrix::zeros(clips, seq.features.cols());
    for j in 0..clips {
        let start = j * len / clips;
        let end = ((j + 1) * len / clips).max(start + 1);
        let row = out.row_mut(j);
        for i in start..end {
            for (o, v) in row.iter_mut().zip(seq.features.row(i)) {
                *o += v;
            }
        }
        let count = (end - start) as f64;
        row.iter_mut().for_each(|o| *o /= count);
    }
    Ok(out)
}

/// Constant inputs of the two video branches: valid frames (downsampled to
/// `max_frames` if longer) and the clip means.
pub(crate) fn video_inputs(
    video: &FeatureSequence,
    config: &ModelConfig,
) -> Result<(Matrix, Matrix)> {
    if video.valid_length == 0 {
        return Err(Error::Empty(format!("video {}", video.source_id)));
    }
    if video.features.cols() != config.video_feature_dim {
        return Err(Error::dim(format!(
            "frame features of width {}, expected {}",
            video.features.cols(),
            config.video_feature_dim
        )));
    }
    let frames = if video.valid_length > config.max_frames {
        downsample_mean(video, config.max_frames)?
    } else {
        video.valid()
    };
    let clips = downsample_mean(video, config.clips)?;
    Ok((frames, clips))
}

/// Both video branches. Returns `(V_f, V_c)` with `V_f` unpadded.
pub(crate) fn video_graph<'p>(
    g: &mut Graph<'p>,
    frames: Var,
    clips: Var,
    p: &'p VideoParams,
    frame_branch: bool,
) -> Result<(Var, Var)> {
    let f = p.frame_fc.forward(g, frames);
    let mut f = tc_gmmblock_graph(g, f, &p.frame_block)?;
    if !frame_branch {
        f = g.mean_rows(f);
    }
    let c = p.clip_fc.forward(g, clips);
    let c = tc_gmmblock_graph(g, c, &p.clip_block)?;
    Ok((f, c))
}

pub fn encode_video(video: &FeatureSequence, model: &Model) -> Result<BranchEmbeddings> {
    let (frames, clips) = video_inputs(video, &model.config)?;
    let mut g = Graph::new();
    let fv = g.constant(frames);
    let cv = g.constant(clips);
    let (f, c) = video_graph(&mut g, fv, cv, &model.video, model.config.frame_branch)?;
    let frame = g.value(f);
    Ok(BranchEmbeddings {
        frame: frame.pad_rows(model.config.max_frames),
        clip: g.value(c).clone(),
        valid_frames: frame.rows(),
    })
}

/// Parameter gradient of `<d_frame, V_f> + <d_clip, V_c> + <d_sentence, q>`
/// for one video and one query, flattened in [`Parameters::to_flat`] order.
/// `d_frame` covers the valid frame rows only.
pub fn encoder_vjp(
    model: &Model,
    video: &FeatureSequence,
    words: &FeatureSequence,
    d_frame: &Matrix,
    d_clip: &Matrix,
    d_sentence: &[f64],
) -> Result<Vec<f64>> {
    check_text(words, model)?;
    let (frames, clips) = video_inputs(video, &model.config)?;
    let mut g = Graph::new();
    let fv = g.constant(frames);
    let cv = g.constant(clips);
    let (f, c) = video_graph(&mut g, fv, cv, &model.video, model.config.frame_branch)?;
    let wv = g.constant(words.valid());
    let (_, sentence) = text_graph(&mut g, wv, &model.text);
    if d_frame.shape() != g.value(f).shape()
        || d_clip.shape() != g.value(c).shape()
        || d_sentence.len() != model.config.width
    {
        return Err(Error::dim("upstream gradients do not match the embeddings"));
    }
    let grads = g.backward(&[
        (f, d_frame.clone()),
        (c, d_clip.clone()),
        (sentence, Matrix::row_vector(d_sentence)),
    ]);
    Ok(g.param_grads(&grads, model))
}
