//! Multi-scale Gaussian blocks and their aggregation.
//!
//! `K` blocks with different locality widths run in parallel on the same
//! input. The temporal consolidation module mixes their outputs independently
//! at every time point `j`:
//!
//! ```text
//! w_k      = FC(CA(phi, X_k, X_k))               in R^M
//! w~_{k,j} = exp(w_{k,j} / tau) / sum_i exp(w_{i,j} / tau)
//! out_j    = sum_k w~_{k,j} X_{k,j}
//! ```
//!
//! The cross-attention and FC parameters are shared by all `K` blocks. The FC
//! maps to the branch's fixed maximum length; columns past the valid length
//! are dropped. Average pooling, per-block weighting and per-video dynamic
//! weighting are provided for comparison.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian_attention::{
    block_graph, build_locality_mask, BlockParams, ConstraintKind, LinearParams,
};
use crate::numerics::{softmax_with_temperature, Matrix};
use crate::tape::{Graph, Parameters, Var};

/// Locality widths of the default eight-block stack.
pub const DEFAULT_SIGMAS: [f64; 8] = [0.1, 0.5, 1.0, 3.0, 5.0, 8.0, 10.0, f64::INFINITY];

pub const DEFAULT_TAU: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    #[default]
    Tcm,
    Avg,
    Weighted,
    Dynamic,
}

impl std::str::FromStr for AggregationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tcm" => Ok(Self::Tcm),
            "avg" => Ok(Self::Avg),
            "weighted" => Ok(Self::Weighted),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Single-head cross-attention with one learned query.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl CrossAttentionParams {
    pub fn init<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        Self {
            w_q: Matrix::xavier(width, width, rng),
            w_k: Matrix::xavier(width, width, rng),
            w_v: Matrix::xavier(width, width, rng),
        }
    }

    /// `softmax(q Wq (X Wk)^T / sqrt(d)) X Wv`, a `1 x d` row.
    pub(crate) fn forward<'p>(&'p self, g: &mut Graph<'p>, query: Var, x: Var) -> Var {
        let wq = g.param(&self.w_q);
        let wk = g.param(&self.w_k);
        let wv = g.param(&self.w_v);
        let q = g.matmul(query, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let logits = g.matmul_t(q, k);
        let logits = g.scale(logits, 1.0 / (self.w_q.cols() as f64).sqrt());
        let att = g.softmax_rows(logits);
        g.matmul(att, v)
    }
}

impl Parameters for CrossAttentionParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        f(&self.w_q);
        f(&self.w_k);
        f(&self.w_v);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
    }
}

/// Learned query, cross-attention and FC of a weight generator. For the
/// temporal consolidation module the FC emits one weight per time point; for
/// dynamic aggregation it emits one weight per block.
#[derive(Debug, Clone, PartialEq)]
pub struct TcmParams {
    pub phi: Matrix,
    pub ca: CrossAttentionParams,
    pub fc: LinearParams,
    pub tau: f64,
}

impl TcmParams {
    /// The output layer starts at zero, so a fresh generator yields uniform
    /// weights and the aggregator begins as average pooling.
    pub fn init<R: Rng + ?Sized>(width: usize, out: usize, tau: f64, rng: &mut R) -> Self {
        Self {
            phi: Matrix::random_normal(1, width, 0.02, rng),
            ca: CrossAttentionParams::init(width, rng),
            fc: LinearParams::zeros(width, out),
            tau,
        }
    }

    /// Raw generator output `FC(CA(phi, X, X))`, a `1 x out` row.
    pub(crate) fn generate<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Var {
        let phi = g.param(&self.phi);
        let ctx = self.ca.forward(g, phi, x);
        self.fc.forward(g, ctx)
    }
}

impl Parameters for TcmParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        f(&self.phi);
        self.ca.visit(f);
        self.fc.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.phi);
        self.ca.visit_mut(f);
        self.fc.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedParams {
    /// `1 x K` learnable per-block logits.
    pub scalars: Matrix,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AggregatorParams {
    Avg,
    Weighted(WeightedParams),
    Dynamic(TcmParams),
    Tcm(TcmParams),
}

impl AggregatorParams {
    pub fn kind(&self) -> AggregationKind {
        match self {
            Self::Avg => AggregationKind::Avg,
            Self::Weighted(_) => AggregationKind::Weighted,
            Self::Dynamic(_) => AggregationKind::Dynamic,
            Self::Tcm(_) => AggregationKind::Tcm,
        }
    }
}

impl Parameters for AggregatorParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        match self {
            Self::Avg => {}
            Self::Weighted(w) => f(&w.scalars),
            Self::Dynamic(p) | Self::Tcm(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        match self {
            Self::Avg => {}
            Self::Weighted(w) => f(&mut w.scalars),
            Self::Dynamic(p) | Self::Tcm(p) => p.visit_mut(f),
        }
    }
}

/// Parameters of one multi-scale block operating on sequences of at most
/// `max_len` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TcGmmParams {
    pub sigmas: Vec<f64>,
    pub kind: ConstraintKind,
    pub max_len: usize,
    pub blocks: Vec<BlockParams>,
    pub aggregator: AggregatorParams,
}

pub struct TcGmmInit {
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
    pub tau: f64,
}

impl TcGmmParams {
    pub fn init<R: Rng + ?Sized>(
        sigmas: &[f64],
        kind: ConstraintKind,
        aggregation: AggregationKind,
        shape: &TcGmmInit,
        rng: &mut R,
    ) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::Config("sigma list must be nonempty".into()));
        }
        if let Some(bad) = sigmas.iter().find(|s| s.is_nan() || **s <= 0.0) {
            return Err(Error::InvalidVariance(*bad));
        }
        if shape.tau <= 0.0 {
            return Err(Error::InvalidTemperature(shape.tau));
        }
        let blocks = sigmas
            .iter()
            .map(|_| {
                BlockParams::init(shape.width, shape.width, shape.heads, shape.ffn_hidden, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let aggregator = match aggregation {
            AggregationKind::Avg => AggregatorParams::Avg,
            AggregationKind::Weighted => AggregatorParams::Weighted(WeightedParams {
                scalars: Matrix::zeros(1, sigmas.len()),
                tau: shape.tau,
            }),
            AggregationKind::Dynamic => AggregatorParams::Dynamic(TcmParams::init(
                shape.width,
                sigmas.len(),
                shape.tau,
                rng,
            )),
            AggregationKind::Tcm => {
                AggregatorParams::Tcm(TcmParams::init(shape.width, shape.max_len, shape.tau, rng))
            }
        };
        Ok(Self {
            sigmas: sigmas.to_vec(),
            kind,
            max_len: shape.max_len,
            blocks,
            aggregator,
        })
    }

    pub fn width(&self) -> usize {
        self.blocks[0].width()
    }
}

impl Parameters for TcGmmParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.blocks.visit(f);
        self.aggregator.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.blocks.visit_mut(f);
        self.aggregator.visit_mut(f);
    }
}

/// Outputs of the `K` blocks for one sequence, all `M x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleStack {
    pub outputs: Vec<Matrix>,
    pub sigmas: Vec<f64>,
}

impl MultiScaleStack {
    pub fn new(outputs: Vec<Matrix>, sigmas: Vec<f64>) -> Result<Self> {
        let Some(first) = outputs.first() else {
            return Err(Error::Empty("multi-scale stack".into()));
        };
        if outputs.iter().any(|o| o.shape() != first.shape()) {
            return Err(Error::dim("stack outputs differ in shape"));
        }
        if sigmas.len() != outputs.len() {
            return Err(Error::dim("one sigma per block output is required"));
        }
        Ok(Self { outputs, sigmas })
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.outputs[0].shape()
    }
}

/// Raw temporal-consolidation weights `w_k = FC(CA(phi, X_k, X_k))` restricted
/// to the first `valid` positions: a `K x valid` matrix.
pub fn tcm_weights(params: &TcmParams, stack: &MultiScaleStack, valid: usize) -> Result<Matrix> {
    let (m, d) = stack.shape();
    if d != params.phi.cols() {
        return Err(Error::dim(format!(
            "stack width {d}, generator width {}",
            params.phi.cols()
        )));
    }
    if valid == 0 || valid > m || valid > params.fc.weight.cols() {
        return Err(Error::dim(format!(
            "{valid} valid positions for length {m} and generator output {}",
            params.fc.weight.cols()
        )));
    }
    let mut g = Graph::new();
    let rows: Vec<Var> = stack
        .outputs
        .iter()
        .map(|o| {
            let x = g.constant(o.slice_rows(0, valid));
            let w = params.generate(&mut g, x);
            g.slice_cols(w, 0, valid)
        })
        .collect();
    let all = g.vstack(&rows);
    Ok(g.value(all).clone())
}

/// Per-time-point softmax over blocks followed by the weighted sum.
pub fn tcm_aggregate(stack: &MultiScaleStack, raw_weights: &Matrix, tau: f64) -> Result<Matrix> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(Error::InvalidTemperature(tau));
    }
    let (m, d) = stack.shape();
    if raw_weights.rows() != stack.len() || raw_weights.cols() > m {
        return Err(Error::dim(format!(
            "raw weights {}x{} for {} blocks of length {m}",
            raw_weights.rows(),
            raw_weights.cols(),
            stack.len()
        )));
    }
    if !raw_weights.is_finite() {
        return Err(Error::NonFinite("aggregation weights".into()));
    }
    let mut out = Matrix::zeros(m, d);
    for j in 0..raw_weights.cols() {
        let column: Vec<f64> = (0..stack.len()).map(|k| raw_weights[(k, j)]).collect();
        let mix = softmax_with_temperature(&column, tau)?;
        let row = out.row_mut(j);
        for (k, w) in mix.iter().enumerate() {
            for (o, v) in row.iter_mut().zip(stack.outputs[k].row(j)) {
                *o += w * v;
            }
        }
    }
    Ok(out)
}

pub fn aggregate_avg(stack: &MultiScaleStack) -> Result<Matrix> {
    if stack.is_empty() {
        return Err(Error::Empty("multi-scale stack".into()));
    }
    let mut out = stack.outputs[0].clone();
    for o in &stack.outputs[1..] {
        out.add_assign(o)?;
    }
    Ok(out.scale(1.0 / stack.len() as f64))
}

/// Softmax(`scalars / tau`)-weighted sum with one weight per block.
pub fn aggregate_weighted(stack: &MultiScaleStack, scalars: &[f64], tau: f64) -> Result<Matrix> {
    if scalars.len() != stack.len() {
        return Err(Error::dim(format!(
            "{} scalars for {} blocks",
            scalars.len(),
            stack.len()
        )));
    }
    let mix = softmax_with_temperature(scalars, tau)?;
    mix_blocks(stack, &mix)
}

/// Per-video weights `FC(CA(phi, X, X))` computed from the block input `x`
/// (first `valid` rows), applied uniformly over time.
pub fn aggregate_dynamic(
    stack: &MultiScaleStack,
    x: &Matrix,
    params: &TcmParams,
    valid: usize,
) -> Result<Matrix> {
    if params.fc.weight.cols() != stack.len() {
        return Err(Error::dim(format!(
            "dynamic generator emits {} weights for {} blocks",
            params.fc.weight.cols(),
            stack.len()
        )));
    }
    if x.cols() != params.phi.cols() || valid == 0 || valid > x.rows() {
        return Err(Error::dim(
            "dynamic aggregation input does not match its generator",
        ));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.slice_rows(0, valid));
    let w = params.generate(&mut g, xv);
    let mix = softmax_with_temperature(g.value(w).row(0), params.tau)?;
    mix_blocks(stack, &mix)
}

fn mix_blocks(stack: &MultiScaleStack, mix: &[f64]) -> Result<Matrix> {
    let (m, d) = stack.shape();
    let mut out = Matrix::zeros(m, d);
    for (w, o) in mix.iter().zip(&stack.outputs) {
        out.add_assign(&o.scale(*w))?;
    }
    Ok(out)
}

/// Graph form of the full multi-scale block on an unpadded `n x d` sequence.
pub(crate) fn tc_gmmblock_graph<'p>(g: &mut Graph<'p>, x: Var, p: &'p TcGmmParams) -> Result<Var> {
    let n = g.value(x).rows();
    if n > p.max_len {
        return Err(Error::dim(format!(
            "sequence of {n} exceeds maximum length {}",
            p.max_len
        )));
    }
    let mut outputs = Vec::with_capacity(p.blocks.len());
    for (sigma, block) in p.sigmas.iter().zip(&p.blocks) {
        let mask = build_locality_mask(n, *sigma, p.kind)?;
        outputs.push(block_graph(g, x, Some(&mask.values), block));
    }
    Ok(aggregate_graph(g, x, &outputs, &p.aggregator))
}

pub(crate) fn aggregate_graph<'p>(
    g: &mut Graph<'p>,
    x: Var,
    outputs: &[Var],
    agg: &'p AggregatorParams,
) -> Var {
    let n = g.value(outputs[0]).rows();
    let k = outputs.len();
    match agg {
        AggregatorParams::Avg => {
            let mut acc = outputs[0];
            for &o in &outputs[1..] {
                acc = g.add(acc, o);
            }
            if k == 1 {
                acc
            } else {
                g.scale(acc, 1.0 / k as f64)
            }
        }
        AggregatorParams::Weighted(w) => {
            let s = g.param(&w.scalars);
            let s = g.scale(s, 1.0 / w.tau);
            let mix = g.softmax_rows(s);
            mix_graph(g, outputs, mix, n)
        }
        AggregatorParams::Dynamic(p) => {
            let raw = p.generate(g, x);
            let raw = g.scale(raw, 1.0 / p.tau);
            let mix = g.softmax_rows(raw);
            mix_graph(g, outputs, mix, n)
        }
        AggregatorParams::Tcm(p) => {
            let rows: Vec<Var> = outputs
                .iter()
                .map(|&o| {
                    let w = p.generate(g, o);
                    g.slice_cols(w, 0, n)
                })
                .collect();
            let raw = g.vstack(&rows);
            let raw = g.scale(raw, 1.0 / p.tau);
            // n x K, softmax over blocks at each time point
            let per_point = g.transpose(raw);
            let mix = g.softmax_rows(per_point);
            let mut acc: Option<Var> = None;
            for (idx, &o) in outputs.iter().enumerate() {
                let col = g.slice_cols(mix, idx, idx + 1);
                let term = g.scale_rows(o, col);
                acc = Some(match acc {
                    Some(a) => g.add(a, term),
                    None => term,
                });
            }
            acc.expect("at least one block")
        }
    }
}

/// Weighted sum with a `1 x K` mixing row shared by every time point.
fn mix_graph(g: &mut Graph<'_>, outputs: &[Var], mix: Var, n: usize) -> Var {
    let ones = g.constant(Matrix::filled(n, 1, 1.0));
    let mut acc: Option<Var> = None;
    for (idx, &o) in outputs.iter().enumerate() {
        let w = g.slice_cols(mix, idx, idx + 1);
        let col = g.matmul(ones, w);
        let term = g.scale_rows(o, col);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    acc.expect("at least one block")
}

/// Runs the `K` blocks and the configured aggregator on a padded `M x d`
/// input whose first `valid` rows are real.
pub fn tc_gmmblock_forward(x: &Matrix, params: &TcGmmParams, valid: usize) -> Result<Matrix> {
    if x.cols() != params.width() {
        return Err(Error::dim(format!(
            "input width {} but block width {}",
            x.cols(),
            params.width()
        )));
    }
    if valid == 0 || valid > x.rows() {
        return Err(Error::dim(format!(
            "{valid} valid positions of {}",
            x.rows()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.slice_rows(0, valid));
    let out = tc_gmmblock_graph(&mut g, xv, params)?;
    Ok(g.value(out).pad_rows(x.rows()))
}

/// Parameter gradient of `<upstream, tc_gmmblock_forward(x)>` over the valid
/// rows, flattened in [`Parameters::to_flat`] order.
pub fn tc_gmmblock_vjp(
    x: &Matrix,
    params: &TcGmmParams,
    valid: usize,
    upstream: &Matrix,
) -> Result<Vec<f64>> {
    if x.cols() != params.width() || valid == 0 || valid > x.rows() {
        return Err(Error::dim("block input does not match its parameters"));
    }
    if upstream.shape() != (valid, x.cols()) {
        return Err(Error::dim(format!(
            "upstream {:?} for {valid} valid rows",
            upstream.shape()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.slice_rows(0, valid));
    let out = tc_gmmblock_graph(&mut g, xv, params)?;
    let grads = g.backward(&[(out, upstream.clone())]);
    Ok(g.param_grads(&grads, params))
}

/// The `K` block outputs on a padded input (padded rows zero).
pub fn multi_scale_stack(
    x: &Matrix,
    params: &TcGmmParams,
    valid: usize,
) -> Result<MultiScaleStack> {
    let outputs = params
        .sigmas
        .iter()
        .zip(&params.blocks)
        .map(|(s, b)| crate::gaussian_attention::gaussian_block(x, *s, params.kind, b, valid))
        .collect::<Result<Vec<_>>>()?;
    MultiScaleStack::new(outputs, params.sigmas.clone())
}
