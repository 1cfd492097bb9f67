//! Locality masks and the Gaussian-constrained transformer block.
//!
//! A block computes, in pre-norm form,
//!
//! ```text
//! GA(X)  = softmax(M ⊙ (X Wq)(X Wk)^T / sqrt(d_head)) X Wv      (per head)
//! X'     = GA(LN(X)) Wo + bo + X
//! out    = FFN(LN(X')) + X'
//! ```
//!
//! where `M` is a Toeplitz locality mask. The mask rescales the signed logits
//! multiplicatively; far-away logits are pulled towards zero rather than
//! towards `-inf`. Padded key positions are excluded before the softmax and
//! padded output rows are zero.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, LAYER_NORM_EPS};
use crate::tape::{Graph, Parameters, Var};

/// Value used outside the window of boxcar and Bartlett masks.
pub const MASK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintKind {
    #[default]
    Gaussian,
    Boxcar,
    Bartlett,
}

impl std::str::FromStr for ConstraintKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "boxcar" => Ok(Self::Boxcar),
            "bartlett" => Ok(Self::Bartlett),
            other => Err(Error::Config(format!("unknown constraint kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalityMask {
    pub size: usize,
    pub sigma: f64,
    pub kind: ConstraintKind,
    pub values: Matrix,
}

/// Mask value at offset `|i - j| = distance`.
pub fn mask_value(distance: usize, sigma: f64, kind: ConstraintKind) -> f64 {
    if sigma.is_infinite() {
        return 1.0;
    }
    let dist = distance as f64;
    match kind {
        ConstraintKind::Gaussian => (1.0 / (2.0 * PI)) * (-(dist * dist) / (sigma * sigma)).exp(),
        ConstraintKind::Boxcar => {
            if dist <= sigma.ceil() {
                1.0
            } else {
                MASK_FLOOR
            }
        }
        ConstraintKind::Bartlett => (1.0 - dist / sigma.ceil()).max(0.0) + MASK_FLOOR,
    }
}

pub fn build_locality_mask(size: usize, sigma: f64, kind: ConstraintKind) -> Result<LocalityMask> {
    if size == 0 {
        return Err(Error::EmptyMask);
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidVariance(sigma));
    }
    let by_distance: Vec<f64> = (0..size).map(|d| mask_value(d, sigma, kind)).collect();
    let values = Matrix::from_fn(size, size, |i, j| by_distance[i.abs_diff(j)]);
    Ok(LocalityMask {
        size,
        sigma,
        kind,
        values,
    })
}

impl LocalityMask {
    /// Top-left `n x n` corner. The mask is Toeplitz, so this is the mask of
    /// an `n`-long sequence.
    pub fn leading(&self, n: usize) -> Matrix {
        if n == self.size {
            return self.values.clone();
        }
        Matrix::from_fn(n, n, |i, j| self.values[(i, j)])
    }

    pub fn is_all_ones(&self) -> bool {
        self.values.as_slice().iter().all(|&v| v == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearParams {
    pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Matrix::xavier(fan_in, fan_out, rng),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Var {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        g.affine(x, w, b)
    }
}

impl Parameters for LinearParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNormParams {
    pub fn identity(width: usize) -> Self {
        Self {
            gain: Matrix::filled(1, width, 1.0),
            bias: Matrix::zeros(1, width),
        }
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Var {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

impl Parameters for LayerNormParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        f(&self.gain);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// Parameters of one transformer block (Gaussian or vanilla).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub heads: usize,
    pub ln_attn: LayerNormParams,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub attn_out: LinearParams,
    pub ln_ffn: LayerNormParams,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
}

impl BlockParams {
    /// Xavier projections, zero biases, identity layer norms.
    pub fn init<R: Rng + ?Sized>(
        width: usize,
        attn_width: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !attn_width.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide attention width {attn_width}"
            )));
        }
        Ok(Self {
            heads,
            ln_attn: LayerNormParams::identity(width),
            w_q: Matrix::xavier(width, attn_width, rng),
            w_k: Matrix::xavier(width, attn_width, rng),
            w_v: Matrix::xavier(width, attn_width, rng),
            attn_out: LinearParams::xavier(attn_width, width, rng),
            ln_ffn: LayerNormParams::identity(width),
            ffn_in: LinearParams::xavier(width, ffn_hidden, rng),
            ffn_out: LinearParams::xavier(ffn_hidden, width, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.rows()
    }

    pub fn attn_width(&self) -> usize {
        self.w_q.cols()
    }

    pub fn head_width(&self) -> usize {
        self.attn_width() / self.heads
    }
}

impl Parameters for BlockParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.ln_attn.visit(f);
        f(&self.w_q);
        f(&self.w_k);
        f(&self.w_v);
        self.attn_out.visit(f);
        self.ln_ffn.visit(f);
        self.ffn_in.visit(f);
        self.ffn_out.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.ln_attn.visit_mut(f);
        f(&mut self.w_q);
        f(&mut self.w_k);
        f(&mut self.w_v);
        self.attn_out.visit_mut(f);
        self.ln_ffn.visit_mut(f);
        self.ffn_in.visit_mut(f);
        self.ffn_out.visit_mut(f);
    }
}

/// Output of the multi-head attention before the output projection, plus the
/// per-head attention matrices.
pub(crate) struct HeadOutputs {
    pub values: Var,
    pub weights: Vec<Var>,
}

/// Multi-head masked attention on an unpadded `n x d` sequence. `mask` must be
/// `n x n` (or `None` for plain scaled dot-product attention).
pub(crate) fn attention_heads<'p>(
    g: &mut Graph<'p>,
    x: Var,
    mask: Option<&Matrix>,
    p: &'p BlockParams,
) -> HeadOutputs {
    let wq = g.param(&p.w_q);
    let wk = g.param(&p.w_k);
    let wv = g.param(&p.w_v);
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let v = g.matmul(x, wv);
    let dh = p.head_width();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, lo, hi),
                g.slice_cols(k, lo, hi),
                g.slice_cols(v, lo, hi),
            )
        };
        let logits = g.matmul_t(qh, kh);
        let logits = g.scale(logits, scale);
        let logits = match mask {
            Some(m) => g.mul_const(logits, m.clone()),
            None => logits,
        };
        let att = g.softmax_rows(logits);
        weights.push(att);
        outs.push(g.matmul(att, vh));
    }
    let values = if outs.len() == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    HeadOutputs { values, weights }
}

/// Pre-norm residual block on an unpadded sequence.
pub(crate) fn block_graph<'p>(
    g: &mut Graph<'p>,
    x: Var,
    mask: Option<&Matrix>,
    p: &'p BlockParams,
) -> Var {
    let normed = p.ln_attn.forward(g, x);
    let heads = attention_heads(g, normed, mask, p);
    let attn = p.attn_out.forward(g, heads.values);
    let x1 = g.add(attn, x);
    let normed = p.ln_ffn.forward(g, x1);
    let hidden = p.ffn_in.forward(g, normed);
    let hidden = g.relu(hidden);
    let ffn = p.ffn_out.forward(g, hidden);
    g.add(ffn, x1)
}

/// A vanilla pre-norm transformer encoder layer (no locality mask).
pub(crate) fn encoder_layer_graph<'p>(g: &mut Graph<'p>, x: Var, p: &'p BlockParams) -> Var {
    block_graph(g, x, None, p)
}

fn check_inputs(x: &Matrix, mask: &LocalityMask, params: &BlockParams, valid: usize) -> Result<()> {
    if mask.size != x.rows() {
        return Err(Error::dim(format!(
            "mask of size {} for a sequence of {} positions",
            mask.size,
            x.rows()
        )));
    }
    if x.cols() != params.width() {
        return Err(Error::dim(format!(
            "input width {} but block width {}",
            x.cols(),
            params.width()
        )));
    }
    if valid == 0 || valid > x.rows() {
        return Err(Error::dim(format!(
            "{valid} valid positions in a sequence of {}",
            x.rows()
        )));
    }
    Ok(())
}

/// Gaussian attention `GA(X)` followed by the output projection, on a padded
/// `M x d` input whose first `valid` rows are real. Padded rows of the result
/// are zero.
pub fn gaussian_attention(
    x: &Matrix,
    mask: &LocalityMask,
    params: &BlockParams,
    valid: usize,
) -> Result<Matrix> {
    check_inputs(x, mask, params, valid)?;
    let mut g = Graph::new();
    let xv = g.constant(x.slice_rows(0, valid));
    let heads = attention_heads(&mut g, xv, Some(&mask.leading(valid)), params);
    let out = params.attn_out.forward(&mut g, heads.values);
    Ok(g.value(out).pad_rows(x.rows()))
}

/// Post-softmax attention matrices (one `valid x valid` matrix per head).
pub fn attention_weights(
    x: &Matrix,
    mask: &LocalityMask,
    params: &BlockParams,
    valid: usize,
) -> Result<Vec<Matrix>> {
    check_inputs(x, mask, params, valid)?;
    let mut g = Graph::new();
    let xv = g.constant(x.slice_rows(0, valid));
    let heads = attention_heads(&mut g, xv, Some(&mask.leading(valid)), params);
    Ok(heads.weights.iter().map(|&w| g.value(w).clone()).collect())
}

/// One Gaussian-constrained block on a padded input.
pub fn gaussian_block(
    x: &Matrix,
    sigma: f64,
    kind: ConstraintKind,
    params: &BlockParams,
    valid: usize,
) -> Result<Matrix> {
    let mask = build_locality_mask(x.rows(), sigma, kind)?;
    check_inputs(x, &mask, params, valid)?;
    let mut g = Graph::new();
    let xv = g.constant(x.slice_rows(0, valid));
    let out = block_graph(&mut g, xv, Some(&mask.leading(valid)), params);
    Ok(g.value(out).pad_rows(x.rows()))
}

/// Parameter gradient of `<upstream, gaussian_block(x)>` over the valid rows,
/// flattened in [`Parameters::to_flat`] order.
pub fn gaussian_block_vjp(
    x: &Matrix,
    sigma: f64,
    kind: ConstraintKind,
    params: &BlockParams,
    valid: usize,
    upstream: &Matrix,
) -> Result<Vec<f64>> {
    let mask = build_locality_mask(x.rows(), sigma, kind)?;
    check_inputs(x, &mask, params, valid)?;
    if upstream.shape() != (valid, x.cols()) {
        return Err(Error::dim(format!(
            "upstream {:?} for {valid} valid rows",
            upstream.shape()
        )));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.slice_rows(0, valid));
    let out = block_graph(&mut g, xv, Some(&mask.leading(valid)), params);
    let grads = g.backward(&[(out, upstream.clone())]);
    Ok(g.param_grads(&grads, params))
}

/// A vanilla transformer encoder layer on a padded input.
pub fn encoder_layer(x: &Matrix, params: &BlockParams, valid: usize) -> Result<Matrix> {
    if x.cols() != params.width() || valid == 0 || valid > x.rows() {
        return Err(Error::dim(
            "encoder layer input does not match its parameters",
        ));
    }
    let mut g = Graph::new();
    let xv = g.constant(x.slice_rows(0, valid));
    let out = encoder_layer_graph(&mut g, xv, params);
    Ok(g.value(out).pad_rows(x.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, grad_check};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn gaussian_mask_entries() {
        let m = build_locality_mask(3, 1.0, ConstraintKind::Gaussian).unwrap();
        let c = 1.0 / (2.0 * PI);
        assert!((m.values[(0, 0)] - 0.15915).abs() < 1e-5);
        assert!((m.values[(0, 1)] - c * (-1.0f64).exp()).abs() < 1e-15);
        assert!((m.values[(1, 0)] - 0.05855).abs() < 1e-5);
        assert!((m.values[(0, 2)] - 0.00292).abs() < 1e-5);
    }

    #[test]
    fn infinite_sigma_is_all_ones() {
        for kind in [
            ConstraintKind::Gaussian,
            ConstraintKind::Boxcar,
            ConstraintKind::Bartlett,
        ] {
            let m = build_locality_mask(5, f64::INFINITY, kind).unwrap();
            assert!(m.is_all_ones());
        }
    }

    #[test]
    fn boxcar_and_bartlett_windows() {
        let m = build_locality_mask(4, 1.0, ConstraintKind::Boxcar).unwrap();
        for i in 0..4usize {
            for j in 0..4 {
                let want = if i.abs_diff(j) <= 1 { 1.0 } else { MASK_FLOOR };
                assert_eq!(m.values[(i, j)], want);
            }
        }
        let m = build_locality_mask(5, 1.5, ConstraintKind::Bartlett).unwrap();
        assert_eq!(m.values[(0, 0)], 1.0 + MASK_FLOOR);
        assert_eq!(m.values[(0, 1)], 0.5 + MASK_FLOOR);
        assert_eq!(m.values[(0, 2)], MASK_FLOOR);
    }

    #[test]
    fn mask_errors() {
        assert!(matches!(
            build_locality_mask(0, 1.0, ConstraintKind::Gaussian),
            Err(Error::EmptyMask)
        ));
        assert!(matches!(
            build_locality_mask(3, 0.0, ConstraintKind::Gaussian),
            Err(Error::InvalidVariance(_))
        ));
        assert!(matches!(
            build_locality_mask(3, -1.0, ConstraintKind::Boxcar),
            Err(Error::InvalidVariance(_))
        ));
    }

    fn random_block(width: usize, heads: usize, seed: u64) -> BlockParams {
        let mut r = rng(seed);
        let mut p = BlockParams::init(width, width, heads, 2 * width, &mut r).unwrap();
        // perturb layer norms and biases so every parameter matters
        p.visit_mut(&mut |m| {
            let noise = Matrix::random_normal(m.rows(), m.cols(), 0.3, &mut r);
            m.add_assign(&noise).unwrap();
        });
        p
    }

    #[test]
    fn single_position_attends_to_itself() {
        let p = random_block(8, 2, 3);
        let x = Matrix::random_normal(1, 8, 1.0, &mut rng(4));
        let mask = build_locality_mask(1, 1.0, ConstraintKind::Gaussian).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let heads = attention_heads(&mut g, xv, Some(&mask.values), &p);
        let expected = x.matmul(&p.w_v).unwrap();
        assert_eq!(g.value(heads.values), &expected);
    }

    #[test]
    fn all_ones_mask_equals_vanilla_attention() {
        let p = random_block(8, 4, 5);
        let x = Matrix::random_normal(6, 8, 1.0, &mut rng(6));
        let mask = build_locality_mask(6, f64::INFINITY, ConstraintKind::Gaussian).unwrap();
        let masked = gaussian_attention(&x, &mask, &p, 6).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let heads = attention_heads(&mut g, xv, None, &p);
        let out = p.attn_out.forward(&mut g, heads.values);
        assert_eq!(&masked, g.value(out));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let p = random_block(8, 1, 7);
        let x = Matrix::random_normal(4, 8, 1.0, &mut rng(8));
        let mask = build_locality_mask(4, 1.0, ConstraintKind::Gaussian).unwrap();
        for w in attention_weights(&x, &mask, &p, 4).unwrap() {
            for r in w.iter_rows() {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zeroed_output_projections_give_identity() {
        let mut p = random_block(8, 2, 9);
        p.attn_out = LinearParams::zeros(8, 8);
        p.ffn_out = LinearParams::zeros(16, 8);
        let x = Matrix::random_normal(5, 8, 1.0, &mut rng(10));
        let out = gaussian_block(&x, 3.0, ConstraintKind::Gaussian, &p, 5).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn infinite_sigma_block_is_vanilla_layer() {
        let p = random_block(8, 4, 11);
        let x = Matrix::random_normal(7, 8, 1.0, &mut rng(12));
        let a = gaussian_block(&x, f64::INFINITY, ConstraintKind::Gaussian, &p, 7).unwrap();
        let b = encoder_layer(&x, &p, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn padding_is_ignored() {
        let p = random_block(8, 2, 13);
        let mut x = Matrix::random_normal(6, 8, 1.0, &mut rng(14));
        let a = gaussian_block(&x, 1.0, ConstraintKind::Gaussian, &p, 4).unwrap();
        for j in 0..8 {
            x[(4, j)] = 99.0;
            x[(5, j)] = -3.0;
        }
        let b = gaussian_block(&x, 1.0, ConstraintKind::Gaussian, &p, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.row(5).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = random_block(8, 2, 15);
        let x = Matrix::zeros(4, 6);
        let mask = build_locality_mask(4, 1.0, ConstraintKind::Gaussian).unwrap();
        assert!(matches!(
            gaussian_attention(&x, &mask, &p, 4),
            Err(Error::Dimension(_))
        ));
        let x = Matrix::zeros(4, 8);
        let mask = build_locality_mask(5, 1.0, ConstraintKind::Gaussian).unwrap();
        assert!(gaussian_attention(&x, &mask, &p, 4).is_err());
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let p = random_block(6, 2, 100 + seed);
            let x = Matrix::random_normal(5, 6, 1.0, &mut rng(200 + seed));
            let mask = build_locality_mask(5, 1.0, ConstraintKind::Gaussian).unwrap();
            let mean_out = |p: &BlockParams| {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let out = block_graph(&mut g, xv, Some(&mask.values), p);
                g.value(out).mean()
            };
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = block_graph(&mut g, xv, Some(&mask.values), &p);
            let s = g.sum(out);
            let n = g.value(out).len() as f64;
            let grads = g.backward(&[(s, Matrix::filled(1, 1, 1.0 / n))]);
            let analytic = g.param_grads(&grads, &p);
            let flat = p.to_flat();
            let report = grad_check(
                |v| {
                    let mut q = p.clone();
                    q.load_flat(v);
                    mean_out(&q)
                },
                &flat,
                &analytic,
                1e-5,
                |i| format!("block[{i}]"),
            )
            .unwrap();
            assert!(report.passes(1e-4), "{report:?}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let p = random_block(6, 3, 21);
        let x = Matrix::random_normal(4, 6, 1.0, &mut rng(22));
        let mask = build_locality_mask(4, 2.0, ConstraintKind::Bartlett).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = block_graph(&mut g, xv, Some(&mask.values), &p);
        let s = g.sum(out);
        let grads = g.backward(&[(s, Matrix::filled(1, 1, 1.0))]);
        let numeric = finite_diff_grad(
            |v| {
                let mut g = Graph::new();
                let xv = g.constant(Matrix::from_vec(4, 6, v.to_vec()).unwrap());
                let out = block_graph(&mut g, xv, Some(&mask.values), &p);
                g.value(out).sum()
            },
            x.as_slice(),
            1e-5,
        )
        .unwrap();
        for (a, n) in grads.get(xv).unwrap().as_slice().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()));
        }
    }

    /// Planted pattern embedded in a zero background: zero rows contribute
    /// logit 0 and value 0 wherever they sit, so shifting the pattern shifts
    /// the output.
    #[test]
    fn translation_equivariance_on_planted_pattern() {
        let mut p = random_block(6, 2, 31);
        p.attn_out = LinearParams::xavier(6, 6, &mut rng(32));
        let pattern = Matrix::random_normal(3, 6, 1.0, &mut rng(33));
        let m = 12;
        let embed = |offset: usize| {
            let mut x = Matrix::zeros(m, 6);
            for r in 0..3 {
                x.row_mut(offset + r).copy_from_slice(pattern.row(r));
            }
            x
        };
        let mask = build_locality_mask(m, 2.0, ConstraintKind::Gaussian).unwrap();
        let a = gaussian_attention(&embed(3), &mask, &p, m).unwrap();
        let b = gaussian_attention(&embed(6), &mask, &p, m).unwrap();
        for r in 0..3 {
            for j in 0..6 {
                assert!((a[(3 + r, j)] - b[(6 + r, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance_does_not_hold() {
        let p = random_block(6, 2, 41);
        let x = Matrix::random_normal(5, 6, 1.0, &mut rng(42));
        let mask = build_locality_mask(5, 1.0, ConstraintKind::Gaussian).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let xp = Matrix::from_fn(5, 6, |i, j| x[(perm[i], j)]);
        let a = gaussian_attention(&x, &mask, &p, 5).unwrap();
        let b = gaussian_attention(&xp, &mask, &p, 5).unwrap();
        let permuted_a = Matrix::from_fn(5, 6, |i, j| a[(perm[i], j)]);
        assert!(permuted_a.sub(&b).unwrap().max_abs() > 1e-6);
    }

    fn kind_strategy() -> impl Strategy<Value = ConstraintKind> {
        prop_oneof![
            Just(ConstraintKind::Gaussian),
            Just(ConstraintKind::Boxcar),
            Just(ConstraintKind::Bartlett)
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn masks_symmetric_and_monotone(size in 1usize..20, sigma in 0.05f64..12.0, kind in kind_strategy()) {
            let m = build_locality_mask(size, sigma, kind).unwrap();
            for i in 0..size {
                for j in 0..size {
                    prop_assert_eq!(m.values[(i, j)], m.values[(j, i)]);
                }
                for j in 1..size {
                    prop_assert!(m.values[(0, j)] <= m.values[(0, j - 1)]);
                }
            }
            if kind == ConstraintKind::Gaussian {
                for v in m.values.as_slice() {
                    prop_assert!(*v >= 0.0 && *v <= 1.0 / (2.0 * PI));
                }
            }
        }

        #[test]
        fn wider_gaussians_dominate(d in 1usize..10, s1 in 0.05f64..10.0, ds in 0.0f64..10.0) {
            let s2 = s1 + ds;
            prop_assert!(mask_value(d, s1, ConstraintKind::Gaussian) <= mask_value(d, s2, ConstraintKind::Gaussian));
        }

        #[test]
        fn attention_rows_stochastic_over_valid(seed in 0u64..10_000, valid in 1usize..7, sigma in 0.1f64..8.0) {
            let p = random_block(8, 4, seed);
            let x = Matrix::random_normal(6, 8, 1.0, &mut rng(seed + 1));
            let mask = build_locality_mask(6, sigma, ConstraintKind::Gaussian).unwrap();
            for w in attention_weights(&x, &mask, &p, valid).unwrap() {
                prop_assert_eq!(w.shape(), (valid, valid));
                for r in w.iter_rows() {
                    prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
