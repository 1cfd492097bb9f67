//! Training objective.
//!
//! Similarity matrices are `T x n`: one row per text, one column per video,
//! with `owners[t]` the column of text `t`'s positive video. Every loss
//! returns its value and the gradient with respect to its direct inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{solve_max_assignment, AssignmentPlan};
use crate::numerics::{cosine, cosine_backward, max_cosine, sigmoid, softplus, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub qdl_gamma: f64,
    pub qdl_alpha: f64,
    pub qdl_delta: f64,
    pub lambda_c: f64,
    pub lambda_f: f64,
    pub lambda_d: f64,
    pub lambda_o: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            qdl_gamma: 1.0,
            qdl_alpha: 32.0,
            qdl_delta: 0.2,
            lambda_c: 2e-2,
            lambda_f: 4e-2,
            lambda_d: 3e-3,
            lambda_o: 1.1e-1,
            temperature: 0.07,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("invalid {name}")))
            }
        };
        check("margin", self.margin >= 0.0)?;
        check("qdl_gamma", self.qdl_gamma > 0.0)?;
        check("qdl_alpha", self.qdl_alpha > 0.0)?;
        check("qdl_delta", self.qdl_delta > 0.0)?;
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_f", self.lambda_f),
            ("lambda_d", self.lambda_d),
            ("lambda_o", self.lambda_o),
        ] {
            check(name, v >= 0.0 && v.is_finite())?;
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        Ok(())
    }
}

fn check_owners(s: &Matrix, owners: &[usize]) -> Result<()> {
    if owners.len() != s.rows() {
        return Err(Error::dim(format!(
            "{} owners for {} texts",
            owners.len(),
            s.rows()
        )));
    }
    if let Some(&o) = owners.iter().find(|&&o| o >= s.cols()) {
        return Err(Error::dim(format!("owner {o} outside {} videos", s.cols())));
    }
    if s.cols() < 2 {
        return Err(Error::NoNegatives(s.cols()));
    }
    Ok(())
}

/// Hinge loss on the hardest negative video for each text and the hardest
/// negative text (owned by another video) for each text's video, averaged
/// over texts.
pub fn triplet_loss(s: &Matrix, owners: &[usize], margin: f64) -> Result<(f64, Matrix)> {
    check_owners(s, owners)?;
    let t = s.rows();
    let mut grad = Matrix::zeros(t, s.cols());
    let mut total = 0.0;
    let inv = 1.0 / t as f64;
    for (i, &o) in owners.iter().enumerate() {
        let pos = s[(i, o)];
        let neg_video = (0..s.cols())
            .filter(|&v| v != o)
            .map(|v| (s[(i, v)], v))
            .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
        let neg_text = (0..t)
            .filter(|&j| owners[j] != o)
            .map(|j| (s[(j, o)], j))
            .fold((f64::NEG_INFINITY, usize::MAX), |a, b| {
                if b.0 > a.0 {
                    b
                } else {
                    a
                }
            });
        if neg_text.1 == usize::MAX {
            return Err(Error::NoNegatives(1));
        }
        let h_video = margin + neg_video.0 - pos;
        if h_video > 0.0 {
            total += h_video;
            grad[(i, neg_video.1)] += inv;
            grad[(i, o)] -= inv;
        }
        let h_text = margin + neg_text.0 - pos;
        if h_text > 0.0 {
            total += h_text;
            grad[(neg_text.1, o)] += inv;
            grad[(i, o)] -= inv;
        }
    }
    Ok((total * inv, grad))
}

/// Symmetric contrastive loss over `exp(S / temperature)`. Text-to-video
/// negatives are the other videos; video-to-text negatives are texts owned
/// by other videos. Each direction is averaged over texts; the two are summed.
pub fn infonce_loss(s: &Matrix, owners: &[usize], temperature: f64) -> Result<(f64, Matrix)> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidTemperature(temperature));
    }
    check_owners(s, owners)?;
    let t = s.rows();
    let inv = 1.0 / t as f64;
    let scaled = s.scale(1.0 / temperature);
    let mut grad = Matrix::zeros(t, s.cols());
    let mut total = 0.0;
    for (i, &o) in owners.iter().enumerate() {
        // text -> video: softmax over the row
        let row: Vec<f64> = scaled.row(i).to_vec();
        let (nll, probs) = softmax_nll(&row, o);
        total += nll;
        for (v, p) in probs.iter().enumerate() {
            grad[(i, v)] += inv * (p - if v == o { 1.0 } else { 0.0 }) / temperature;
        }

        // video -> text: the positive against other videos' texts in column o
        let members: Vec<usize> = std::iter::once(i)
            .chain((0..t).filter(|&j| owners[j] != o))
            .collect();
        let column: Vec<f64> = members.iter().map(|&j| scaled[(j, o)]).collect();
        let (nll, probs) = softmax_nll(&column, 0);
        total += nll;
        for (&j, p) in members.iter().zip(&probs) {
            grad[(j, o)] += inv * (p - if j == i { 1.0 } else { 0.0 }) / temperature;
        }
    }
    Ok((total * inv, grad))
}

/// `-log softmax(logits)[target]` and the softmax, with the log-sum-exp taken
/// as `max + ln_1p(rest)` so near-zero losses keep full relative precision.
fn softmax_nll(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let (arg, max) =
        logits.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |a, (i, &v)| if v > a.1 { (i, v) } else { a },
        );
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let rest: f64 = exps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, e)| e)
        .sum();
    let z = 1.0 + rest;
    (
        (max - logits[target]) + rest.ln_1p(),
        exps.iter().map(|e| e / z).collect(),
    )
}

/// `(1 + c)^gamma * ln(1 + e^{alpha (c + delta)})` and its derivative in `c`.
pub fn qdl_pair(c: f64, cfg: &LossConfig) -> (f64, f64) {
    let base = (1.0 + c).max(0.0);
    let z = cfg.qdl_alpha * (c + cfg.qdl_delta);
    let sp = softplus(z);
    let modulation = base.powf(cfg.qdl_gamma);
    let d_mod = if base > 0.0 {
        cfg.qdl_gamma * base.powf(cfg.qdl_gamma - 1.0)
    } else {
        0.0
    };
    (
        modulation * sp,
        d_mod * sp + modulation * cfg.qdl_alpha * sigmoid(z),
    )
}

/// Query diverse loss of one video's queries: the pair loss averaged over
/// unordered pairs. Zero for fewer than two queries.
pub fn query_diverse_loss(q: &Matrix, cfg: &LossConfig) -> Result<(f64, Matrix)> {
    let m = q.rows();
    let mut grad = Matrix::zeros(m, q.cols());
    if m < 2 {
        return Ok((0.0, grad));
    }
    let norm = 2.0 / (m * (m - 1)) as f64;
    let mut total = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let c = cosine(q.row(i), q.row(j))?;
            let (l, dl) = qdl_pair(c, cfg);
            total += l;
            let (mut gi, mut gj) = (vec![0.0; q.cols()], vec![0.0; q.cols()]);
            cosine_backward(q.row(i), q.row(j), norm * dl, &mut gi, &mut gj);
            for (g, v) in grad.row_mut(i).iter_mut().zip(gi) {
                *g += v;
            }
            for (g, v) in grad.row_mut(j).iter_mut().zip(gj) {
                *g += v;
            }
        }
    }
    Ok((total * norm, grad))
}

#[derive(Debug, Clone)]
pub struct MatchingLoss {
    pub value: f64,
    pub grad_queries: Matrix,
    pub grad_clips: Matrix,
    pub plan: AssignmentPlan,
}

/// `(1/M_q) sum (1 - cos(q_i, c_j)) a*_ij` with `A*` the maximum-profit
/// assignment on cosines, held constant for differentiation.
pub fn optimal_matching_loss(queries: &Matrix, clips: &Matrix) -> Result<MatchingLoss> {
    if queries.cols() != clips.cols() {
        return Err(Error::dim("queries and clips differ in width"));
    }
    let (mq, mc) = (queries.rows(), clips.rows());
    let mut profit = Matrix::zeros(mq, mc);
    for i in 0..mq {
        for j in 0..mc {
            profit[(i, j)] = cosine(queries.row(i), clips.row(j))?;
        }
    }
    let plan = solve_max_assignment(&profit)?;
    let inv = 1.0 / mq as f64;
    let mut grad_queries = Matrix::zeros(mq, queries.cols());
    let mut grad_clips = Matrix::zeros(mc, clips.cols());
    let mut value = 0.0;
    for (i, &j) in plan.columns.iter().enumerate() {
        value += 1.0 - profit[(i, j)];
        let (mut gq, mut gc) = (vec![0.0; queries.cols()], vec![0.0; clips.cols()]);
        cosine_backward(queries.row(i), clips.row(j), -inv, &mut gq, &mut gc);
        for (g, v) in grad_queries.row_mut(i).iter_mut().zip(gq) {
            *g += v;
        }
        for (g, v) in grad_clips.row_mut(j).iter_mut().zip(gc) {
            *g += v;
        }
    }
    Ok(MatchingLoss {
        value: value * inv,
        grad_queries,
        grad_clips,
        plan,
    })
}

/// Branch similarity matrices with the maximising row per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSimilarities {
    pub frame: Matrix,
    pub clip: Matrix,
    pub frame_argmax: Vec<usize>,
    pub clip_argmax: Vec<usize>,
    pub owners: Vec<usize>,
}

/// One mini-batch: sentence embeddings (`T x d`), their owning video indices,
/// and per-video frame rows (valid rows only) and clip rows.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub queries: &'a Matrix,
    pub owners: &'a [usize],
    pub frames: &'a [Matrix],
    pub clips: &'a [Matrix],
}

impl LossBatch<'_> {
    pub fn similarities(&self) -> Result<BatchSimilarities> {
        let (t, n) = (self.queries.rows(), self.frames.len());
        if self.clips.len() != n {
            return Err(Error::dim("frame and clip lists differ in length"));
        }
        let mut frame = Matrix::zeros(t, n);
        let mut clip = Matrix::zeros(t, n);
        let mut frame_argmax = vec![0; t * n];
        let mut clip_argmax = vec![0; t * n];
        for i in 0..t {
            let q = self.queries.row(i);
            for v in 0..n {
                let (sf, af) = max_cosine(q, &self.frames[v], self.frames[v].rows())?;
                let (sc, ac) = max_cosine(q, &self.clips[v], self.clips[v].rows())?;
                frame[(i, v)] = sf;
                clip[(i, v)] = sc;
                frame_argmax[i * n + v] = af;
                clip_argmax[i * n + v] = ac;
            }
        }
        Ok(BatchSimilarities {
            frame,
            clip,
            frame_argmax,
            clip_argmax,
            owners: self.owners.to_vec(),
        })
    }

    /// Query indices of each video, in text order.
    fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.frames.len()];
        for (t, &o) in self.owners.iter().enumerate() {
            groups[o].push(t);
        }
        groups
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub triplet_frame: f64,
    pub triplet_clip: f64,
    pub infonce_frame: f64,
    pub infonce_clip: f64,
    pub diversity: f64,
    pub matching: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub queries: Matrix,
    pub frames: Vec<Matrix>,
    pub clips: Vec<Matrix>,
}

/// `trip_c + trip_f + lc nce_c + lf nce_f + ld div + lo om`, with the
/// diversity term averaged over videos holding at least two queries and the
/// matching term averaged over all videos.
pub fn total_loss(batch: &LossBatch<'_>, cfg: &LossConfig) -> Result<(LossTerms, LossGrads)> {
    cfg.validate()?;
    let n = batch.frames.len();
    if n < 2 {
        return Err(Error::NoNegatives(n));
    }
    let groups = batch.groups();
    if let Some(v) = groups.iter().position(Vec::is_empty) {
        return Err(Error::Empty(format!("queries of batch video {v}")));
    }
    let sims = batch.similarities()?;
    let (trip_f, g_trip_f) = triplet_loss(&sims.frame, batch.owners, cfg.margin)?;
    let (trip_c, g_trip_c) = triplet_loss(&sims.clip, batch.owners, cfg.margin)?;
    let (nce_f, g_nce_f) = infonce_loss(&sims.frame, batch.owners, cfg.temperature)?;
    let (nce_c, g_nce_c) = infonce_loss(&sims.clip, batch.owners, cfg.temperature)?;

    let d = batch.queries.cols();
    let mut grads = LossGrads {
        queries: Matrix::zeros(batch.queries.rows(), d),
        frames: batch
            .frames
            .iter()
            .map(|f| Matrix::zeros(f.rows(), d))
            .collect(),
        clips: batch
            .clips
            .iter()
            .map(|c| Matrix::zeros(c.rows(), d))
            .collect(),
    };

    let ds_f = g_trip_f.add(&g_nce_f.scale(cfg.lambda_f))?;
    let ds_c = g_trip_c.add(&g_nce_c.scale(cfg.lambda_c))?;
    for t in 0..batch.queries.rows() {
        for v in 0..n {
            let (uf, uc) = (ds_f[(t, v)], ds_c[(t, v)]);
            if uf != 0.0 {
                let a = sims.frame_argmax[t * n + v];
                accumulate_cosine(
                    batch.queries,
                    t,
                    &batch.frames[v],
                    a,
                    uf,
                    &mut grads.queries,
                    &mut grads.frames[v],
                );
            }
            if uc != 0.0 {
                let a = sims.clip_argmax[t * n + v];
                accumulate_cosine(
                    batch.queries,
                    t,
                    &batch.clips[v],
                    a,
                    uc,
                    &mut grads.queries,
                    &mut grads.clips[v],
                );
            }
        }
    }

    let multi: Vec<&Vec<usize>> = groups.iter().filter(|g| g.len() >= 2).collect();
    let mut diversity = 0.0;
    for members in &multi {
        let q = gather_rows(batch.queries, members);
        let (l, g) = query_diverse_loss(&q, cfg)?;
        diversity += l;
        let scale = cfg.lambda_d / multi.len() as f64;
        scatter_rows(&mut grads.queries, members, &g, scale);
    }
    if !multi.is_empty() {
        diversity /= multi.len() as f64;
    }

    let mut matching = 0.0;
    for (v, members) in groups.iter().enumerate() {
        let q = gather_rows(batch.queries, members);
        let om = optimal_matching_loss(&q, &batch.clips[v])?;
        matching += om.value;
        let scale = cfg.lambda_o / n as f64;
        scatter_rows(&mut grads.queries, members, &om.grad_queries, scale);
        grads.clips[v].add_assign(&om.grad_clips.scale(scale))?;
    }
    matching /= n as f64;

    let total = trip_c
        + trip_f
        + cfg.lambda_c * nce_c
        + cfg.lambda_f * nce_f
        + cfg.lambda_d * diversity
        + cfg.lambda_o * matching;
    let terms = LossTerms {
        triplet_frame: trip_f,
        triplet_clip: trip_c,
        infonce_frame: nce_f,
        infonce_clip: nce_c,
        diversity,
        matching,
        total,
    };
    Ok((terms, grads))
}

fn accumulate_cosine(
    q: &Matrix,
    t: usize,
    rows: &Matrix,
    a: usize,
    upstream: f64,
    gq: &mut Matrix,
    grows: &mut Matrix,
) {
    cosine_backward(
        q.row(t),
        rows.row(a),
        upstream,
        gq.row_mut(t),
        grows.row_mut(a),
    );
}

fn gather_rows(m: &Matrix, idx: &[usize]) -> Matrix {
    Matrix::from_fn(idx.len(), m.cols(), |i, j| m[(idx[i], j)])
}

fn scatter_rows(target: &mut Matrix, idx: &[usize], g: &Matrix, scale: f64) {
    for (i, &t) in idx.iter().enumerate() {
        for (o, v) in target.row_mut(t).iter_mut().zip(g.row(i)) {
            *o += scale * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::brute_force_assignment;
    use crate::numerics::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn fd_matrix<F: Fn(&Matrix) -> f64>(f: F, x: &Matrix, analytic: &Matrix) -> f64 {
        grad_check(
            |v| f(&Matrix::from_vec(x.rows(), x.cols(), v.to_vec()).unwrap()),
            x.as_slice(),
            analytic.as_slice(),
            1e-5,
            |i| format!("x[{i}]"),
        )
        .unwrap()
        .max_relative_error
    }

    fn random_owners(t: usize, n: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
        let mut owners: Vec<usize> = (0..n).collect();
        owners.extend((n..t).map(|_| r.random_range(0..n)));
        owners
    }

    #[test]
    fn triplet_examples() {
        let s = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        assert_eq!(triplet_loss(&s, &[0, 1], 0.2).unwrap().0, 0.0);

        let s = Matrix::from_rows(&[vec![0.5, 0.6], vec![0.4, 0.9]]).unwrap();
        let (l, _) = triplet_loss(&s, &[0, 1], 0.2).unwrap();
        // text 0 contributes 0.1 + 0.3; text 1 contributes nothing
        assert!((l - 0.4 / 2.0).abs() < 1e-15);

        assert!(matches!(
            triplet_loss(&Matrix::zeros(1, 1), &[0], 0.2),
            Err(Error::NoNegatives(1))
        ));
    }

    #[test]
    fn infonce_examples() {
        let s = Matrix::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
        let (l, _) = infonce_loss(&s, &[0, 1], 0.07).unwrap();
        // -log(a / (a + b)) = ln(1 + b / a)
        let per_direction = (-2.0f64 / 0.07).exp().ln_1p();
        assert!((l - 2.0 * per_direction).abs() < 1e-12 * per_direction);
        assert!(per_direction > 3.8e-13 && per_direction < 4.0e-13);

        let s = Matrix::filled(4, 4, 0.3);
        let (l, _) = infonce_loss(&s, &[0, 1, 2, 3], 0.07).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            infonce_loss(&s, &[0, 1, 2, 3], 0.0),
            Err(Error::InvalidTemperature(_))
        ));
    }

    #[test]
    fn qdl_examples() {
        let cfg = LossConfig::default();
        assert_eq!(qdl_pair(-1.0, &cfg).0, 0.0);
        let (l, _) = qdl_pair(0.0, &cfg);
        assert!((l - (1.0 + 6.4f64.exp()).ln()).abs() < 1e-9);
        assert!((l - 6.40166).abs() < 1e-5);

        let nearly_flat = LossConfig {
            qdl_gamma: 1e-12,
            ..cfg.clone()
        };
        for c in [-0.5, 0.0, 0.7] {
            let want = softplus(32.0 * (c + 0.2));
            assert!((qdl_pair(c, &nearly_flat).0 - want).abs() < 1e-9);
        }

        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (l, _) = query_diverse_loss(&q, &cfg).unwrap();
        assert!((l - (1.0 + 6.4f64.exp()).ln()).abs() < 1e-9);
        assert_eq!(
            query_diverse_loss(&Matrix::row_vector(&[1.0, 2.0]), &cfg)
                .unwrap()
                .0,
            0.0
        );
    }

    #[test]
    fn om_examples() {
        let q = Matrix::row_vector(&[1.0, 0.2, -0.3]);
        let clips = Matrix::random_normal(4, 3, 1.0, &mut rng(1));
        let best = (0..4)
            .map(|j| cosine(q.row(0), clips.row(j)).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((optimal_matching_loss(&q, &clips).unwrap().value - (1.0 - best)).abs() < 1e-15);

        // brute force over both permutations
        let pi = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2]]).unwrap();
        let plan = brute_force_assignment(&pi).unwrap();
        assert_eq!(plan.columns, vec![0, 1]);
        assert!((plan.total_profit - 1.1).abs() < 1e-15);
        let loss = plan
            .columns
            .iter()
            .enumerate()
            .map(|(i, &j)| 1.0 - pi[(i, j)])
            .sum::<f64>()
            / 2.0;
        assert!((loss - 0.45).abs() < 1e-15);

        let eye = Matrix::from_fn(3, 5, |i, j| if i == j { 1.0 } else { 0.0 });
        let clips = Matrix::from_fn(5, 5, |i, j| if i == j { 1.0 } else { 0.0 });
        assert!(optimal_matching_loss(&eye, &clips).unwrap().value.abs() < 1e-15);
        assert!(matches!(
            optimal_matching_loss(&Matrix::filled(3, 2, 1.0), &Matrix::filled(2, 2, 1.0)),
            Err(Error::InfeasibleAssignment { .. })
        ));
    }

    #[test]
    fn om_on_realised_profit_matrix() {
        // queries and clips in 4-D whose cosines are exactly the stated profits
        let clips =
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let row = |a: f64, b: f64| vec![a, b, (1.0 - a * a - b * b).sqrt(), 0.0];
        let q = Matrix::from_rows(&[row(0.9, 0.1), row(0.8, 0.2)]).unwrap();
        let om = optimal_matching_loss(&q, &clips).unwrap();
        assert_eq!(om.plan.columns, vec![0, 1]);
        assert!((om.value - 0.45).abs() < 1e-12);
    }

    #[test]
    fn weights_switch_terms() {
        let mut r = rng(2);
        let queries = Matrix::random_normal(4, 5, 1.0, &mut r);
        let frames: Vec<Matrix> = (0..2)
            .map(|_| Matrix::random_normal(3, 5, 1.0, &mut r))
            .collect();
        let clips: Vec<Matrix> = (0..2)
            .map(|_| Matrix::random_normal(3, 5, 1.0, &mut r))
            .collect();
        let owners = [0, 1, 0, 1];
        let batch = LossBatch {
            queries: &queries,
            owners: &owners,
            frames: &frames,
            clips: &clips,
        };
        let basic = LossConfig {
            lambda_d: 0.0,
            lambda_o: 0.0,
            ..LossConfig::default()
        };
        let (t, _) = total_loss(&batch, &basic).unwrap();
        let expected =
            t.triplet_clip + t.triplet_frame + 0.02 * t.infonce_clip + 0.04 * t.infonce_frame;
        assert_eq!(t.total, expected);
        let trip_only = LossConfig {
            lambda_c: 0.0,
            lambda_f: 0.0,
            ..basic
        };
        let (t, _) = total_loss(&batch, &trip_only).unwrap();
        assert_eq!(t.total, t.triplet_clip + t.triplet_frame);
    }

    /// Random toy batch, its flat parameter vector and a loader.
    struct Toy {
        owners: Vec<usize>,
        shapes: Vec<(usize, usize)>,
        flat: Vec<f64>,
    }

    impl Toy {
        fn new(seed: u64, videos: usize, texts: usize) -> Self {
            let mut r = rng(seed);
            let owners = random_owners(texts, videos, &mut r);
            let mut shapes = vec![(texts, 4)];
            for _ in 0..videos {
                shapes.push((r.random_range(2..5), 4));
            }
            for _ in 0..videos {
                shapes.push((3, 4));
            }
            let len: usize = shapes.iter().map(|(a, b)| a * b).sum();
            let flat = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
            Self {
                owners,
                shapes,
                flat,
            }
        }

        fn unpack(&self, v: &[f64]) -> (Matrix, Vec<Matrix>, Vec<Matrix>) {
            let mut at = 0;
            let mut mats = self.shapes.iter().map(|&(r, c)| {
                let m = Matrix::from_vec(r, c, v[at..at + r * c].to_vec()).unwrap();
                at += r * c;
                m
            });
            let q = mats.next().unwrap();
            let n = (self.shapes.len() - 1) / 2;
            let frames: Vec<Matrix> = mats.by_ref().take(n).collect();
            let clips: Vec<Matrix> = mats.collect();
            (q, frames, clips)
        }

        fn loss(&self, v: &[f64], cfg: &LossConfig) -> (LossTerms, Vec<f64>) {
            let (q, frames, clips) = self.unpack(v);
            let batch = LossBatch {
                queries: &q,
                owners: &self.owners,
                frames: &frames,
                clips: &clips,
            };
            let (terms, g) = total_loss(&batch, cfg).unwrap();
            let mut flat = g.queries.into_vec();
            for m in g.frames.into_iter().chain(g.clips) {
                flat.extend(m.into_vec());
            }
            (terms, flat)
        }
    }

    #[test]
    fn total_loss_gradient_matches_finite_differences() {
        let mut checked = 0;
        for seed in 0..40u64 {
            let toy = Toy::new(seed, 2 + (seed % 2) as usize, 4);
            let cfg = LossConfig {
                qdl_alpha: 4.0,
                lambda_d: 0.5,
                lambda_o: 0.5,
                temperature: 0.5,
                ..LossConfig::default()
            };
            let (_, analytic) = toy.loss(&toy.flat, &cfg);
            let report = grad_check(
                |v| toy.loss(v, &cfg).0.total,
                &toy.flat,
                &analytic,
                1e-6,
                |i| format!("b[{i}]"),
            )
            .unwrap();
            // hinge kinks, max switches and assignment changes are non-smooth
            if report.passes(1e-4) {
                checked += 1;
            }
        }
        assert!(checked >= 30, "only {checked} smooth instances passed");
    }

    #[test]
    fn component_gradients_match_finite_differences() {
        let cfg = LossConfig::default();
        let mut r = rng(3);
        let mut passes = [0; 4];
        for _ in 0..25 {
            let owners = random_owners(5, 3, &mut r);
            let s = Matrix::random_uniform(5, 3, -1.0, 1.0, &mut r);
            let (_, g) = triplet_loss(&s, &owners, 0.2).unwrap();
            if fd_matrix(|m| triplet_loss(m, &owners, 0.2).unwrap().0, &s, &g) < 1e-4 {
                passes[0] += 1;
            }
            let (_, g) = infonce_loss(&s, &owners, 0.07).unwrap();
            if fd_matrix(|m| infonce_loss(m, &owners, 0.07).unwrap().0, &s, &g) < 1e-4 {
                passes[1] += 1;
            }
            let q = Matrix::random_normal(4, 3, 1.0, &mut r);
            let (_, g) = query_diverse_loss(&q, &cfg).unwrap();
            if fd_matrix(|m| query_diverse_loss(m, &cfg).unwrap().0, &q, &g) < 1e-4 {
                passes[2] += 1;
            }
            let clips = Matrix::random_normal(5, 3, 1.0, &mut r);
            let om = optimal_matching_loss(&q, &clips).unwrap();
            let e1 = fd_matrix(
                |m| optimal_matching_loss(m, &clips).unwrap().value,
                &q,
                &om.grad_queries,
            );
            let e2 = fd_matrix(
                |m| optimal_matching_loss(&q, m).unwrap().value,
                &clips,
                &om.grad_clips,
            );
            if e1.max(e2) < 1e-4 {
                passes[3] += 1;
            }
        }
        // kinks are hit with probability ~0 for smooth losses and rarely for the hinge
        assert_eq!(passes[1], 25, "{passes:?}");
        assert_eq!(passes[2], 25, "{passes:?}");
        assert!(passes[0] >= 22 && passes[3] >= 22, "{passes:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn qdl_pair_nonnegative_and_monotone(gamma in 0.1f64..4.0, alpha in 0.5f64..40.0, delta in 0.01f64..1.0) {
            let cfg = LossConfig { qdl_gamma: gamma, qdl_alpha: alpha, qdl_delta: delta, ..LossConfig::default() };
            let mut prev = 0.0;
            for k in 0..=200 {
                let c = -1.0 + k as f64 / 100.0;
                let (l, _) = qdl_pair(c, &cfg);
                prop_assert!(l >= 0.0);
                prop_assert!(l >= prev);
                prev = l;
            }
        }

        #[test]
        fn om_bounds_and_clip_permutation(seed in any::<u64>()) {
            let mut r = rng(seed);
            let mq = r.random_range(1..=4);
            let mc = r.random_range(mq..=6);
            let q = Matrix::random_normal(mq, 3, 1.0, &mut r);
            let clips = Matrix::random_normal(mc, 3, 1.0, &mut r);
            let om = optimal_matching_loss(&q, &clips).unwrap();
            prop_assert!((0.0..=2.0).contains(&om.value));

            let relaxed: f64 = (0..mq)
                .map(|i| 1.0 - (0..mc).map(|j| cosine(q.row(i), clips.row(j)).unwrap()).fold(f64::NEG_INFINITY, f64::max))
                .sum::<f64>() / mq as f64;
            prop_assert!(om.value >= relaxed - 1e-12);

            // any other injective assignment costs at least as much
            let mut cols: Vec<usize> = (0..mc).collect();
            for i in (1..mc).rev() {
                cols.swap(i, r.random_range(0..=i));
            }
            let alt: f64 = (0..mq).map(|i| 1.0 - cosine(q.row(i), clips.row(cols[i])).unwrap()).sum::<f64>() / mq as f64;
            prop_assert!(om.value <= alt + 1e-12);

            let rev = Matrix::from_fn(mc, 3, |i, j| clips[(cols[i], j)]);
            prop_assert!((optimal_matching_loss(&q, &rev).unwrap().value - om.value).abs() < 1e-12);
        }

        #[test]
        fn qdl_symmetric_under_query_permutation(seed in any::<u64>(), m in 2usize..6) {
            let mut r = rng(seed);
            let q = Matrix::random_normal(m, 4, 1.0, &mut r);
            let cfg = LossConfig::default();
            let a = query_diverse_loss(&q, &cfg).unwrap().0;
            let rev = Matrix::from_fn(m, 4, |i, j| q[(m - 1 - i, j)]);
            let b = query_diverse_loss(&rev, &cfg).unwrap().0;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn triplet_and_infonce_nonnegative(seed in any::<u64>(), n in 2usize..5, extra in 0usize..4) {
            let mut r = rng(seed);
            let owners = random_owners(n + extra, n, &mut r);
            let s = Matrix::random_uniform(n + extra, n, -1.0, 1.0, &mut r);
            prop_assert!(triplet_loss(&s, &owners, 0.2).unwrap().0 >= 0.0);
            prop_assert!(infonce_loss(&s, &owners, 0.07).unwrap().0 >= 0.0);
        }
    }
}
