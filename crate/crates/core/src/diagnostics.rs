//! Semantic-collapse instrumentation.
//!
//! For every video with several queries, each query is mapped to its best
//! clip and the spread of those clip indices is summarised. Positions are
//! clip indices in `[0, M_c)`, not normalised time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Corpus;
use crate::encoders::Model;
use crate::error::{Error, Result};
use crate::numerics::{cosine, max_cosine, Matrix};
use crate::retrieval::RetrievalIndex;

pub const HISTOGRAM_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositioningRecord {
    pub video: u32,
    /// Best clip index per query, in query order.
    pub indices: Vec<usize>,
    /// Population variance of `indices`.
    pub variance: f64,
}

/// Maps each query row to its highest-cosine clip (first index on ties) and
/// returns the population variance of the chosen indices.
pub fn positioning_variance(
    video: u32,
    clips: &Matrix,
    queries: &Matrix,
) -> Result<PositioningRecord> {
    if clips.rows() == 0 || queries.rows() == 0 {
        return Err(Error::Empty(
            "clips or queries for positioning variance".into(),
        ));
    }
    if clips.cols() != queries.cols() {
        return Err(Error::dim(format!(
            "clip width {} vs query width {}",
            clips.cols(),
            queries.cols()
        )));
    }
    let indices = queries
        .iter_rows()
        .map(|q| max_cosine(q, clips, clips.rows()).map(|(_, i)| i))
        .collect::<Result<Vec<_>>>()?;
    Ok(PositioningRecord {
        video,
        variance: population_variance(&indices),
        indices,
    })
}

fn population_variance(indices: &[usize]) -> f64 {
    let n = indices.len() as f64;
    let mean = indices.iter().sum::<usize>() as f64 / n;
    indices
        .iter()
        .map(|&i| (i as f64 - mean).powi(2))
        .sum::<f64>()
        / n
}

/// Per-clip cosine of `q` against every clip row. Zero-norm rows score 0.
pub fn similarity_heatmap(q: &[f64], clips: &Matrix) -> Vec<f64> {
    clips
        .iter_rows()
        .map(|c| cosine(q, c).unwrap_or(0.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub label: String,
    pub videos: usize,
    pub mean_variance: f64,
    pub median_variance: f64,
    /// Share of videos whose variance is exactly zero.
    pub zero_fraction: f64,
    pub histogram: Vec<HistogramBin>,
    pub records: Vec<PositioningRecord>,
}

impl CollapseReport {
    pub fn from_records(
        label: &str,
        clips: usize,
        records: Vec<PositioningRecord>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::NoMultiQueryVideos);
        }
        let mut sorted: Vec<f64> = records.iter().map(|r| r.variance).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        // Index variance on [0, M_c) never exceeds ((M_c - 1) / 2)^2.
        let top = (((clips.max(2) - 1) as f64) / 2.0).powi(2);
        let width = top / HISTOGRAM_BINS as f64;
        let mut histogram: Vec<HistogramBin> = (0..HISTOGRAM_BINS)
            .map(|b| HistogramBin {
                lo: b as f64 * width,
                hi: (b + 1) as f64 * width,
                count: 0,
            })
            .collect();
        for v in &sorted {
            let b = ((v / width) as usize).min(HISTOGRAM_BINS - 1);
            histogram[b].count += 1;
        }
        Ok(Self {
            label: label.to_string(),
            videos: n,
            mean_variance: sorted.iter().sum::<f64>() / n as f64,
            median_variance: median,
            zero_fraction: sorted.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64,
            histogram,
            records,
        })
    }
}

/// Positioning variance over every indexed video holding at least two
/// queries, with queries encoded by `model`.
pub fn collapse_report(
    index: &RetrievalIndex,
    corpus: &Corpus,
    model: &Model,
    label: &str,
) -> Result<CollapseReport> {
    let by_video = corpus.queries_by_video();
    let targets: Vec<(usize, u32)> = index
        .ids()
        .iter()
        .enumerate()
        .filter(|(_, &v)| by_video.get(v as usize).is_some_and(|q| q.len() >= 2))
        .map(|(pos, &v)| (pos, v))
        .collect();
    let records = targets
        .par_iter()
        .map(|&(pos, v)| {
            let rows = by_video[v as usize]
                .iter()
                .map(|&q| Ok(model.encode_text(&corpus.queries[q as usize])?.sentence))
                .collect::<Result<Vec<_>>>()?;
            positioning_variance(v, &index.embedding(pos).clip, &Matrix::from_rows(&rows)?)
        })
        .collect::<Result<Vec<_>>>()?;
    CollapseReport::from_records(label, model.config.clips, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, CorpusSpec, Split};
    use crate::trainer::{build_index, initial_checkpoint, TrainConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis(n: usize, d: usize) -> Matrix {
        Matrix::from_fn(n, d, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[test]
    fn collapse_signature() {
        let clips = basis(5, 5);
        let queries =
            Matrix::from_rows(&[vec![0.0, 0.0, 0.0, 1.0, 0.1], vec![0.1, 0.0, 0.0, 2.0, 0.0]])
                .unwrap();
        let r = positioning_variance(0, &clips, &queries).unwrap();
        assert_eq!(r.indices, vec![3, 3]);
        assert_eq!(r.variance, 0.0);
    }

    #[test]
    fn two_queries_at_zero_and_two() {
        let clips = basis(4, 4);
        let queries =
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let r = positioning_variance(0, &clips, &queries).unwrap();
        // ((0 - 1)^2 + (2 - 1)^2) / 2
        assert_eq!(r.variance, 1.0);
    }

    #[test]
    fn single_query_and_empty_inputs() {
        let clips = basis(3, 3);
        let q = Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(positioning_variance(0, &clips, &q).unwrap().variance, 0.0);
        assert!(positioning_variance(0, &clips, &Matrix::zeros(0, 3)).is_err());
        assert!(positioning_variance(0, &Matrix::zeros(0, 3), &q).is_err());
    }

    #[test]
    fn ties_take_first_clip() {
        let clips = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let q = Matrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        assert_eq!(
            positioning_variance(0, &clips, &q).unwrap().indices,
            vec![0]
        );
    }

    #[test]
    fn heatmap_peaks_and_orthogonality() {
        let clips = basis(4, 6);
        let h = similarity_heatmap(clips.row(2), &clips);
        assert_eq!(h, vec![0.0, 0.0, 1.0, 0.0]);
        let h = similarity_heatmap(&[0.0, 0.0, 0.0, 0.0, 1.0, 0.0], &clips);
        assert!(h.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn heatmap_matches_cosine_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clips = Matrix::random_normal(6, 7, 1.0, &mut rng);
        let q = Matrix::random_normal(1, 7, 1.0, &mut rng).into_vec();
        for (i, v) in similarity_heatmap(&q, &clips).iter().enumerate() {
            let c = clips.row(i);
            let dot: f64 = q.iter().zip(c).map(|(a, b)| a * b).sum();
            let nq = q.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nc = c.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((v - dot / (nq * nc)).abs() < 1e-12);
        }
    }

    #[test]
    fn report_on_random_model_is_deterministic() {
        let corpus = generate(&CorpusSpec {
            train_videos: 10,
            test_videos: 12,
            seed: 2,
            ..CorpusSpec::default()
        })
        .unwrap();
        let ckpt = initial_checkpoint(&TrainConfig::default()).unwrap();
        let model = ckpt.model().unwrap();
        let ids = corpus.video_ids(Split::Test);
        let index = build_index(&model, &corpus, &ids, 0).unwrap();
        let a = collapse_report(&index, &corpus, &model, "init").unwrap();
        let b = collapse_report(&index, &corpus, &model, "init").unwrap();
        assert_eq!(a, b);
        let multi = ids
            .iter()
            .filter(|&&v| corpus.query_ids_of(v).len() >= 2)
            .count();
        assert_eq!(a.videos, multi);
        assert_eq!(a.histogram.iter().map(|b| b.count).sum::<usize>(), multi);
    }

    #[test]
    fn report_needs_multi_query_videos() {
        assert!(matches!(
            CollapseReport::from_records("x", 8, vec![]),
            Err(Error::NoMultiQueryVideos)
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn variance_properties(seed in any::<u64>(), m_c in 1usize..9, m_q in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clips = Matrix::random_normal(m_c, 5, 1.0, &mut rng);
            let queries = Matrix::random_normal(m_q, 5, 1.0, &mut rng);
            let r = positioning_variance(1, &clips, &queries).unwrap();
            prop_assert!(r.variance >= 0.0);
            prop_assert!(r.indices.iter().all(|&i| i < m_c));
            let all_same = r.indices.iter().all(|&i| i == r.indices[0]);
            prop_assert_eq!(r.variance == 0.0, all_same);

            let mut perm: Vec<usize> = (0..m_q).collect();
            perm.reverse();
            perm.rotate_left(seed as usize % m_q);
            let shuffled = Matrix::from_fn(m_q, 5, |i, j| queries[(perm[i], j)]);
            let s = positioning_variance(1, &clips, &shuffled).unwrap();
            prop_assert!((s.variance - r.variance).abs() < 1e-12);

            for q in queries.iter_rows() {
                prop_assert!(similarity_heatmap(q, &clips).iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn report_totals(vars in proptest::collection::vec(0usize..8, 1..40)) {
            let records: Vec<PositioningRecord> = vars
                .iter()
                .enumerate()
                .map(|(v, &k)| {
                    let indices = vec![0, k];
                    PositioningRecord { video: v as u32, variance: population_variance(&indices), indices }
                })
                .collect();
            let r = CollapseReport::from_records("p", 8, records).unwrap();
            prop_assert_eq!(r.videos, vars.len());
            prop_assert_eq!(r.histogram.iter().map(|b| b.count).sum::<usize>(), vars.len());
            prop_assert!(r.median_variance >= 0.0 && r.mean_variance >= 0.0);
        }
    }
}
