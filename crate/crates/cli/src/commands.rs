use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use prvr::codec::sha256_hex;
use prvr::datagen::{generate, load_corpus, save_corpus, Corpus, CorpusSpec, Split, CORPUS_FILE};
use prvr::diagnostics::{collapse_report, similarity_heatmap, CollapseReport};
use prvr::numerics::Matrix;
use prvr::retrieval::{
    evaluate, load_index, rank_videos, save_index, MetricsRecord, MetricsReport, RetrievalIndex,
};
use prvr::trainer::{
    build_index, encode_queries, load_checkpoint, save_checkpoint, train_with, Checkpoint,
    EpochRecord, TrainConfig,
};
use prvr::Error;

use crate::manifest::RunTracker;

pub const CHECKPOINT_NAME: &str = "checkpoint.bin";
pub const LOG_NAME: &str = "train_log.jsonl";
pub const INDEX_NAME: &str = "index.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    pub fn videos(self, corpus: &Corpus) -> Vec<u32> {
        match self {
            SplitArg::Train => corpus.video_ids(Split::Train),
            SplitArg::Test => corpus.video_ids(Split::Test),
            SplitArg::All => (0..corpus.videos.len() as u32).collect(),
        }
    }
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn config_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_toml)
}

/// Hash of the canonical JSON form of any config.
pub fn canonical_hash<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

fn load_corpus_dir(dir: &Path) -> Result<Corpus> {
    if !dir.join(CORPUS_FILE).exists() {
        bail!("no corpus at {}", dir.display());
    }
    Ok(load_corpus(dir)?)
}

pub fn gen_data(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    run: &mut RunTracker,
) -> Result<()> {
    let mut spec: CorpusSpec = config_or_default(config)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    run.config(config, canonical_hash(&spec)?);
    run.seed(spec.seed);
    let corpus = generate(&spec)?;
    let manifest = save_corpus(&corpus, out)?;
    run.output(&out.join(CORPUS_FILE));
    println!(
        "generated {} videos, {} queries; checksum {}",
        corpus.videos.len(),
        corpus.queries.len(),
        manifest.checksum
    );
    Ok(())
}

pub fn train(
    config: Option<&Path>,
    corpus_dir: &Path,
    seed: Option<u64>,
    resume: Option<&Path>,
    out: &Path,
    run: &mut RunTracker,
) -> Result<()> {
    let mut cfg: TrainConfig = config_or_default(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    run.config(config, cfg.hash());
    run.seed(cfg.seed);
    run.input(corpus_dir);
    let corpus = load_corpus_dir(corpus_dir)?;
    let start = match resume {
        Some(p) => {
            run.input(p);
            Some(load_checkpoint(p)?)
        }
        None => None,
    };
    fs::create_dir_all(out)?;
    let ckpt_path = out.join(CHECKPOINT_NAME);
    let log_path = out.join(LOG_NAME);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)?;
    let mut last_good: Option<usize> = start.as_ref().map(|c| c.epochs_done);
    let result = train_with(
        &cfg,
        &corpus,
        start,
        &mut |record: &EpochRecord, ckpt: &Checkpoint| {
            save_checkpoint(ckpt, &ckpt_path)?;
            writeln!(log, "{}", serde_json::to_string(record)?)?;
            last_good = Some(ckpt.epochs_done);
            println!(
                "epoch {:>3}  loss {:.4}  val SumR {:.2}  lr {:.2e}",
                record.epoch, record.loss.total, record.validation.sum_r, record.lr
            );
            Ok(())
        },
    );
    run.output(&ckpt_path);
    run.output(&log_path);
    match result {
        Ok(outcome) => {
            let c = &outcome.checkpoint;
            println!(
                "best epoch {} with val SumR {:.2}",
                c.best_epoch, c.best_sum_r
            );
            Ok(())
        }
        Err(e @ Error::Diverged { .. }) => {
            let kept = last_good.map_or("no checkpoint was written".to_string(), |n| {
                format!(
                    "{} holds the last good state after {n} epochs",
                    ckpt_path.display()
                )
            });
            bail!("{e}; partial run: {kept}")
        }
        Err(e) => Err(e.into()),
    }
}

fn split_index(ckpt: &Checkpoint, corpus: &Corpus, split: SplitArg) -> Result<RetrievalIndex> {
    let model = ckpt.model()?;
    Ok(build_index(
        &model,
        corpus,
        &split.videos(corpus),
        ckpt.fingerprint(),
    )?)
}

pub fn index(
    checkpoint: &Path,
    corpus_dir: &Path,
    split: SplitArg,
    out: &Path,
    run: &mut RunTracker,
) -> Result<()> {
    run.input(checkpoint);
    run.input(corpus_dir);
    let ckpt = load_checkpoint(checkpoint)?;
    run.config(None, ckpt.config_hash());
    run.seed(ckpt.config.seed);
    let corpus = load_corpus_dir(corpus_dir)?;
    let index = split_index(&ckpt, &corpus, split)?;
    fs::create_dir_all(out)?;
    let path = out.join(INDEX_NAME);
    save_index(&index, &path)?;
    run.output(&path);
    println!(
        "indexed {} videos ({} bytes)",
        index.len(),
        index.file_bytes()
    );
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    corpus_dir: &Path,
    index_path: Option<&Path>,
    split: SplitArg,
    out: &Path,
    run: &mut RunTracker,
) -> Result<()> {
    let started = Instant::now();
    run.input(checkpoint);
    run.input(corpus_dir);
    let ckpt = load_checkpoint(checkpoint)?;
    run.config(None, ckpt.config_hash());
    run.seed(ckpt.config.seed);
    let corpus = load_corpus_dir(corpus_dir)?;
    let index = match index_path {
        Some(p) => {
            run.input(p);
            load_index(p, Some(ckpt.fingerprint()))?
        }
        None => split_index(&ckpt, &corpus, split)?,
    };
    let model = ckpt.model()?;
    let queries = encode_queries(&model, &corpus, index.ids())?;
    let metrics = evaluate(&index, &queries, ckpt.config.weights)?;
    let record = MetricsRecord {
        config_hash: ckpt.config_hash(),
        metrics,
        wall_time_s: started.elapsed().as_secs_f64(),
        peak_index_bytes: index.payload_bytes(),
    };
    fs::create_dir_all(out)?;
    let path = out.join("metrics.json");
    write_json(&path, &record)?;
    run.output(&path);
    println!(
        "R@1 {:.2}  R@5 {:.2}  R@10 {:.2}  R@100 {:.2}  SumR {:.2}  ({} queries)",
        metrics.r1, metrics.r5, metrics.r10, metrics.r100, metrics.sum_r, metrics.queries
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRecord {
    pub videos: usize,
    pub width: usize,
    pub max_frames: usize,
    pub clips: usize,
    pub queries: usize,
    pub p50_us: f64,
    pub p95_us: f64,
    pub mean_us: f64,
    pub index_bytes: usize,
    pub file_bytes: usize,
    /// videos x (max_frames + clips) x width x 4
    pub predicted_bytes: usize,
    /// `file_bytes / predicted_bytes - 1`
    pub overhead_ratio: f64,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn bench(
    index_path: &Path,
    queries: usize,
    seed: u64,
    out: &Path,
    run: &mut RunTracker,
) -> Result<()> {
    if queries == 0 {
        bail!("--queries must be at least 1");
    }
    run.input(index_path);
    run.seed(seed);
    let index = load_index(index_path, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = Matrix::random_normal(queries, index.width(), 1.0, &mut rng);
    let weights = Default::default();
    let mut times = Vec::with_capacity(queries);
    for q in probes.iter_rows() {
        let t = Instant::now();
        let ranked = rank_videos(q, &index, weights)?;
        std::hint::black_box(&ranked);
        times.push(t.elapsed().as_secs_f64() * 1e6);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(f64::total_cmp);
    let predicted = index.len() * (index.max_frames() + index.clips()) * index.width() * 4;
    let record = BenchRecord {
        videos: index.len(),
        width: index.width(),
        max_frames: index.max_frames(),
        clips: index.clips(),
        queries,
        p50_us: percentile(&times, 0.5),
        p95_us: percentile(&times, 0.95),
        mean_us: mean,
        index_bytes: index.payload_bytes(),
        file_bytes: index.file_bytes(),
        predicted_bytes: predicted,
        overhead_ratio: index.file_bytes() as f64 / predicted as f64 - 1.0,
    };
    fs::create_dir_all(out)?;
    let path = out.join("bench.json");
    write_json(&path, &record)?;
    run.output(&path);
    println!(
        "{} videos: p50 {:.1} us, p95 {:.1} us per query; index {} bytes (predicted {}, file {})",
        record.videos,
        record.p50_us,
        record.p95_us,
        record.index_bytes,
        record.predicted_bytes,
        record.file_bytes
    );
    Ok(())
}

/// Ablation grid: a base training config, seeds, and named cells whose
/// overrides are merged into the base.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub base: toml::Table,
    pub cells: Vec<GridCell>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub name: String,
    #[serde(default)]
    pub overrides: toml::Table,
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl Grid {
    pub fn cell_config(&self, cell: &GridCell, seed: u64) -> Result<TrainConfig> {
        let mut table = self.base.clone();
        merge(&mut table, &cell.overrides);
        let mut cfg: TrainConfig = table
            .try_into()
            .with_context(|| format!("config of cell {}", cell.name))?;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub config_hash: Option<String>,
    pub metrics: Option<MetricsReport>,
    pub mean_positioning_variance: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Mean total training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub runs: Vec<SeedResult>,
    pub median_sum_r: Option<f64>,
    pub median_positioning_variance: Option<f64>,
    pub failures: usize,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Trains one cell under one seed and measures it on the test split.
pub fn run_cell(grid: &Grid, cell: &GridCell, seed: u64, corpus: &Corpus) -> SeedResult {
    let started = Instant::now();
    let attempt = || -> Result<(String, MetricsReport, f64, usize, Vec<f64>)> {
        let cfg = grid.cell_config(cell, seed)?;
        let outcome = train_with(&cfg, corpus, None, &mut |_, _| Ok(()))?;
        let losses = outcome.log.iter().map(|r| r.loss.total).collect();
        let ckpt = outcome.checkpoint;
        let model = ckpt.model()?;
        let index = build_index(
            &model,
            corpus,
            &corpus.video_ids(Split::Test),
            ckpt.fingerprint(),
        )?;
        let metrics = evaluate(
            &index,
            &encode_queries(&model, corpus, index.ids())?,
            cfg.weights,
        )?;
        let collapse = collapse_report(&index, corpus, &model, &cell.name)?;
        Ok((
            cfg.hash(),
            metrics,
            collapse.mean_variance,
            ckpt.best_epoch,
            losses,
        ))
    };
    let result = attempt();
    let wall_time_s = started.elapsed().as_secs_f64();
    match result {
        Ok((hash, metrics, variance, best_epoch, epoch_losses)) => SeedResult {
            seed,
            config_hash: Some(hash),
            metrics: Some(metrics),
            mean_positioning_variance: Some(variance),
            best_epoch: Some(best_epoch),
            epoch_losses,
            wall_time_s,
            error: None,
        },
        Err(e) => SeedResult {
            seed,
            config_hash: None,
            metrics: None,
            mean_positioning_variance: None,
            best_epoch: None,
            epoch_losses: Vec::new(),
            wall_time_s,
            error: Some(format!("{e:#}")),
        },
    }
}

pub fn summarize(name: &str, runs: Vec<SeedResult>) -> CellResult {
    let sums: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.metrics.map(|m| m.sum_r))
        .collect();
    let vars: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.mean_positioning_variance)
        .collect();
    CellResult {
        name: name.to_string(),
        failures: runs.iter().filter(|r| r.error.is_some()).count(),
        median_sum_r: median(&sums),
        median_positioning_variance: median(&vars),
        runs,
    }
}

pub fn ablate(grid_path: &Path, corpus_dir: &Path, out: &Path, run: &mut RunTracker) -> Result<()> {
    run.input(grid_path);
    run.input(corpus_dir);
    let grid: Grid = read_toml(grid_path)?;
    if grid.cells.is_empty() || grid.seeds.is_empty() {
        bail!("grid needs at least one cell and one seed");
    }
    run.config(
        Some(grid_path),
        canonical_hash(&(
            &grid.base,
            grid.cells
                .iter()
                .map(|c| (&c.name, &c.overrides))
                .collect::<Vec<_>>(),
            &grid.seeds,
        ))?,
    );
    let corpus = load_corpus_dir(corpus_dir)?;
    fs::create_dir_all(out)?;
    let mut table = Vec::new();
    for cell in &grid.cells {
        let runs: Vec<SeedResult> = grid
            .seeds
            .iter()
            .map(|&seed| {
                let r = run_cell(&grid, cell, seed, &corpus);
                match (&r.metrics, &r.error) {
                    (Some(m), _) => {
                        println!("{:<24} seed {:<4} SumR {:.2}", cell.name, seed, m.sum_r)
                    }
                    (_, Some(e)) => println!("{:<24} seed {:<4} FAILED: {e}", cell.name, seed),
                    _ => {}
                }
                r
            })
            .collect();
        table.push(summarize(&cell.name, runs));
        write_json(&out.join("ablation.json"), &table)?;
    }
    let path = out.join("ablation.json");
    run.output(&path);
    let md = out.join("ablation.md");
    fs::write(&md, markdown_table(&table))?;
    run.output(&md);
    print!("{}", markdown_table(&table));
    Ok(())
}

pub fn markdown_table(rows: &[CellResult]) -> String {
    let mut s = String::from(
        "| cell | median SumR | median positioning variance | failures |\n|---|---|---|---|\n",
    );
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.name,
            fmt(r.median_sum_r),
            fmt(r.median_positioning_variance),
            r.failures
        ));
    }
    s
}

#[derive(Debug, Serialize)]
struct HeatmapRecord {
    video: u32,
    query: u32,
    clip_similarity: Vec<f64>,
}

pub fn diagnose(
    checkpoint: &Path,
    corpus_dir: &Path,
    split: SplitArg,
    label: Option<&str>,
    out: &Path,
    run: &mut RunTracker,
) -> Result<()> {
    run.input(checkpoint);
    run.input(corpus_dir);
    let ckpt = load_checkpoint(checkpoint)?;
    run.config(None, ckpt.config_hash());
    run.seed(ckpt.config.seed);
    let corpus = load_corpus_dir(corpus_dir)?;
    let index = split_index(&ckpt, &corpus, split)?;
    let model = ckpt.model()?;
    let label = label.map_or_else(|| ckpt.config_hash()[..12].to_string(), str::to_string);
    let report: CollapseReport = collapse_report(&index, &corpus, &model, &label)?;
    fs::create_dir_all(out)?;

    let records_path = out.join("positioning.jsonl");
    let mut f = fs::File::create(&records_path)?;
    for r in &report.records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    let heat_path = out.join("heatmaps.jsonl");
    let mut f = fs::File::create(&heat_path)?;
    let by_video = corpus.queries_by_video();
    for (pos, &v) in index.ids().iter().enumerate() {
        let clips = index.embedding(pos).clip;
        for &q in &by_video[v as usize] {
            let sentence = model.encode_text(&corpus.queries[q as usize])?.sentence;
            let rec = HeatmapRecord {
                video: v,
                query: q,
                clip_similarity: similarity_heatmap(&sentence, &clips),
            };
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    let summary = CollapseReport {
        records: Vec::new(),
        ..report.clone()
    };
    let summary_path = out.join("collapse.json");
    write_json(&summary_path, &summary)?;
    for p in [&records_path, &heat_path, &summary_path] {
        run.output(p);
    }
    println!(
        "{}: {} multi-query videos, mean variance {:.3}, median {:.3}, zero share {:.2}",
        report.label,
        report.videos,
        report.mean_variance,
        report.median_variance,
        report.zero_fraction
    );
    Ok(())
}
