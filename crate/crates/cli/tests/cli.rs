use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SPEC: &str = r#"
train_videos = 8
test_videos = 4
frames = [8, 12]
moments = [1, 2]
moment_ratio = [0.1, 0.3]
feature_dim = 8
query_words = [2, 4]
atoms = 12
concepts = 30
seed = 5
"#;

const TRAIN: &str = r#"
epochs = 2
batch_size = 4
validation_fraction = 0.25

[model]
video_feature_dim = 8
text_feature_dim = 8
width = 8
heads = 2
ffn_hidden = 8
max_frames = 12
clips = 4
max_words = 4
sigmas = [0.5, 3.0, "inf"]
"#;

fn prvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prvr"))
        .args(args)
        .env("PRVR_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = prvr(args);
    assert!(
        out.status.success(),
        "prvr {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("spec.toml"), SPEC).unwrap();
        fs::write(root.join("train.toml"), TRAIN).unwrap();
        Self { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn corpus(&self) -> PathBuf {
        let out = self.p("corpus");
        if !out.exists() {
            ok(&[
                "gen-data",
                "--config",
                s(&self.p("spec.toml")),
                "--out",
                s(&out),
            ]);
        }
        out
    }

    fn trained(&self) -> PathBuf {
        let out = self.p("run");
        if !out.exists() {
            ok(&[
                "train",
                "--config",
                s(&self.p("train.toml")),
                "--corpus",
                s(&self.corpus()),
                "--out",
                s(&out),
            ]);
        }
        out.join("checkpoint.bin")
    }
}

#[test]
fn gen_data_is_deterministic_and_writes_manifests() {
    let f = Fixture::new();
    let spec = f.p("spec.toml");
    ok(&["gen-data", "--config", s(&spec), "--out", s(&f.p("a"))]);
    ok(&["gen-data", "--config", s(&spec), "--out", s(&f.p("b"))]);
    assert_eq!(
        fs::read(f.p("a/corpus.bin")).unwrap(),
        fs::read(f.p("b/corpus.bin")).unwrap()
    );
    assert_eq!(
        json(&f.p("a/manifest.json"))["checksum"],
        json(&f.p("b/manifest.json"))["checksum"]
    );
    let run = json(&f.p("a/run.json"));
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["status"], "ok");
    assert_eq!(run["seed"], 5);
    assert!(run["config_hash"].as_str().unwrap().len() == 64);

    ok(&[
        "gen-data",
        "--config",
        s(&spec),
        "--seed",
        "6",
        "--out",
        s(&f.p("c")),
    ]);
    assert_ne!(
        json(&f.p("a/manifest.json"))["checksum"],
        json(&f.p("c/manifest.json"))["checksum"]
    );
}

#[test]
fn default_spec_smoke() {
    let f = Fixture::new();
    let out = ok(&["gen-data", "--out", s(&f.p("d"))]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("250 videos"));
}

#[test]
fn invalid_inputs_exit_nonzero() {
    let f = Fixture::new();
    fs::write(
        f.p("bad.toml"),
        "frames = [4, 6]\nmoments = [5, 5]\nmoment_ratio = [0.3, 0.5]\n",
    )
    .unwrap();
    let out = prvr(&[
        "gen-data",
        "--config",
        s(&f.p("bad.toml")),
        "--out",
        s(&f.p("bad")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(json(&f.p("bad/run.json"))["status"]
        .as_str()
        .unwrap()
        .starts_with("error"));

    let out = prvr(&[
        "train",
        "--corpus",
        s(&f.p("missing")),
        "--out",
        s(&f.p("t")),
    ]);
    assert!(!out.status.success());

    fs::write(f.p("typo.toml"), "epochz = 3\n").unwrap();
    let out = prvr(&[
        "train",
        "--config",
        s(&f.p("typo.toml")),
        "--corpus",
        s(&f.corpus()),
        "--out",
        s(&f.p("t2")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn train_eval_index_diagnose_pipeline() {
    let f = Fixture::new();
    let ckpt = f.trained();
    let log = fs::read_to_string(f.p("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&f.corpus()),
        "--out",
        s(&f.p("e1")),
    ]);
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&f.corpus()),
        "--out",
        s(&f.p("e2")),
    ]);
    let m = json(&f.p("e1/metrics.json"));
    let get = |k: &str| m[k].as_f64().unwrap();
    assert!(get("r1") <= get("r5") && get("r5") <= get("r10") && get("r10") <= get("r100"));
    assert!((get("sum_r") - (get("r1") + get("r5") + get("r10") + get("r100"))).abs() < 1e-9);
    let m2 = json(&f.p("e2/metrics.json"));
    assert_eq!(m["sum_r"], m2["sum_r"]);

    ok(&[
        "index",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&f.corpus()),
        "--out",
        s(&f.p("idx")),
    ]);
    let index = f.p("idx/index.bin");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&f.corpus()),
        "--index",
        s(&index),
        "--out",
        s(&f.p("e3")),
    ]);
    assert_eq!(json(&f.p("e3/metrics.json"))["sum_r"], m["sum_r"]);

    ok(&[
        "diagnose",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&f.corpus()),
        "--split",
        "all",
        "--out",
        s(&f.p("diag")),
    ]);
    let report = json(&f.p("diag/collapse.json"));
    let records = fs::read_to_string(f.p("diag/positioning.jsonl")).unwrap();
    assert_eq!(
        report["videos"].as_u64().unwrap() as usize,
        records.lines().count()
    );
    let heat = fs::read_to_string(f.p("diag/heatmaps.jsonl")).unwrap();
    for line in heat.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let sims = v["clip_similarity"].as_array().unwrap();
        assert_eq!(sims.len(), 4);
        assert!(sims.iter().all(|x| x.as_f64().unwrap().abs() <= 1.0));
    }
}

#[test]
fn eval_refuses_foreign_index() {
    let f = Fixture::new();
    let ckpt = f.trained();
    fs::write(
        f.p("other.toml"),
        TRAIN.replace("epochs = 2", "epochs = 1\nseed = 9"),
    )
    .unwrap();
    ok(&[
        "train",
        "--config",
        s(&f.p("other.toml")),
        "--corpus",
        s(&f.corpus()),
        "--out",
        s(&f.p("other")),
    ]);
    ok(&[
        "index",
        "--checkpoint",
        s(&f.p("other/checkpoint.bin")),
        "--corpus",
        s(&f.corpus()),
        "--out",
        s(&f.p("oidx")),
    ]);
    let out = prvr(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&f.corpus()),
        "--index",
        s(&f.p("oidx/index.bin")),
        "--out",
        s(&f.p("bad")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn resume_continues_bit_exactly() {
    let f = Fixture::new();
    let full = f.trained();
    fs::write(f.p("one.toml"), TRAIN.replace("epochs = 2", "epochs = 1")).unwrap();
    ok(&[
        "train",
        "--config",
        s(&f.p("one.toml")),
        "--corpus",
        s(&f.corpus()),
        "--out",
        s(&f.p("half")),
    ]);
    ok(&[
        "train",
        "--config",
        s(&f.p("train.toml")),
        "--corpus",
        s(&f.corpus()),
        "--checkpoint",
        s(&f.p("half/checkpoint.bin")),
        "--out",
        s(&f.p("half")),
    ]);
    assert_eq!(
        fs::read(full).unwrap(),
        fs::read(f.p("half/checkpoint.bin")).unwrap()
    );
}

#[test]
fn training_is_reproducible_across_thread_counts() {
    let f = Fixture::new();
    let a = f.trained();
    let out = Command::new(env!("CARGO_BIN_EXE_prvr"))
        .args([
            "train",
            "--config",
            s(&f.p("train.toml")),
            "--corpus",
            s(&f.corpus()),
            "--out",
            s(&f.p("single")),
        ])
        .env("PRVR_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        fs::read(a).unwrap(),
        fs::read(f.p("single/checkpoint.bin")).unwrap()
    );
}

#[test]
fn bench_reports_latency_and_bytes() {
    let f = Fixture::new();
    fs::write(
        f.p("one.toml"),
        SPEC.replace("test_videos = 4", "test_videos = 1"),
    )
    .unwrap();
    ok(&[
        "gen-data",
        "--config",
        s(&f.p("one.toml")),
        "--out",
        s(&f.p("c1")),
    ]);
    let ckpt = f.trained();
    ok(&[
        "index",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&f.p("c1")),
        "--out",
        s(&f.p("i1")),
    ]);
    ok(&[
        "bench",
        "--index",
        s(&f.p("i1/index.bin")),
        "--queries",
        "20",
        "--out",
        s(&f.p("b1")),
    ]);
    let b = json(&f.p("b1/bench.json"));
    assert_eq!(b["videos"], 1);
    assert!(b["p50_us"].as_f64().unwrap() <= b["p95_us"].as_f64().unwrap());
    // 1 x (12 frames + 4 clips) x 8 wide x 4 bytes
    assert_eq!(b["predicted_bytes"], 512);
    assert_eq!(b["index_bytes"], 512);
    assert_eq!(
        b["file_bytes"].as_u64().unwrap(),
        fs::metadata(f.p("i1/index.bin")).unwrap().len()
    );

    let out = prvr(&[
        "bench",
        "--index",
        s(&f.p("nope.bin")),
        "--out",
        s(&f.p("b2")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn ablation_grid_smoke_with_failing_cell() {
    let f = Fixture::new();
    let grid = format!(
        "seeds = [0, 1]\n\n[base]\n{}\n[[cells]]\nname = \"tcm\"\n\n[[cells]]\nname = \"avg\"\n[cells.overrides.model]\naggregation = \"avg\"\n\n[[cells]]\nname = \"broken\"\n[cells.overrides]\nbatch_size = 1\n",
        TRAIN.replace("[model]", "[base.model]").replace("epochs = 2", "epochs = 1")
    );
    fs::write(f.p("grid.toml"), grid).unwrap();
    ok(&[
        "ablate",
        "--grid",
        s(&f.p("grid.toml")),
        "--corpus",
        s(&f.corpus()),
        "--out",
        s(&f.p("abl")),
    ]);
    let table = json(&f.p("abl/ablation.json"));
    let rows = table.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0]["runs"].as_array().unwrap().len(), 2);
    assert!(rows[0]["median_sum_r"].as_f64().is_some());
    assert!(rows[1]["median_sum_r"].as_f64().is_some());
    assert_eq!(rows[2]["failures"], 2);
    assert!(rows[2]["median_sum_r"].is_null());
    assert!(fs::read_to_string(f.p("abl/ablation.md"))
        .unwrap()
        .contains("| broken |"));
}

#[test]
fn shipped_configs_match_defaults_and_grids_parse() {
    use prvr::datagen::CorpusSpec;
    use prvr::trainer::TrainConfig;
    use prvr_cli::commands::{read_toml, Grid};

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let spec: CorpusSpec = read_toml(&dir.join("desk_corpus.toml")).unwrap();
    assert_eq!(spec, CorpusSpec::default());
    let train: TrainConfig = read_toml(&dir.join("train.toml")).unwrap();
    assert_eq!(train, TrainConfig::default());
    for (name, cells) in [
        ("fusion_ablation.toml", 5),
        ("aggregation.toml", 4),
        ("constraint.toml", 3),
    ] {
        let grid: Grid = read_toml(&dir.join(name)).unwrap();
        assert_eq!(grid.cells.len(), cells, "{name}");
        assert_eq!(grid.seeds, vec![0, 1, 2]);
        for cell in &grid.cells {
            grid.cell_config(cell, 0).unwrap();
        }
    }
}
