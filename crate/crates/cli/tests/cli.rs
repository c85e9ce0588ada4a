use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spqi::catalog::Dataset;
use spqi::embeddings::CatalogIndex;
use spqi::Error;
use spqi_cli::checkpoint::{Checkpoint, VERSION};
use spqi_cli::config::RunConfig;
use spqi_cli::CliError;

const SMALL: &str = r#"
[synth]
n_users = 500
n_products = 80
n_categories = 16
n_questions = 2400

[skipgram]
epochs = 2

[train]
max_stage2_epochs = 2

[train.model]
dim = 8
text_dim = 8
table_dim = 4
layers = 2
"#;

fn spqi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spqi"))
        .args(args)
        .env("SPQI_THREADS", "1")
        .output()
        .expect("spawn spqi")
}

fn ok(args: &[&str]) -> Output {
    let out = spqi(args);
    assert!(
        out.status.success(),
        "spqi {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    let data = root.join("data");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    Fixture {
        _dir: dir,
        root,
        config,
        data,
    }
}

fn train(f: &Fixture, name: &str, extra: &[&str]) -> PathBuf {
    let out = f.root.join(name);
    let mut args = vec!["train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn usage_errors_exit_2() {
    let out = spqi(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    let out = spqi(&["train", "--variant", "gcn-deluxe"]);
    assert_eq!(out.status.code(), Some(2));
    let out = spqi(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = spqi(&["gen-data", "--config", s(&bad), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let out = spqi(&["analyze", "--data", s(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn help_documents_flags() {
    let out = ok(&["train", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--data", "--variant", "--features", "--config", "--seed", "--out"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn config_echo_round_trips() {
    let cfg = RunConfig::parse(SMALL, Path::new("small.toml")).unwrap();
    assert_eq!(cfg.synth.n_questions, 2400);
    assert_eq!(cfg.train.model.dim, 8);
    let echoed = cfg.to_toml().unwrap();
    assert_eq!(RunConfig::parse(&echoed, Path::new("echo")).unwrap(), cfg);
    let defaults = RunConfig::default().to_toml().unwrap();
    assert_eq!(RunConfig::parse(&defaults, Path::new("echo")).unwrap(), RunConfig::default());
}

#[test]
fn gen_data_is_reproducible() {
    let f = fixture();
    let again = f.root.join("again");
    ok(&["gen-data", "--config", s(&f.config), "--out", s(&again)]);
    for file in ["catalog.jsonl", "purchases.jsonl", "questions.jsonl", "manifest.json"] {
        assert_eq!(
            std::fs::read(f.data.join(file)).unwrap(),
            std::fs::read(again.join(file)).unwrap(),
            "{file}"
        );
    }
    let echo = |d: &Path| RunConfig::parse(&std::fs::read_to_string(d.join("config.toml")).unwrap(), d).unwrap();
    let (a, b) = (echo(&f.data), echo(&again));
    assert_eq!(RunConfig { out: None, ..a }, RunConfig { out: None, ..b });
}

#[test]
fn train_eval_score_pipeline() {
    let f = fixture();
    let emb = f.root.join("emb.spq");
    ok(&["pretrain", "--data", s(&f.data), "--config", s(&f.config), "--out", s(&emb)]);
    let run = train(&f, "run", &["--variant", "spqi-moe", "--features", "text,behavior", "--embeddings", s(&emb)]);

    let ckpt = Checkpoint::load(&run.join("checkpoint.spq")).unwrap();
    let info = ckpt.model_info().unwrap();
    assert_eq!(info.features.to_string(), "text_q,text_a,behavior");

    // Evaluating the stored best parameters reproduces the recorded
    // validation metrics.
    let history: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("history.json")).unwrap()).unwrap();
    let best = history["best_epoch"].as_u64().unwrap() as usize;
    let recorded = &history["epochs"][best - 1]["val_metrics"];
    let out = ok(&["eval", "--checkpoint", s(&run.join("checkpoint.spq")), "--data", s(&f.data), "--split", "validation"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(&report["metrics"], recorded);
    assert_eq!(report["loss"], history["epochs"][best - 1]["val_loss"]);

    let questions = std::fs::read_to_string(f.data.join("questions.jsonl")).unwrap();
    let one = f.root.join("one.jsonl");
    std::fs::write(&one, questions.lines().next().unwrap()).unwrap();
    let out = ok(&["score", "--checkpoint", s(&run.join("checkpoint.spq")), "--data", s(&f.data), "--question-file", s(&one)]);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    let p = rec["probability"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert_eq!(rec["spq"].as_bool().unwrap(), p >= 0.5);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let f = fixture();
    let a = train(&f, "a", &["--variant", "mlp-moe", "--seed", "4"]);
    let b = train(&f, "b", &["--variant", "mlp-moe", "--seed", "4"]);
    let c = train(&f, "c", &["--variant", "mlp-moe", "--seed", "5"]);
    let bytes = |d: &Path| std::fs::read(d.join("checkpoint.spq")).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_ne!(bytes(&a), bytes(&c));
    assert_eq!(
        std::fs::read(a.join("history.json")).unwrap(),
        std::fs::read(b.join("history.json")).unwrap()
    );
}

#[test]
fn checkpoint_round_trip_and_incompatibility() {
    let f = fixture();
    let run = train(&f, "run", &["--variant", "spqi-concat"]);
    let path = run.join("checkpoint.spq");
    let bytes = std::fs::read(&path).unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.to_bytes().unwrap(), bytes);

    let ds = Dataset::read_dir(&f.data).unwrap();
    let index = CatalogIndex::new(&ds.catalog).unwrap();
    let (_, params) = ckpt.to_model(&index).unwrap();
    let mut stored = Vec::new();
    params.map(&mut |_, _, t| stored.push(t.clone()));
    assert_eq!(stored, ckpt.tensors);

    let mut wrong_version = bytes.clone();
    wrong_version[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&wrong_version),
        Err(CliError::Core(Error::Incompatible(_)))
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 8]),
        Err(CliError::Core(Error::Incompatible(_)))
    ));

    // A dataset with a different catalog.
    let other = f.root.join("other");
    let cfg = f.config.to_str().unwrap();
    ok(&["gen-data", "--config", cfg, "--out", s(&other), "--seed", "99"]);
    let text = std::fs::read_to_string(f.root.join("small.toml")).unwrap().replace("n_products = 80", "n_products = 90");
    let bigger = f.root.join("bigger.toml");
    std::fs::write(&bigger, text).unwrap();
    let wide = f.root.join("wide");
    ok(&["gen-data", "--config", s(&bigger), "--out", s(&wide)]);
    let wide_ds = Dataset::read_dir(&wide).unwrap();
    let wide_index = CatalogIndex::new(&wide_ds.catalog).unwrap();
    assert!(matches!(ckpt.to_model(&wide_index), Err(CliError::Core(Error::Incompatible(_)))));
    let out = spqi(&["eval", "--checkpoint", s(&path), "--data", s(&wide)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible"));

    // Embedding files are not models.
    let emb = f.root.join("emb.spq");
    ok(&["pretrain", "--data", s(&f.data), "--config", s(&f.config), "--out", s(&emb)]);
    let e = Checkpoint::load(&emb).unwrap();
    assert_eq!(e.to_bytes().unwrap(), std::fs::read(&emb).unwrap());
    assert!(matches!(e.to_model(&index), Err(CliError::Core(Error::Incompatible(_)))));
    assert!(e.to_embeddings().is_ok());
}

#[test]
fn analyze_reports_correlations() {
    let f = fixture();
    let out = ok(&["analyze", "--data", s(&f.data)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let r = report["windows"]["r_prior_purchase_vs_spq"].as_f64().unwrap();
    assert!(r > 0.4, "planted correlation {r}");
    assert!(report["categories"].as_array().unwrap().len() > 1);
}

#[test]
fn grid_writes_every_cell() {
    let f = fixture();
    let out = f.root.join("grid");
    let text = std::fs::read_to_string(&f.config).unwrap().replace("max_stage2_epochs = 2", "max_stage2_epochs = 1");
    std::fs::write(&f.config, text).unwrap();
    ok(&["grid", "--data", s(&f.data), "--config", s(&f.config), "--seeds", "1", "--out", s(&out)]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("grid.json")).unwrap()).unwrap();
    assert_eq!(report["records"].as_array().unwrap().len(), 26);
    assert_eq!(report["summary"].as_array().unwrap().len(), 26);
    let rec = &report["records"][0];
    for key in ["variant", "seed", "batch_size", "optimizer", "stage1_lr", "stage2_lr", "f1"] {
        assert!(!rec[key].is_null(), "{key}");
    }
    assert!(out.join("config.toml").exists());
}
