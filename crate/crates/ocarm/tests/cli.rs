use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ocarm::checkpoint::load_checkpoint;
use ocarm::config::{to_toml, MatrixConfig};
use ocarm_core::datagen::GenConfig;
use ocarm_core::model::ModelConfig;
use ocarm_core::params::Group;
use ocarm_core::trainer::{StageTag, TrainConfig};
use ocarm_core::TaskSpec;

fn small_gen() -> GenConfig {
    GenConfig {
        vocab_size: 40,
        n_topics: 4,
        day_cap: 4,
        hist_len: 8,
        ad_len: 4,
        n_users: 60,
        trend_days: 20,
        min_day_items: 1,
        kappa0: -7.5,
        tasks: vec![TaskSpec::new("LT1", 1), TaskSpec::new("LT3", 3)],
        ..GenConfig::default()
    }
}

fn small_model(gen: &GenConfig) -> ModelConfig {
    ModelConfig {
        d_emb: 8,
        d_repr: 4,
        n_queries: 2,
        backbone_hidden: vec![6, 5],
        tower_hidden: 6,
        proj_hidden: 5,
        ..ModelConfig::for_data(gen)
    }
}

fn small_train(stage: u8) -> TrainConfig {
    TrainConfig {
        stage,
        epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let gen = small_gen();
        std::fs::write(root.join("gen.toml"), to_toml(&gen)).unwrap();
        std::fs::write(root.join("model.toml"), to_toml(&small_model(&gen))).unwrap();
        std::fs::write(root.join("train1.toml"), to_toml(&small_train(1))).unwrap();
        std::fs::write(root.join("train2.toml"), to_toml(&small_train(2))).unwrap();
        Workspace { _dir: dir, root }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_ocarm"))
            .args(args)
            .current_dir(&self.root)
            .env("OCARM_RUN_ROOT", self.root.join("runs"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn gen_data(&self, out: &str) {
        self.ok(&["gen-data", "--config", "gen.toml", "--out", out]);
    }

    fn train(&self, stage: &str, out: &str, teacher: Option<&str>) -> Output {
        let train = if stage == "1" { "train1.toml" } else { "train2.toml" };
        let mut args = vec!["train", "--stage", stage, "--data", "data", "--model", "model.toml", "--train", train, "--out", out];
        if let Some(t) = teacher {
            args.extend(["--teacher", t]);
        }
        self.run(&args)
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_data_writes_both_splits_and_is_deterministic() {
    let ws = Workspace::new();
    ws.gen_data("a");
    ws.gen_data("b");
    for f in ["train.jsonl", "test.jsonl"] {
        assert!(ws.path("a").join(f).exists());
        assert_eq!(read(&ws.path("a").join(f)), read(&ws.path("b").join(f)));
    }
    let manifest = std::fs::read_to_string(ws.path("a/manifest.toml")).unwrap();
    assert!(manifest.contains("exit_status = 0"));
}

#[test]
fn gen_data_seed_override_changes_data() {
    let ws = Workspace::new();
    ws.gen_data("a");
    ws.ok(&["gen-data", "--config", "gen.toml", "--out", "b", "--seed", "99"]);
    assert_ne!(read(&ws.path("a/train.jsonl")), read(&ws.path("b/train.jsonl")));
}

#[test]
fn gen_data_rejects_alpha_out_of_range() {
    let ws = Workspace::new();
    let gen = GenConfig {
        alpha: 1.5,
        ..small_gen()
    };
    std::fs::write(ws.path("bad.toml"), to_toml(&gen)).unwrap();
    let out = ws.run(&["gen-data", "--config", "bad.toml", "--out", "x"]);
    assert!(!out.status.success());
    let msg = stderr(&out);
    assert!(msg.contains("alpha") && msg.contains("[0, 1]"), "{msg}");
}

#[test]
fn gen_data_reports_unknown_fields() {
    let ws = Workspace::new();
    let text = "bogus = 3\n".to_string() + &std::fs::read_to_string(ws.path("gen.toml")).unwrap();
    std::fs::write(ws.path("bad.toml"), text).unwrap();
    let out = ws.run(&["gen-data", "--config", "bad.toml", "--out", "x"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("bogus"), "{}", stderr(&out));
}

#[test]
fn unwritable_out_dir_fails() {
    let ws = Workspace::new();
    std::fs::write(ws.path("file"), "x").unwrap();
    let out = ws.run(&["gen-data", "--config", "gen.toml", "--out", "file/sub"]);
    assert!(!out.status.success());
}

#[test]
fn default_out_dir_follows_run_root() {
    let ws = Workspace::new();
    ws.ok(&["gen-data", "--config", "gen.toml"]);
    assert!(ws.path("runs/gen-data/train.jsonl").exists());
}

#[test]
fn train_eval_pipeline() {
    let ws = Workspace::new();
    ws.gen_data("data");

    let t = ws.train("1", "s1", None);
    assert!(t.status.success(), "{}", stderr(&t));
    let teacher = load_checkpoint(&ws.path("s1/checkpoint.ckpt")).unwrap();
    assert_eq!(teacher.stage, StageTag::Stage1);
    assert!(ws.path("s1/loss_log.csv").exists());

    // reruns are byte-identical
    assert!(ws.train("1", "s1b", None).status.success());
    assert_eq!(read(&ws.path("s1/checkpoint.ckpt")), read(&ws.path("s1b/checkpoint.ckpt")));

    let missing = ws.train("2", "s2x", None);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("--teacher"), "{}", stderr(&missing));

    let s2 = ws.train("2", "s2", Some("s1/checkpoint.ckpt"));
    assert!(s2.status.success(), "{}", stderr(&s2));
    let student = load_checkpoint(&ws.path("s2/checkpoint.ckpt")).unwrap();
    assert_eq!(student.stage, StageTag::Stage2);
    for g in Group::TEACHER {
        assert!(student.params.group_bit_eq(&teacher.params, g), "group {g} changed");
    }

    let refused = ws.run(&["eval", "--checkpoint", "s1/checkpoint.ckpt", "--data", "data/test.jsonl", "--report", "r1.toml"]);
    assert!(!refused.status.success());
    assert!(stderr(&refused).contains("--allow-leakage"));
    assert!(!ws.path("r1.toml").exists());

    ws.ok(&[
        "eval",
        "--checkpoint",
        "s1/checkpoint.ckpt",
        "--data",
        "data/test.jsonl",
        "--report",
        "r1.toml",
        "--allow-leakage",
    ]);
    let leaked = std::fs::read_to_string(ws.path("r1.toml")).unwrap();
    assert!(leaked.contains("leaked-evaluation = true"), "{leaked}");

    ws.ok(&["eval", "--checkpoint", "s2/checkpoint.ckpt", "--data", "data/test.jsonl", "--report", "r2.toml"]);
    let report: ocarm_core::metrics::EvalReport = ocarm::config::read_toml(&ws.path("r2.toml")).unwrap();
    assert!(!report.leaked_evaluation);
    for task in ["LT1", "LT3"] {
        let m = &report.tasks[task];
        assert!(m.auc > 0.0 && m.auc < 1.0);
        assert!(m.gauc > 0.0 && m.gauc <= 1.0);
    }
}

#[test]
fn incompatible_teacher_is_rejected() {
    let ws = Workspace::new();
    ws.gen_data("data");
    assert!(ws.train("1", "s1", None).status.success());
    let other = ModelConfig {
        d_repr: 6,
        ..small_model(&small_gen())
    };
    std::fs::write(ws.path("model.toml"), to_toml(&other)).unwrap();
    let out = ws.train("2", "s2", Some("s1/checkpoint.ckpt"));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("d_repr"), "{}", stderr(&out));
}

#[test]
fn corrupted_checkpoint_fails_eval() {
    let ws = Workspace::new();
    ws.gen_data("data");
    assert!(ws.train("1", "s1", None).status.success());
    let p = ws.path("s1/checkpoint.ckpt");
    let mut bytes = read(&p);
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    let out = ws.run(&["eval", "--checkpoint", "s1/checkpoint.ckpt", "--data", "data/test.jsonl", "--report", "r.toml", "--allow-leakage"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("integrity"), "{}", stderr(&out));
}

fn small_matrix(ws: &Workspace) {
    let gen = GenConfig {
        n_users: 80,
        ..small_gen()
    };
    let cfg = MatrixConfig {
        seeds: vec![1, 2],
        model: small_model(&gen),
        gen,
        stage1: small_train(1),
        stage2: small_train(2),
    };
    std::fs::write(ws.path("matrix.toml"), to_toml(&cfg)).unwrap();
}

#[test]
fn matrix_writes_the_run_tree_and_is_deterministic() {
    let ws = Workspace::new();
    small_matrix(&ws);
    let out = ws.run(&["matrix", "--config", "matrix.toml", "--out", "m1", "--seeds", "1"]);
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(text.contains("full_above_base"), "{text}");
    let rows = ["Base", "Stage1_UpperBound", "Stage2_Only", "Full", "Variant1", "Variant2", "Variant3"];
    for row in rows {
        let dir = ws.path("m1").join(row).join("seed-1");
        assert!(dir.join("report.toml").exists(), "{row} report missing");
    }
    assert!(!ws.path("m1/Base/seed-2").exists());
    assert!(ws.path("m1/Full/seed-1/stage2.ckpt").exists());
    assert!(ws.path("m1/Full/seed-1/stage2_loss.csv").exists());
    let aggregate = std::fs::read_to_string(ws.path("m1/aggregate.toml")).unwrap();
    assert!(aggregate.contains("[[verdicts]]"));
    assert!(ws.path("m1/alignment_points.csv").exists());

    let upper = std::fs::read_to_string(ws.path("m1/Stage1_UpperBound/seed-1/report.toml")).unwrap();
    assert!(upper.contains("leaked-evaluation = true"));
    let full = std::fs::read_to_string(ws.path("m1/Full/seed-1/report.toml")).unwrap();
    assert!(full.contains("leaked-evaluation = false"));

    ws.run(&["matrix", "--config", "matrix.toml", "--out", "m2", "--seeds", "1"]);
    assert_eq!(read(&ws.path("m1/aggregate.toml")), read(&ws.path("m2/aggregate.toml")));
    assert_eq!(
        read(&ws.path("m1/alignment_points.csv")),
        read(&ws.path("m2/alignment_points.csv"))
    );

    ws.ok(&["analyze-alignment", "--run", "m1", "--out", "points.csv"]);
    assert_eq!(read(&ws.path("points.csv")), read(&ws.path("m1/alignment_points.csv")));
}

#[test]
fn matrix_config_must_match_the_generator() {
    let ws = Workspace::new();
    small_matrix(&ws);
    let mut cfg: MatrixConfig = ocarm::config::read_toml(&ws.path("matrix.toml")).unwrap();
    cfg.model.vocab_size += 1;
    std::fs::write(ws.path("matrix.toml"), to_toml(&cfg)).unwrap();
    let out = ws.run(&["matrix", "--config", "matrix.toml", "--out", "m"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("vocab_size"), "{}", stderr(&out));
}
