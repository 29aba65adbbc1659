//! The `ocarm` command line.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ocarm_core::metrics::evaluate;
use ocarm_core::trainer::{train_stage1, train_stage2, StageTag};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{
    load_gen_config, load_matrix_config, load_model_config, load_train_config, run_root, to_toml,
};
use crate::dataset::{read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::experiments::{alignment_gain_analysis, write_points_csv, MatrixRow, RowName};
use crate::fsutil::{create_dir_all, write_string_atomic};
use crate::generate::generate_dataset_parallel;
use crate::manifest::RunManifest;
use crate::report::{run_experiment, top_level_artifacts, POINTS_FILE};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";

#[derive(Debug, Parser)]
#[command(name = "ocarm", version, about = "Two-stage onboarding-content distillation for retention prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train/test datasets.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the generator seed from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train stage 1 (teacher or base) or stage 2 (student).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Directory holding train.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stage-1 checkpoint; required when the model config sets teacher_pretrained.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Score a stage-1 teacher with onboarding content visible.
        #[arg(long)]
        allow_leakage: bool,
    },
    /// Run the stage matrix and encoder variants over several seeds.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated training seeds; replaces the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Recompute the similarity/gain points of a finished matrix run.
    AnalyzeAlignment {
        /// Matrix output directory.
        #[arg(long)]
        run: PathBuf,
        /// Point file to write; defaults to the run's own.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Matrix { .. } => "matrix",
            Command::AnalyzeAlignment { .. } => "analyze-alignment",
        }
    }
}

/// Exit status for usage errors and safety-rail refusals.
pub const EXIT_USAGE: i32 = 2;

/// Runs one command, printing errors to stderr; returns the exit status.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Refused(_) => EXIT_USAGE,
                _ => 1,
            }
        }
    }
}

fn out_dir(out: Option<PathBuf>, command: &str) -> PathBuf {
    out.unwrap_or_else(|| run_root().join(command))
}

fn dispatch(command: Command) -> Result<()> {
    let name = command.name();
    match command {
        Command::GenData { config, out, seed } => gen_data(&config, &out_dir(out, name), seed),
        Command::Train {
            stage,
            data,
            model,
            train,
            out,
            teacher,
        } => cmd_train(stage, &data, &model, &train, &out_dir(out, name), teacher.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            report,
            allow_leakage,
        } => cmd_eval(&checkpoint, &data, &report, allow_leakage),
        Command::Matrix { config, out, seeds } => cmd_matrix(&config, &out_dir(out, name), seeds),
        Command::AnalyzeAlignment { run, out } => cmd_analyze(&run, out),
    }
}

/// Runs `body` and records its outcome in `dir/manifest.toml`.
fn with_manifest(dir: &Path, mut manifest: RunManifest, body: impl FnOnce(&mut RunManifest) -> Result<()>) -> Result<()> {
    create_dir_all(dir)?;
    let result = body(&mut manifest);
    let outcome = result.as_ref().map(|_| ()).map_err(|e| e.to_string());
    manifest.finish(dir, outcome)?;
    result
}

fn gen_data(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut gen = load_gen_config(config)?;
    if let Some(s) = seed {
        gen.seed = s;
    }
    let mut manifest = RunManifest::start("gen-data");
    manifest.add_config("gen", config)?;
    manifest.seed = Some(gen.seed);
    with_manifest(out, manifest, |m| {
        let (train, test) = generate_dataset_parallel(&gen)?;
        let snapshot = out.join("gen.toml");
        write_string_atomic(&snapshot, &to_toml(&gen))?;
        for (ds, file) in [(&train, TRAIN_FILE), (&test, TEST_FILE)] {
            let path = out.join(file);
            write_dataset(ds, &path)?;
            m.artifacts.push(path);
        }
        m.artifacts.push(snapshot);
        eprintln!("wrote {} train and {} test records to {}", train.len(), test.len(), out.display());
        Ok(())
    })
}

fn cmd_train(stage: u8, data: &Path, model: &Path, train: &Path, out: &Path, teacher: Option<&Path>) -> Result<()> {
    let mc = load_model_config(model)?;
    let mut tc = load_train_config(train)?;
    tc.stage = stage;
    if stage == 2 && mc.teacher_pretrained && teacher.is_none() {
        return Err(Error::Usage(
            "stage 2 with teacher_pretrained = true needs --teacher <stage-1 checkpoint>".into(),
        ));
    }
    let data_file = if data.is_dir() { data.join(TRAIN_FILE) } else { data.to_path_buf() };
    let mut manifest = RunManifest::start("train");
    manifest.add_config("model", model)?;
    manifest.add_config("train", train)?;
    manifest.seed = Some(tc.seed);
    with_manifest(out, manifest, |m| {
        let ds = read_dataset(&data_file)?;
        let outcome = if stage == 1 {
            train_stage1(&ds.records, &mc, &tc)?
        } else {
            let t = teacher.map(load_checkpoint).transpose()?;
            train_stage2(&ds.records, t.as_ref(), &mc, &tc)?
        };
        let ckpt = out.join(CHECKPOINT_FILE);
        save_checkpoint(&outcome.checkpoint, &ckpt)?;
        let log = out.join(LOSS_LOG_FILE);
        crate::experiments::write_loss_log(&outcome.log, &log)?;
        m.artifacts.extend([ckpt, log]);
        eprintln!(
            "stage {} ({}) finished after {} steps",
            stage,
            outcome.checkpoint.stage.name(),
            outcome.checkpoint.step
        );
        Ok(())
    })
}

fn cmd_eval(checkpoint: &Path, data: &Path, report: &Path, allow_leakage: bool) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let leaked = ckpt.stage == StageTag::Stage1;
    if leaked && !allow_leakage {
        return Err(Error::Refused(format!(
            "{} is a stage-1 teacher; its scores read onboarding content that does not exist at bid time. \
             Pass --allow-leakage to evaluate it as a leakage upper bound.",
            checkpoint.display()
        )));
    }
    let dir = match report.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut manifest = RunManifest::start("eval");
    manifest.seed = Some(ckpt.rng_seed);
    with_manifest(&dir, manifest, |m| {
        let ds = read_dataset(data)?;
        let model = ckpt.model()?;
        if let Some(field) = ds
            .records
            .first()
            .and_then(|r| (r.profile_dense.len() != model.config().profile_dense_dim).then_some("profile_dense"))
        {
            return Err(ocarm_core::Error::Incompatible(format!("dataset `{field}` width does not match the model")).into());
        }
        let r = evaluate(&model, ckpt.stage, &ds.records, leaked, ckpt.rng_seed)?;
        write_string_atomic(report, &to_toml(&r))?;
        m.artifacts.push(report.to_path_buf());
        for (task, t) in &r.tasks {
            println!("{task}: auc {:.4} gauc {:.4}", t.auc, t.gauc);
        }
        Ok(())
    })
}

fn cmd_matrix(config: &Path, out: &Path, seeds: Option<Vec<u64>>) -> Result<()> {
    let mut cfg = load_matrix_config(config)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    cfg.validate()?;
    let mut manifest = RunManifest::start("matrix");
    manifest.add_config("matrix", config)?;
    with_manifest(out, manifest, |m| {
        let (train, test) = generate_dataset_parallel(&cfg.gen)?;
        write_string_atomic(&out.join("matrix.toml"), &to_toml(&cfg))?;
        let result = run_experiment(&cfg, &train, &test, Some(out))?;
        m.artifacts.extend(top_level_artifacts(out));
        for v in &result.report.verdicts {
            println!("{} {} [{}]: {}", if v.pass { "PASS" } else { "FAIL" }, v.rule, v.task, v.detail);
        }
        let failed: Vec<String> = result
            .rows
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.name.name())))
            .collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Usage(format!("rows failed: {}", failed.join("; "))))
        }
    })
}

fn read_row(run: &Path, name: RowName) -> Result<MatrixRow> {
    let dir = run.join(name.name());
    let mut seeds: Vec<(u64, PathBuf)> = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(&dir).map_err(crate::error::io_err(&dir))? {
            let entry = entry.map_err(crate::error::io_err(&dir))?;
            let file_name = entry.file_name();
            if let Some(seed) = file_name.to_str().and_then(|n| n.strip_prefix("seed-")).and_then(|s| s.parse().ok()) {
                seeds.push((seed, entry.path().join("report.toml")));
            }
        }
    }
    seeds.sort();
    let runs = seeds
        .iter()
        .filter(|(_, p)| p.exists())
        .map(|(_, p)| crate::config::read_toml(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(MatrixRow {
        name,
        model_config_hash: runs.first().map(|r: &ocarm_core::metrics::EvalReport| r.model_config_hash.clone()).unwrap_or_default(),
        config_deltas: name.config_deltas(),
        runs,
        aggregate: Default::default(),
        error: None,
    })
}

fn cmd_analyze(run: &Path, out: Option<PathBuf>) -> Result<()> {
    let base = read_row(run, RowName::Base)?;
    if base.runs.is_empty() {
        return Err(Error::Usage(format!("{} holds no Base reports", run.display())));
    }
    let rows = RowName::VARIANTS
        .iter()
        .map(|n| read_row(run, *n))
        .collect::<Result<Vec<_>>>()?;
    let analysis = alignment_gain_analysis(&rows, &base)?;
    let path = out.unwrap_or_else(|| run.join(POINTS_FILE));
    write_points_csv(&analysis.points, &path)?;
    for (task, rho) in &analysis.spearman {
        println!("{task}: spearman {rho:+.4}");
    }
    println!("{} points written to {}", analysis.points.len(), path.display());
    Ok(())
}
