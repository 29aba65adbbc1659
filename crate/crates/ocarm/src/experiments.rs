//! Stage ablation matrix, encoder variants and the similarity/gain analysis.
//!
//! Every seed trains its own models on the same dataset; variant deltas are
//! paired with the Base run of the same seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ocarm_core::datagen::{Dataset, UserJourneyRecord};
use ocarm_core::metrics::{evaluate, spearman, EvalReport};
use ocarm_core::model::{infer_record, ContentEncoderKind, Model, ModelConfig, UserEncoderKind};
use ocarm_core::trainer::{train_stage1, train_stage2, Checkpoint, LossRecord, StageTag, TrainConfig, TrainOutcome};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::to_toml;
use crate::error::{Error, Result};
use crate::fsutil::{create_dir_all, write_atomic, write_string_atomic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RowName {
    Base,
    #[serde(rename = "Stage1_UpperBound")]
    Stage1UpperBound,
    #[serde(rename = "Stage2_Only")]
    Stage2Only,
    Full,
    Variant1,
    Variant2,
    Variant3,
}

impl RowName {
    pub const MATRIX: [RowName; 4] = [RowName::Base, RowName::Stage1UpperBound, RowName::Stage2Only, RowName::Full];
    pub const VARIANTS: [RowName; 3] = [RowName::Variant1, RowName::Variant2, RowName::Variant3];

    pub fn name(self) -> &'static str {
        match self {
            RowName::Base => "Base",
            RowName::Stage1UpperBound => "Stage1_UpperBound",
            RowName::Stage2Only => "Stage2_Only",
            RowName::Full => "Full",
            RowName::Variant1 => "Variant1",
            RowName::Variant2 => "Variant2",
            RowName::Variant3 => "Variant3",
        }
    }

    /// Model config of this row, derived from the Full config.
    pub fn model_config(self, full: &ModelConfig) -> ModelConfig {
        let mut c = full.clone();
        match self {
            RowName::Base => c.backbone_only = true,
            RowName::Stage2Only => {
                c.teacher_pretrained = false;
                c.stop_gradient = false;
            }
            RowName::Variant1 => {
                c.content_encoder = ContentEncoderKind::Mlp;
                c.user_encoder = UserEncoderKind::Mlp;
            }
            RowName::Variant2 => {
                c.content_encoder = ContentEncoderKind::Hae;
                c.user_encoder = UserEncoderKind::Mlp;
            }
            RowName::Stage1UpperBound | RowName::Full | RowName::Variant3 => {}
        }
        c
    }

    /// Human-readable differences from the Full configuration.
    pub fn config_deltas(self) -> BTreeMap<String, String> {
        let pairs: &[(&str, &str)] = match self {
            RowName::Base => &[("backbone_only", "true"), ("aux", "zero")],
            RowName::Stage1UpperBound => &[("stage", "1"), ("evaluation", "leaked onboarding content")],
            RowName::Stage2Only => &[("teacher_pretrained", "false"), ("stop_gradient", "false")],
            RowName::Full => &[],
            RowName::Variant1 => &[("content_encoder", "MLP"), ("user_encoder", "MLP")],
            RowName::Variant2 => &[("content_encoder", "HAE"), ("user_encoder", "MLP")],
            RowName::Variant3 => &[("content_encoder", "HAE"), ("user_encoder", "SFE")],
        };
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn stage(self) -> StageTag {
        match self {
            RowName::Base => StageTag::Base,
            RowName::Stage1UpperBound => StageTag::Stage1,
            _ => StageTag::Stage2,
        }
    }
}

/// Mean and sample standard deviation over seeds for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub auc_mean: f64,
    pub auc_std: f64,
    pub gauc_mean: f64,
    pub gauc_std: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment_similarity_mean: Option<f64>,
    /// Mean AUC difference to the same-seed Base run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_auc_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub name: RowName,
    pub model_config_hash: String,
    pub config_deltas: BTreeMap<String, String>,
    /// One report per seed, in seed order.
    pub runs: Vec<EvalReport>,
    /// Per task; empty when the row failed.
    pub aggregate: BTreeMap<String, Aggregate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl MatrixRow {
    fn new(name: RowName, full: &ModelConfig) -> Self {
        MatrixRow {
            name,
            model_config_hash: name.model_config(full).hash(),
            config_deltas: name.config_deltas(),
            runs: Vec::new(),
            aggregate: BTreeMap::new(),
            error: None,
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.runs.iter().map(|r| r.seed).collect()
    }

    pub fn report(&self, seed: u64) -> Option<&EvalReport> {
        self.runs.iter().find(|r| r.seed == seed)
    }

    /// ΔAUC against the same-seed `base` report, per seed.
    pub fn deltas(&self, base: &MatrixRow, task: &str) -> Vec<(u64, f64)> {
        self.runs
            .iter()
            .filter_map(|r| {
                let b = base.report(r.seed)?.auc(task)?;
                Some((r.seed, r.auc(task)? - b))
            })
            .collect()
    }

    /// Recomputes `aggregate` from the per-seed reports.
    pub fn compute_aggregate(&self, base: Option<&MatrixRow>) -> BTreeMap<String, Aggregate> {
        let mut out = BTreeMap::new();
        let Some(first) = self.runs.first() else {
            return out;
        };
        for task in first.tasks.keys() {
            let auc: Vec<f64> = self.runs.iter().map(|r| r.tasks[task].auc).collect();
            let gauc: Vec<f64> = self.runs.iter().map(|r| r.tasks[task].gauc).collect();
            let sims: Option<Vec<f64>> = self.runs.iter().map(|r| r.tasks[task].alignment_similarity).collect();
            let (auc_mean, auc_std) = mean_std(&auc);
            let (gauc_mean, gauc_std) = mean_std(&gauc);
            let delta_auc_mean = base.filter(|b| !b.failed() && b.name != self.name).and_then(|b| {
                let d: Vec<f64> = self.deltas(b, task).into_iter().map(|(_, d)| d).collect();
                (d.len() == self.runs.len()).then(|| mean_std(&d).0)
            });
            out.insert(
                task.clone(),
                Aggregate {
                    auc_mean,
                    auc_std,
                    gauc_mean,
                    gauc_std,
                    alignment_similarity_mean: sims.map(|s| mean_std(&s).0),
                    delta_auc_mean,
                },
            );
        }
        out
    }

    pub fn auc_mean(&self, task: &str) -> Option<f64> {
        self.aggregate.get(task).map(|a| a.auc_mean)
    }

    pub fn delta_mean(&self, task: &str) -> Option<f64> {
        self.aggregate.get(task).and_then(|a| a.delta_auc_mean)
    }
}

/// Inputs shared by every run of an experiment.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    /// The Full configuration; other rows are derived from it.
    pub model: ModelConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Run-directory root; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
}

/// Results of [`run_matrix`], plus the stage-1 teachers kept for reuse.
#[derive(Clone, Debug)]
pub struct MatrixOutcome {
    pub rows: Vec<MatrixRow>,
    pub teachers: BTreeMap<u64, Checkpoint>,
}

impl MatrixOutcome {
    pub fn row(&self, name: RowName) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

type RunResult = std::result::Result<EvalReport, String>;

struct SeedOutcome {
    reports: BTreeMap<RowName, RunResult>,
    teacher: Option<Checkpoint>,
}

impl<'a> Experiment<'a> {
    fn train_config(&self, stage: u8, seed: u64) -> TrainConfig {
        let base = if stage == 1 { &self.stage1 } else { &self.stage2 };
        TrainConfig { seed, ..base.clone() }
    }

    fn run_dir(&self, row: RowName, seed: u64) -> Option<PathBuf> {
        self.out_dir
            .as_ref()
            .map(|d| d.join(row.name()).join(format!("seed-{seed}")))
    }

    fn persist(&self, row: RowName, seed: u64, trained: &[(&str, &TrainOutcome)], report: &EvalReport) -> Result<()> {
        let Some(dir) = self.run_dir(row, seed) else {
            return Ok(());
        };
        create_dir_all(&dir)?;
        #[derive(Serialize)]
        struct Snapshot<'c> {
            row: RowName,
            seed: u64,
            model: ModelConfig,
            stage1: &'c TrainConfig,
            stage2: &'c TrainConfig,
        }
        let snapshot = Snapshot {
            row,
            seed,
            model: row.model_config(&self.model),
            stage1: &self.stage1,
            stage2: &self.stage2,
        };
        write_string_atomic(&dir.join("config.toml"), &to_toml(&snapshot))?;
        for (name, outcome) in trained {
            save_checkpoint(&outcome.checkpoint, &dir.join(format!("{name}.ckpt")))?;
            write_loss_log(&outcome.log, &dir.join(format!("{name}_loss.csv")))?;
        }
        write_string_atomic(&dir.join("report.toml"), &to_toml(report))
    }

    fn eval(&self, row: RowName, ckpt: &Checkpoint, seed: u64) -> Result<EvalReport> {
        let model = ckpt.model()?;
        let leaked = row == RowName::Stage1UpperBound;
        if !leaked {
            spot_check_no_leakage(&model, &self.test.records)?;
        }
        Ok(evaluate(&model, row.stage(), &self.test.records, leaked, seed)?)
    }

    /// Stage-1 training with the given row's content encoder.
    fn teacher(&self, row: RowName, seed: u64) -> Result<TrainOutcome> {
        Ok(train_stage1(
            &self.train.records,
            &row.model_config(&self.model),
            &self.train_config(1, seed),
        )?)
    }

    fn student(&self, row: RowName, seed: u64, teacher: Option<&Checkpoint>) -> Result<TrainOutcome> {
        Ok(train_stage2(
            &self.train.records,
            teacher,
            &row.model_config(&self.model),
            &self.train_config(2, seed),
        )?)
    }

    fn run_one(&self, row: RowName, seed: u64, teacher: &mut Option<std::result::Result<TrainOutcome, String>>) -> Result<EvalReport> {
        let need_teacher = |t: &mut Option<std::result::Result<TrainOutcome, String>>| -> Result<Checkpoint> {
            if t.is_none() {
                *t = Some(self.teacher(RowName::Full, seed).map_err(|e| e.to_string()));
            }
            match t.as_ref().expect("teacher slot filled") {
                Ok(o) => Ok(o.checkpoint.clone()),
                Err(e) => Err(Error::Usage(format!("stage-1 teacher failed: {e}"))),
            }
        };
        match row {
            RowName::Base => {
                let o = self.teacher(RowName::Base, seed)?;
                let r = self.eval(row, &o.checkpoint, seed)?;
                self.persist(row, seed, &[("base", &o)], &r)?;
                Ok(r)
            }
            RowName::Stage1UpperBound => {
                let ckpt = need_teacher(teacher)?;
                let r = self.eval(row, &ckpt, seed)?;
                let o = teacher.as_ref().and_then(|t| t.as_ref().ok()).expect("teacher trained");
                self.persist(row, seed, &[("stage1", o)], &r)?;
                Ok(r)
            }
            RowName::Stage2Only => {
                let o = self.student(row, seed, None)?;
                let r = self.eval(row, &o.checkpoint, seed)?;
                self.persist(row, seed, &[("stage2", &o)], &r)?;
                Ok(r)
            }
            RowName::Full | RowName::Variant2 | RowName::Variant3 => {
                let ckpt = need_teacher(teacher)?;
                let o = self.student(row, seed, Some(&ckpt))?;
                let r = self.eval(row, &o.checkpoint, seed)?;
                self.persist(row, seed, &[("stage2", &o)], &r)?;
                Ok(r)
            }
            RowName::Variant1 => {
                let t = self.teacher(row, seed)?;
                let o = self.student(row, seed, Some(&t.checkpoint))?;
                let r = self.eval(row, &o.checkpoint, seed)?;
                self.persist(row, seed, &[("stage1", &t), ("stage2", &o)], &r)?;
                Ok(r)
            }
        }
    }

    fn run_seed(&self, rows: &[RowName], seed: u64, teacher: Option<&Checkpoint>) -> SeedOutcome {
        let mut slot = teacher.map(|c| {
            Ok(TrainOutcome {
                checkpoint: c.clone(),
                log: Vec::new(),
                epoch_losses: Vec::new(),
            })
        });
        let mut reports = BTreeMap::new();
        for row in rows {
            let r = self.run_one(*row, seed, &mut slot).map_err(|e| e.to_string());
            reports.insert(*row, r);
        }
        SeedOutcome {
            reports,
            teacher: slot.and_then(|t| t.ok()).map(|t| t.checkpoint),
        }
    }

    fn assemble(&self, names: &[RowName], seeds: &[u64], outcomes: &[SeedOutcome]) -> Vec<MatrixRow> {
        names
            .iter()
            .map(|name| {
                let mut row = MatrixRow::new(*name, &self.model);
                for (seed, o) in seeds.iter().zip(outcomes) {
                    match &o.reports[name] {
                        Ok(r) => row.runs.push(r.clone()),
                        Err(e) if row.error.is_none() => row.error = Some(format!("seed {seed}: {e}")),
                        Err(_) => {}
                    }
                }
                if row.failed() {
                    row.runs.clear();
                }
                row
            })
            .collect()
    }
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(ocarm_core::Error::Config("`seeds` must not be empty".into()).into());
    }
    Ok(())
}

fn fill_aggregates(rows: &mut [MatrixRow], base: Option<&MatrixRow>) {
    for row in rows.iter_mut() {
        row.aggregate = row.compute_aggregate(base);
    }
}

/// Trains and evaluates Base, Stage1_UpperBound, Stage2_Only and Full for
/// every seed. A failing sub-run marks its row failed; other rows continue.
pub fn run_matrix(exp: &Experiment, seeds: &[u64]) -> Result<MatrixOutcome> {
    run_rows(exp, &RowName::MATRIX, seeds)
}

/// [`run_matrix`] restricted to `names`; deltas are filled in when Base is among them.
pub fn run_rows(exp: &Experiment, names: &[RowName], seeds: &[u64]) -> Result<MatrixOutcome> {
    check_seeds(seeds)?;
    let outcomes: Vec<SeedOutcome> = seeds
        .par_iter()
        .map(|s| exp.run_seed(names, *s, None))
        .collect();
    let mut rows = exp.assemble(names, seeds, &outcomes);
    let base = rows.iter().find(|r| r.name == RowName::Base).cloned();
    fill_aggregates(&mut rows, base.as_ref());
    let teachers = seeds
        .iter()
        .zip(outcomes)
        .filter_map(|(s, o)| o.teacher.map(|t| (*s, t)))
        .collect();
    Ok(MatrixOutcome { rows, teachers })
}

/// Encoder variants over the two-stage pipeline, paired with the matrix's
/// Base runs. Variant2 reuses the matrix's stage-1 teacher and Variant3 is
/// the Full row itself.
pub fn run_variants(exp: &Experiment, seeds: &[u64], matrix: &MatrixOutcome) -> Result<Vec<MatrixRow>> {
    check_seeds(seeds)?;
    let base = matrix
        .row(RowName::Base)
        .ok_or_else(|| Error::Usage("variant deltas need the Base row".into()))?;
    let full = matrix
        .row(RowName::Full)
        .ok_or_else(|| Error::Usage("Variant3 needs the Full row".into()))?;
    let trained = [RowName::Variant1, RowName::Variant2];
    let outcomes: Vec<SeedOutcome> = seeds
        .par_iter()
        .map(|s| exp.run_seed(&trained, *s, matrix.teachers.get(s)))
        .collect();
    let mut rows = exp.assemble(&trained, seeds, &outcomes);
    let mut v3 = MatrixRow::new(RowName::Variant3, &exp.model);
    v3.runs = seeds.iter().filter_map(|s| full.report(*s).cloned()).collect();
    v3.error = full.error.clone();
    if v3.runs.len() != seeds.len() && v3.error.is_none() {
        v3.error = Some("Full row lacks some seeds".into());
    }
    for s in seeds {
        if let (Some(dir), Some(r)) = (exp.run_dir(RowName::Variant3, *s), full.report(*s)) {
            create_dir_all(&dir)?;
            write_string_atomic(&dir.join("report.toml"), &to_toml(r))?;
            write_string_atomic(&dir.join("same_as.txt"), "Full\n")?;
        }
    }
    rows.push(v3);
    fill_aggregates(&mut rows, Some(base));
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub row: RowName,
    pub seed: u64,
    pub task: String,
    pub similarity: f64,
    pub delta_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentAnalysis {
    pub points: Vec<AlignmentPoint>,
    /// Spearman correlation of similarity vs. ΔAUC per task.
    pub spearman: BTreeMap<String, f64>,
}

/// One point per (row, seed, task) for rows carrying both a similarity and a
/// same-seed Base report, and the per-task rank correlation.
pub fn alignment_gain_analysis(rows: &[MatrixRow], base: &MatrixRow) -> Result<AlignmentAnalysis> {
    let mut points = Vec::new();
    for row in rows.iter().filter(|r| !r.failed() && r.name != RowName::Base) {
        for report in &row.runs {
            let Some(b) = base.report(report.seed) else { continue };
            for (task, m) in &report.tasks {
                let (Some(sim), Some(base_auc)) = (m.alignment_similarity, b.auc(task)) else {
                    continue;
                };
                points.push(AlignmentPoint {
                    row: row.name,
                    seed: report.seed,
                    task: task.clone(),
                    similarity: sim,
                    delta_auc: m.auc - base_auc,
                });
            }
        }
    }
    let mut spearman_by_task = BTreeMap::new();
    let tasks: std::collections::BTreeSet<&String> = points.iter().map(|p| &p.task).collect();
    if tasks.is_empty() {
        return Err(ocarm_core::Error::InsufficientData("no (similarity, gain) points".into()).into());
    }
    for task in tasks {
        let (xs, ys): (Vec<f64>, Vec<f64>) = points
            .iter()
            .filter(|p| &p.task == task)
            .map(|p| (p.similarity, p.delta_auc))
            .unzip();
        spearman_by_task.insert(task.clone(), spearman(&xs, &ys)?);
    }
    Ok(AlignmentAnalysis {
        points,
        spearman: spearman_by_task,
    })
}

pub fn write_points_csv(points: &[AlignmentPoint], path: &Path) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for p in points {
            out.serialize(p).map_err(std::io::Error::other)?;
        }
        out.flush()
    })
}

pub fn write_loss_log(log: &[LossRecord], path: &Path) -> Result<()> {
    write_atomic(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for r in log {
            out.serialize(r).map_err(std::io::Error::other)?;
        }
        out.flush()
    })
}

/// Number of test records the leakage spot check perturbs.
const SPOT_CHECK: usize = 8;

/// Scores must not move when onboarding content is replaced or removed.
pub fn spot_check_no_leakage(model: &Model, records: &[UserJourneyRecord]) -> Result<()> {
    for r in records.iter().take(SPOT_CHECK) {
        let mut emptied = r.clone();
        emptied.onboarding.iter_mut().for_each(Vec::clear);
        let mut shuffled = r.clone();
        shuffled.onboarding.reverse();
        for task in &model.config().tasks {
            let a = infer_record(model, r, &task.name)?;
            for other in [&emptied, &shuffled] {
                let b = infer_record(model, other, &task.name)?;
                if a.to_bits() != b.to_bits() {
                    return Err(ocarm_core::Error::Contract(format!(
                        "score for user {} moved when onboarding content changed",
                        r.user_id
                    ))
                    .into());
                }
            }
        }
    }
    Ok(())
}
