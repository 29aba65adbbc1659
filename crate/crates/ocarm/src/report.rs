//! Matrix orchestration from a composite config, ordering verdicts and the
//! aggregate report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ocarm_core::datagen::Dataset;
use serde::{Deserialize, Serialize};

use crate::config::{to_toml, MatrixConfig};
use crate::error::Result;
use crate::experiments::{
    alignment_gain_analysis, run_matrix, run_variants, write_points_csv, Aggregate, AlignmentAnalysis, Experiment,
    MatrixRow, RowName,
};
use crate::fsutil::{create_dir_all, write_string_atomic};

/// Required AUC margin of the upper bound over Full.
pub const UPPER_MARGIN: f64 = 0.003;
/// Required AUC margin of Full over Base.
pub const FULL_MARGIN: f64 = 0.005;

pub const AGGREGATE_FILE: &str = "aggregate.toml";
pub const POINTS_FILE: &str = "alignment_points.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub rule: String,
    pub task: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub name: RowName,
    pub model_config_hash: String,
    pub config_deltas: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub tasks: BTreeMap<String, Aggregate>,
}

impl From<&MatrixRow> for RowSummary {
    fn from(r: &MatrixRow) -> Self {
        RowSummary {
            name: r.name,
            model_config_hash: r.model_config_hash.clone(),
            config_deltas: r.config_deltas.clone(),
            seeds: r.seeds(),
            error: r.error.clone(),
            tasks: r.aggregate.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub gen_config_hash: String,
    pub model_config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<RowSummary>,
    pub spearman: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub analysis_error: Option<String>,
    pub verdicts: Vec<Verdict>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub rows: Vec<MatrixRow>,
    pub analysis: std::result::Result<AlignmentAnalysis, String>,
    pub report: AggregateReport,
}

impl ExperimentResult {
    pub fn row(&self, name: RowName) -> Option<&MatrixRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn any_row_failed(&self) -> bool {
        self.rows.iter().any(MatrixRow::failed)
    }
}

fn row<'r>(rows: &'r [MatrixRow], name: RowName) -> Option<&'r MatrixRow> {
    rows.iter().find(|r| r.name == name && !r.failed())
}

/// Pass/fail of every ordering rule, per task.
pub fn verdicts(rows: &[MatrixRow], analysis: Option<&AlignmentAnalysis>, tasks: &[String]) -> Vec<Verdict> {
    let mut out = Vec::new();
    let mut push = |rule: &str, task: &str, pass: bool, detail: String| {
        out.push(Verdict {
            rule: rule.into(),
            task: task.into(),
            pass,
            detail,
        })
    };
    let auc = |name: RowName, task: &str| row(rows, name).and_then(|r| r.auc_mean(task));
    let delta = |name: RowName, task: &str| row(rows, name).and_then(|r| r.delta_mean(task));
    for task in tasks {
        match (auc(RowName::Stage1UpperBound, task), auc(RowName::Full, task)) {
            (Some(u), Some(f)) => push(
                "upper_bound_above_full",
                task,
                u - f >= UPPER_MARGIN,
                format!("upper {u:.4} - full {f:.4} = {:+.4} (need >= {UPPER_MARGIN})", u - f),
            ),
            _ => push("upper_bound_above_full", task, false, "row missing or failed".into()),
        }
        match (auc(RowName::Full, task), auc(RowName::Base, task)) {
            (Some(f), Some(b)) => push(
                "full_above_base",
                task,
                f - b >= FULL_MARGIN,
                format!("full {f:.4} - base {b:.4} = {:+.4} (need >= {FULL_MARGIN})", f - b),
            ),
            _ => push("full_above_base", task, false, "row missing or failed".into()),
        }
        match (auc(RowName::Stage2Only, task), auc(RowName::Full, task)) {
            (Some(s), Some(f)) => push(
                "stage2_only_below_full",
                task,
                s < f,
                format!("stage2_only {s:.4} vs full {f:.4}"),
            ),
            _ => push("stage2_only_below_full", task, false, "row missing or failed".into()),
        }
        match (
            delta(RowName::Variant1, task),
            delta(RowName::Variant2, task),
            delta(RowName::Variant3, task),
        ) {
            (Some(d1), Some(d2), Some(d3)) => push(
                "variant_ladder",
                task,
                0.0 < d1 && d1 < d2 && d2 < d3,
                format!("dV1 {d1:+.4} < dV2 {d2:+.4} < dV3 {d3:+.4}, dV1 > 0"),
            ),
            _ => push("variant_ladder", task, false, "row missing or failed".into()),
        }
        match analysis.and_then(|a| a.spearman.get(task)) {
            Some(rho) => push(
                "similarity_gain_spearman",
                task,
                *rho > 0.0,
                format!("spearman {rho:+.4} over {} points", analysis.map_or(0, |a| a.points.iter().filter(|p| &p.task == task).count())),
            ),
            None => push("similarity_gain_spearman", task, false, "analysis unavailable".into()),
        }
    }
    out
}

/// Runs the stage matrix and the encoder variants on `train`/`test`, writes
/// the run tree under `out_dir` when given, and assembles the report.
pub fn run_experiment(cfg: &MatrixConfig, train: &Dataset, test: &Dataset, out_dir: Option<&Path>) -> Result<ExperimentResult> {
    cfg.validate()?;
    let exp = Experiment {
        train,
        test,
        model: cfg.model.clone(),
        stage1: cfg.stage1.clone(),
        stage2: cfg.stage2.clone(),
        out_dir: out_dir.map(Path::to_path_buf),
    };
    let matrix = run_matrix(&exp, &cfg.seeds)?;
    let variants = run_variants(&exp, &cfg.seeds, &matrix)?;
    let base = matrix.row(RowName::Base).expect("matrix has a Base row").clone();
    let mut rows = matrix.rows;
    rows.extend(variants);
    let variant_rows: Vec<MatrixRow> = rows
        .iter()
        .filter(|r| RowName::VARIANTS.contains(&r.name))
        .cloned()
        .collect();
    let analysis = if base.failed() {
        Err("Base row failed".to_string())
    } else {
        alignment_gain_analysis(&variant_rows, &base).map_err(|e| e.to_string())
    };
    let tasks: Vec<String> = cfg.model.tasks.iter().map(|t| t.name.clone()).collect();
    let report = AggregateReport {
        gen_config_hash: cfg.gen.hash(),
        model_config_hash: cfg.model.hash(),
        seeds: cfg.seeds.clone(),
        rows: rows.iter().map(RowSummary::from).collect(),
        spearman: analysis.as_ref().map(|a| a.spearman.clone()).unwrap_or_default(),
        analysis_error: analysis.as_ref().err().cloned(),
        verdicts: verdicts(&rows, analysis.as_ref().ok(), &tasks),
    };
    if let Some(dir) = out_dir {
        create_dir_all(dir)?;
        write_string_atomic(&dir.join(AGGREGATE_FILE), &to_toml(&report))?;
        let points = analysis.as_ref().map(|a| a.points.as_slice()).unwrap_or(&[]);
        write_points_csv(points, &dir.join(POINTS_FILE))?;
    }
    Ok(ExperimentResult { rows, analysis, report })
}

/// Files a matrix run writes at its root.
pub fn top_level_artifacts(dir: &Path) -> Vec<PathBuf> {
    vec![dir.join(AGGREGATE_FILE), dir.join(POINTS_FILE)]
}
