//! Ranking metrics, rank correlation and alignment similarity.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datagen::UserJourneyRecord;
use crate::error::{Error, Result};
use crate::graph::cosine;
use crate::model::{score_batch, teacher_score_batch, Model, PreparedRecord, COSINE_EPS};
use crate::trainer::{prepare, StageTag};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
    pub group: u64,
}

/// Average 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        // positions i+1 ..= j
        let r = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// ROC-AUC by rank sum; ties count one half.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::Input(format!("non-finite score {}", s.score)));
    }
    let n_pos = samples.iter().filter(|s| s.label).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let ranks = average_ranks(&scores);
    let rank_sum: f64 = samples
        .iter()
        .zip(&ranks)
        .filter(|(s, _)| s.label)
        .map(|(_, r)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Sample-count-weighted mean of per-group AUC over groups with both classes.
pub fn gauc(samples: &[ScoredSample]) -> Result<f64> {
    let mut groups: BTreeMap<u64, Vec<ScoredSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.group).or_default().push(*s);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for g in groups.values() {
        let pos = g.iter().filter(|s| s.label).count();
        if pos == 0 || pos == g.len() {
            continue;
        }
        let w = g.len() as f64;
        num += w * auc(g)?;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("no group contains both classes".into()));
    }
    Ok(num / den)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract("spearman inputs differ in length".into()));
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "rank correlation needs at least 3 points, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite value in rank correlation".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("rank correlation of a constant series".into()));
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

/// Mean per-task cosine between user and content representations.
pub fn mean_alignment_similarity(model: &Model, records: &[PreparedRecord]) -> Result<BTreeMap<String, f64>> {
    if records.is_empty() {
        return Err(Error::Input("no records to measure alignment on".into()));
    }
    let pairs = crate::model::representation_pairs(model, records)?;
    let tasks = &model.config().tasks;
    let mut sums = alloc::vec![0.0; tasks.len()];
    for rec in &pairs {
        for (s, (u, c)) in sums.iter_mut().zip(rec) {
            *s += cosine(u.data(), c.data(), COSINE_EPS);
        }
    }
    Ok(tasks
        .iter()
        .zip(sums)
        .map(|(t, s)| (t.name.clone(), s / pairs.len() as f64))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub auc: f64,
    pub gauc: f64,
    /// Absent for models without both encoders.
    pub alignment_similarity: Option<f64>,
    pub n_samples: usize,
    pub n_positive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: StageTag,
    /// True only when scores were computed from onboarding content.
    #[serde(rename = "leaked-evaluation")]
    pub leaked_evaluation: bool,
    pub model_config_hash: String,
    pub seed: u64,
    pub tasks: BTreeMap<String, TaskMetrics>,
}

impl EvalReport {
    pub fn auc(&self, task: &str) -> Option<f64> {
        self.tasks.get(task).map(|t| t.auc)
    }
}

/// Scores `records` and computes per-task metrics.
///
/// With `leaked`, scores come from the content path and read onboarding
/// content; otherwise only bid-time inputs reach the scoring path.
pub fn evaluate(model: &Model, stage: StageTag, records: &[UserJourneyRecord], leaked: bool, seed: u64) -> Result<EvalReport> {
    let c = model.config();
    let scores = if leaked {
        teacher_score_batch(model, &prepare(records, c, true)?)?
    } else {
        score_batch(model, &prepare(records, c, false)?)?
    };
    let alignment = if model.has_teacher() && model.has_student() {
        Some(mean_alignment_similarity(model, &prepare(records, c, true)?)?)
    } else {
        None
    };
    let mut tasks = BTreeMap::new();
    for (t, task) in c.tasks.iter().enumerate() {
        let samples: Vec<ScoredSample> = records
            .iter()
            .zip(&scores)
            .map(|(r, s)| ScoredSample {
                score: s[t],
                label: r.is_positive(&task.name),
                group: r.user_id,
            })
            .collect();
        tasks.insert(
            task.name.clone(),
            TaskMetrics {
                auc: auc(&samples)?,
                gauc: gauc(&samples)?,
                alignment_similarity: alignment.as_ref().map(|a| a[&task.name]),
                n_samples: samples.len(),
                n_positive: samples.iter().filter(|s| s.label).count(),
            },
        );
    }
    Ok(EvalReport {
        stage,
        leaked_evaluation: leaked,
        model_config_hash: c.hash(),
        seed,
        tasks,
    })
}
