//! Training objectives over a batch of prepared records.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::Var;

use super::features::PreparedRecord;
use super::forward::Forward;
use super::{Similarity, COSINE_EPS};

/// What a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Backbone alone with a zero auxiliary input.
    Base,
    /// Backbone on content representations (onboarding visible).
    Stage1,
    /// Backbone on user representations plus the alignment term.
    Stage2,
}

pub struct BatchLoss {
    pub total: Var,
    /// Mean soft BCE over records and tasks.
    pub bce: f64,
    /// Mean over records of the summed per-task alignment loss (0 when unused).
    pub align: f64,
}

/// Per-task alignment terms, `1 - cos` or squared distance.
pub(crate) fn align_terms(f: &mut Forward<'_, '_>, e_u: &[Var], e_c: &[Var], sim: Similarity) -> Vec<Var> {
    e_u.iter()
        .zip(e_c)
        .map(|(&u, &c)| match sim {
            Similarity::Cosine => f.g.cosine_loss(u, c, COSINE_EPS),
            Similarity::L2 => f.g.sq_dist(u, c),
        })
        .collect()
}

fn check_finite(f: &Forward<'_, '_>, logits: &[Var], user: u64) -> Result<()> {
    for &l in logits {
        if !f.g.scalar(l).is_finite() {
            return Err(Error::Numeric(format!("non-finite logit for user {user}")));
        }
    }
    Ok(())
}

/// Builds the batch objective on the tape of `f`.
pub fn batch_loss(f: &mut Forward<'_, '_>, batch: &[&PreparedRecord], objective: Objective) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let cfg = f.model().config();
    let n_tasks = cfg.tasks.len();
    let lambda = cfg.lambda;
    let use_align = objective == Objective::Stage2 && lambda > 0.0;
    let mut bce_terms = Vec::with_capacity(batch.len() * n_tasks);
    let mut align_sum = Vec::new();
    for r in batch {
        if r.targets.len() != n_tasks {
            return Err(Error::Input(format!("record of user {} lacks labels", r.user_id)));
        }
        let x_u = f.profile(&r.obs);
        let aux = match objective {
            Objective::Base => f.zero_aux(),
            Objective::Stage1 => {
                let content = r.require_content()?;
                f.content_repr(x_u, content)
            }
            Objective::Stage2 => {
                let e_u = f.user_repr(x_u, &r.obs);
                if use_align {
                    let content = r.require_content()?;
                    let mut e_c = f.content_repr(x_u, content);
                    if cfg.stop_gradient {
                        e_c = e_c.into_iter().map(|v| f.g.detach(v)).collect();
                    }
                    let terms = align_terms(f, &e_u, &e_c, cfg.similarity);
                    align_sum.push(f.g.sum(&terms));
                }
                e_u
            }
        };
        let logits = f.backbone_logits(x_u, &r.obs, &aux);
        check_finite(f, &logits, r.user_id)?;
        for (l, &y) in logits.into_iter().zip(&r.targets) {
            bce_terms.push(f.g.soft_bce(l, y));
        }
    }
    let bce_sum = f.g.sum(&bce_terms);
    let bce = f.g.scale(bce_sum, 1.0 / bce_terms.len() as f64);
    let bce_value = f.g.scalar(bce);
    if align_sum.is_empty() {
        return Ok(BatchLoss {
            total: bce,
            bce: bce_value,
            align: 0.0,
        });
    }
    let a = f.g.sum(&align_sum);
    let align = f.g.scale(a, 1.0 / batch.len() as f64);
    let align_value = f.g.scalar(align);
    let weighted = f.g.scale(align, lambda);
    let total = f.g.add(bce, weighted);
    Ok(BatchLoss {
        total,
        bce: bce_value,
        align: align_value,
    })
}
