//! Tensor-level entry points for single records: featurization, the
//! individual encoder stages, scoring and a debugging trace.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::datagen::{ObservableRecord, UserJourneyRecord};
use crate::error::{Error, Result};
use crate::graph::{cosine, Graph, Var};
use crate::math::sigmoid;
use crate::tensor::Tensor;

use super::features::{ContentFeatures, ObservableFeatures, PreparedRecord, SeqFeatures, SeqKind};
use super::forward::Forward;
use super::{ContentIds, Model, Similarity, UserIds, COSINE_EPS};

/// Embedded inputs of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurized {
    pub x_u: Tensor,
    /// Item embeddings and masks of the history and ad sequences.
    pub seqs: [(Tensor, Vec<bool>); 2],
    /// Item embeddings and masks of every onboarding day.
    pub onboarding: Vec<(Tensor, Vec<bool>)>,
}

fn check_shape(what: &str, t: &Tensor, rows: Option<usize>, cols: usize) -> Result<()> {
    if t.cols() != cols || rows.is_some_and(|r| t.rows() != r) {
        return Err(Error::Contract(format!(
            "`{what}` has shape {:?}, expected {} x {cols}",
            t.shape(),
            rows.map_or_else(|| String::from("n"), |r| format!("{r}"))
        )));
    }
    Ok(())
}

fn check_mask(what: &str, t: &Tensor, mask: &[bool]) -> Result<()> {
    if mask.len() != t.rows() {
        return Err(Error::Contract(format!(
            "`{what}` mask has {} entries for {} rows",
            mask.len(),
            t.rows()
        )));
    }
    Ok(())
}

/// Embeds a record's profile, behaviour sequences and onboarding days.
pub fn featurize(model: &Model, record: &UserJourneyRecord) -> Result<Featurized> {
    let c = model.config();
    let obs = ObservableFeatures::from_observable(&record.observable(), c)?;
    let content = ContentFeatures::from_days(&record.onboarding, c)?;
    let mut g = Graph::inference(model.params());
    let mut f = Forward::new(&mut g, model, false);
    let x_u = f.profile(&obs);
    let emb = |f: &mut Forward<'_, '_>, s: &SeqFeatures| {
        let v = f.item_embeddings(s);
        (v, s.mask.clone())
    };
    let h = emb(&mut f, &obs.hist);
    let a = emb(&mut f, &obs.ad);
    let days: Vec<(Var, Vec<bool>)> = content.days.iter().map(|d| emb(&mut f, d)).collect();
    let val = |v: Var| g.value(v).clone();
    Ok(Featurized {
        x_u: val(x_u),
        seqs: [(val(h.0), h.1), (val(a.0), a.1)],
        onboarding: days.into_iter().map(|(v, m)| (val(v), m)).collect(),
    })
}

fn hae_parts(model: &Model) -> Result<&super::HaeIds> {
    match &model.layout().content {
        Some(ContentIds::Hae { hae, .. }) => Ok(hae),
        _ => Err(Error::Contract("model has no hierarchical content encoder".into())),
    }
}

/// One day's summary from the profile query and the day's item embeddings.
pub fn hae_day_compress(model: &Model, x_u: &Tensor, h_day: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let c = model.config();
    let hae = hae_parts(model)?;
    check_shape("x_u", x_u, Some(1), c.d_emb)?;
    check_shape("H_day", h_day, None, c.d_emb)?;
    check_mask("H_day", h_day, mask)?;
    let mut g = Graph::inference(model.params());
    let x = g.constant(x_u.clone());
    let wq = g.param(hae.cross_wq);
    let q = g.matmul(x, wq);
    let (wk, wv) = (g.param(hae.cross_wk), g.param(hae.cross_wv));
    let a = if mask.iter().any(|m| *m) {
        let h = g.constant(h_day.clone());
        let k = g.matmul(h, wk);
        let v = g.matmul(h, wv);
        g.attention(q, k, v, Some(mask), c.n_heads, false)
    } else {
        let ph = g.param(hae.placeholder);
        let k = g.matmul(ph, wk);
        let v = g.matmul(ph, wv);
        g.attention(q, k, v, None, c.n_heads, false)
    };
    let wo = g.param(hae.cross_wo);
    let out = g.matmul(a, wo);
    Ok(g.value(out).clone())
}

/// Causal mixing of the `D` day summaries.
pub fn hae_causal(model: &Model, s: &Tensor) -> Result<Tensor> {
    let c = model.config();
    hae_parts(model)?;
    check_shape("s", s, Some(c.n_days), c.d_emb)?;
    let mut g = Graph::inference(model.params());
    let mut f = Forward::new(&mut g, model, false);
    let sv = f.g.constant(s.clone());
    let out = f.hae_causal(sv);
    Ok(g.value(out).clone())
}

/// Per-task content representations from the mixed day summaries.
pub fn hae_project(model: &Model, s_tilde: &Tensor) -> Result<BTreeMap<String, Tensor>> {
    let c = model.config();
    let proj = match &model.layout().content {
        Some(ContentIds::Hae { proj, .. }) => proj,
        _ => return Err(Error::Contract("model has no hierarchical content encoder".into())),
    };
    check_shape("s_tilde", s_tilde, Some(c.n_days), c.d_emb)?;
    let mut g = Graph::inference(model.params());
    let mut f = Forward::new(&mut g, model, false);
    let st = f.g.constant(s_tilde.clone());
    let mut out = Vec::new();
    for (t, ids) in c.tasks.iter().zip(proj) {
        if t.horizon == 0 || t.horizon > c.n_days {
            return Err(Error::Config(format!("task `{}` horizon exceeds D", t.name)));
        }
        let row = f.g.row_of(st, t.horizon - 1);
        out.push((t.name.clone(), f.mlp(row, ids)));
    }
    Ok(out.into_iter().map(|(n, v)| (n, g.value(v).clone())).collect())
}

/// `h_j = [e_j ; x_u]` for every row of the sequence.
pub fn sfe_condition(seq_emb: &Tensor, x_u: &Tensor) -> Tensor {
    assert_eq!(x_u.rows(), 1, "x_u must be a row vector");
    let (n, d) = seq_emb.shape();
    let w = d + x_u.cols();
    let mut out = Tensor::zeros(n, w);
    for r in 0..n {
        out.row_mut(r)[..d].copy_from_slice(seq_emb.row(r));
        out.row_mut(r)[d..].copy_from_slice(x_u.row(0));
    }
    out
}

fn stacked(a: &Tensor, b: &Tensor) -> Tensor {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::from_vec(a.rows() + b.rows(), a.cols(), data)
}

/// `K` learned queries attending over the conditioned sequence `H_m`.
///
/// `x_u` conditions the placeholder that an empty sequence attends to.
pub fn sfe_compress(model: &Model, kind: SeqKind, x_u: &Tensor, h_m: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let c = model.config();
    let ids = match &model.layout().user {
        Some(UserIds::Sfe { seqs, .. }) => &seqs[kind.index()],
        _ => return Err(Error::Contract("model has no sequence fusion encoder".into())),
    };
    check_shape("x_u", x_u, Some(1), c.d_emb)?;
    check_shape("H_m", h_m, None, 2 * c.d_emb)?;
    check_mask("H_m", h_m, mask)?;
    let p = model.params();
    let wk = stacked(p.value(ids.wk_item), p.value(ids.wk_prof));
    let wv = stacked(p.value(ids.wv_item), p.value(ids.wv_prof));
    let (h, mask) = if mask.iter().any(|m| *m) {
        (h_m.clone(), Some(mask))
    } else {
        (sfe_condition(p.value(ids.placeholder), x_u), None)
    };
    let mut g = Graph::inference(p);
    let (qs, wq) = (g.param(ids.queries), g.param(ids.wq));
    let q = g.matmul(qs, wq);
    let h = g.constant(h);
    let (wk, wv) = (g.constant(wk), g.constant(wv));
    let k = g.matmul(h, wk);
    let v = g.matmul(h, wv);
    let a = g.attention(q, k, v, mask, c.n_heads, false);
    let wo = g.param(ids.wo);
    let out = g.matmul(a, wo);
    Ok(g.value(out).clone())
}

/// The task tower over `[x_u ; flatten(s_hist) ; flatten(s_ad)]`.
pub fn sfe_task_tower(model: &Model, x_u: &Tensor, s: &[Tensor], task: &str) -> Result<Tensor> {
    let c = model.config();
    let towers = match &model.layout().user {
        Some(UserIds::Sfe { towers, .. }) => towers,
        _ => return Err(Error::Contract("model has no sequence fusion encoder".into())),
    };
    if s.len() != SeqKind::ALL.len() {
        return Err(Error::Contract(format!(
            "expected {} compressed sequences, got {}",
            SeqKind::ALL.len(),
            s.len()
        )));
    }
    check_shape("x_u", x_u, Some(1), c.d_emb)?;
    for m in s {
        check_shape("s_m", m, Some(c.n_queries), c.d_emb)?;
    }
    let t = c.task_index(task)?;
    let mut g = Graph::inference(model.params());
    let mut f = Forward::new(&mut g, model, false);
    let mut parts = alloc::vec![f.g.constant(x_u.clone())];
    for m in s {
        let v = f.g.constant(m.clone());
        parts.push(f.g.flatten(v));
    }
    let x = f.g.concat(&parts);
    let out = f.mlp(x, &towers[t]);
    Ok(g.value(out).clone())
}

/// Backbone probability for one task given the profile embedding, the pooled
/// history and ad embeddings, and the auxiliary representation.
pub fn backbone_score(model: &Model, x_u: &Tensor, pooled: [&Tensor; 2], aux: &Tensor, task: &str) -> Result<f64> {
    let c = model.config();
    check_shape("x_u", x_u, Some(1), c.d_emb)?;
    check_shape("aux", aux, Some(1), c.d_repr)?;
    for p in pooled {
        check_shape("pooled", p, Some(1), c.d_emb)?;
    }
    let t = c.task_index(task)?;
    let bb = &model.layout().backbone;
    let mut g = Graph::inference(model.params());
    let mut h = g.constant(Tensor::row_vector(
        [x_u.data(), aux.data(), pooled[0].data(), pooled[1].data()].concat(),
    ));
    let x = g.constant(x_u.clone());
    for l in &bb.layers {
        let (gw, gb) = (g.param(l.gate_w), g.param(l.gate_b));
        let z = g.matmul(x, gw);
        let z = g.add_row(z, gb);
        let s = g.sigmoid(z);
        let gate = g.scale(s, 2.0);
        let (w, b) = (g.param(l.w), g.param(l.b));
        let z = g.matmul(h, w);
        let z = g.add_row(z, b);
        let z = g.silu(z);
        h = g.mul(z, gate);
    }
    let (hw, hb) = bb.heads[t];
    let (hw, hb) = (g.param(hw), g.param(hb));
    let o = g.matmul(h, hw);
    let o = g.add_row(o, hb);
    let logit = g.scalar(o);
    if !logit.is_finite() {
        return Err(Error::Numeric("non-finite backbone logit".into()));
    }
    Ok(sigmoid(logit))
}

/// Summed per-task alignment loss between user and content representations.
pub fn loss_align(e_u: &[Tensor], e_c: &[Tensor], similarity: Similarity) -> Result<f64> {
    if e_u.len() != e_c.len() {
        return Err(Error::Contract("alignment needs one content vector per user vector".into()));
    }
    let mut total = 0.0;
    for (u, c) in e_u.iter().zip(e_c) {
        if u.shape() != c.shape() {
            return Err(Error::Contract(format!(
                "representation widths differ: {:?} vs {:?}",
                u.shape(),
                c.shape()
            )));
        }
        total += match similarity {
            Similarity::Cosine => 1.0 - cosine(u.data(), c.data(), COSINE_EPS),
            Similarity::L2 => u.data().iter().zip(c.data()).map(|(a, b)| (a - b) * (a - b)).sum(),
        };
    }
    Ok(total)
}

/// Leakage-free logits: the student path when present, the zero-aux backbone otherwise.
fn observable_logits(f: &mut Forward<'_, '_>, obs: &ObservableFeatures) -> Vec<Var> {
    let x_u = f.profile(obs);
    let aux = if f.model().has_student() {
        f.user_repr(x_u, obs)
    } else {
        f.zero_aux()
    };
    f.backbone_logits(x_u, obs, &aux)
}

fn probabilities(g: &Graph<'_>, logits: &[Var]) -> Result<Vec<f64>> {
    logits
        .iter()
        .map(|&l| {
            let z = g.scalar(l);
            if z.is_finite() {
                Ok(sigmoid(z))
            } else {
                Err(Error::Numeric("non-finite logit".into()))
            }
        })
        .collect()
}

/// Serving-time probability for `task` from bid-time inputs only.
pub fn infer(model: &Model, record: &ObservableRecord, task: &str) -> Result<f64> {
    let t = model.config().task_index(task)?;
    let obs = ObservableFeatures::from_observable(record, model.config())?;
    let mut g = Graph::inference(model.params());
    let mut f = Forward::new(&mut g, model, false);
    let logits = observable_logits(&mut f, &obs);
    Ok(probabilities(&g, &logits)?[t])
}

/// [`infer`] on a full record; its onboarding content and labels are ignored.
pub fn infer_record(model: &Model, record: &UserJourneyRecord, task: &str) -> Result<f64> {
    infer(model, &record.observable(), task)
}

const SCORE_CHUNK: usize = 256;

/// Leakage-free probabilities for many records, `[record][task]`.
///
/// Onboarding content attached to the records is never read.
pub fn score_batch(model: &Model, records: &[PreparedRecord]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(SCORE_CHUNK) {
        let mut g = Graph::inference(model.params());
        let mut f = Forward::new(&mut g, model, true);
        let logits: Vec<Vec<Var>> = chunk.iter().map(|r| observable_logits(&mut f, &r.obs)).collect();
        for l in &logits {
            out.push(probabilities(&g, l)?);
        }
    }
    Ok(out)
}

fn teacher_logits(f: &mut Forward<'_, '_>, r: &PreparedRecord) -> Result<Vec<Var>> {
    if !f.model().has_teacher() {
        return Err(Error::Contract("model has no content encoder".into()));
    }
    let content = r.require_content()?;
    let x_u = f.profile(&r.obs);
    let e_c = f.content_repr(x_u, content);
    Ok(f.backbone_logits(x_u, &r.obs, &e_c))
}

/// Probabilities from the content path, reading onboarding content. Only
/// meaningful as a leakage upper bound.
pub fn teacher_score(model: &Model, record: &UserJourneyRecord) -> Result<Vec<f64>> {
    let r = PreparedRecord::from_record(record, model.config())?;
    let mut g = Graph::inference(model.params());
    let mut f = Forward::new(&mut g, model, false);
    let logits = teacher_logits(&mut f, &r)?;
    probabilities(&g, &logits)
}

/// Batched [`teacher_score`], `[record][task]`.
pub fn teacher_score_batch(model: &Model, records: &[PreparedRecord]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(SCORE_CHUNK) {
        let mut g = Graph::inference(model.params());
        let mut f = Forward::new(&mut g, model, true);
        let mut logits = Vec::with_capacity(chunk.len());
        for r in chunk {
            logits.push(teacher_logits(&mut f, r)?);
        }
        for l in &logits {
            out.push(probabilities(&g, l)?);
        }
    }
    Ok(out)
}

/// Per-task `(e_u, e_c)` pairs for many records; `[record][task]`.
pub(crate) fn representation_pairs(model: &Model, records: &[PreparedRecord]) -> Result<Vec<Vec<(Tensor, Tensor)>>> {
    if !model.has_teacher() || !model.has_student() {
        return Err(Error::Contract("alignment needs both content and user encoders".into()));
    }
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(SCORE_CHUNK) {
        let mut g = Graph::inference(model.params());
        let mut f = Forward::new(&mut g, model, true);
        let mut vars = Vec::with_capacity(chunk.len());
        for r in chunk {
            let content = r.require_content()?;
            let x_u = f.profile(&r.obs);
            let e_u = f.user_repr(x_u, &r.obs);
            let e_c = f.content_repr(x_u, content);
            vars.push((e_u, e_c));
        }
        for (e_u, e_c) in vars {
            out.push(
                e_u.iter()
                    .zip(&e_c)
                    .map(|(&u, &c)| (g.value(u).clone(), g.value(c).clone()))
                    .collect(),
            );
        }
    }
    Ok(out)
}

/// Intermediate values of one record's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub x_u: Tensor,
    /// Item embeddings of each onboarding day.
    pub day_items: Vec<Tensor>,
    /// Day summaries `s^(1..D)`, one row per day.
    pub s: Option<Tensor>,
    /// Causally mixed summaries; present only when onboarding was provided.
    pub s_tilde: Option<Tensor>,
    pub e_c: Vec<Tensor>,
    /// Conditioned sequences `H^(m)` for history and ad.
    pub h_m: Vec<Tensor>,
    /// Compressed sequences `s^(m)` for history and ad.
    pub s_m: Vec<Tensor>,
    pub e_u: Vec<Tensor>,
    /// Backbone logits per task on the serving path.
    pub logits: Vec<f64>,
}

/// Runs every configured encoder on one record and records intermediates.
///
/// Onboarding content is only read when `with_content` is set.
pub fn forward_trace(model: &Model, record: &UserJourneyRecord, with_content: bool) -> Result<ForwardTrace> {
    let c = model.config();
    let r = if with_content {
        PreparedRecord::from_record(record, c)?
    } else {
        PreparedRecord::observable_only(record, c)?
    };
    let mut g = Graph::inference(model.params());
    let mut f = Forward::new(&mut g, model, false);
    let x_u = f.profile(&r.obs);
    let mut day_items = Vec::new();
    let mut s = None;
    let mut s_tilde = None;
    let mut e_c = Vec::new();
    if let (Some(content), true) = (&r.content, model.has_teacher()) {
        day_items = content.days.iter().map(|d| f.item_embeddings(d)).collect();
        if matches!(model.layout().content, Some(ContentIds::Hae { .. })) {
            let sv = f.hae_days(x_u, content);
            s = Some(sv);
            s_tilde = Some(f.hae_causal(sv));
        }
        e_c = f.content_repr(x_u, content);
    }
    let mut h_m = Vec::new();
    let mut s_m = Vec::new();
    if matches!(model.layout().user, Some(UserIds::Sfe { .. })) {
        for kind in SeqKind::ALL {
            let seq = r.obs.seq(kind);
            h_m.push(f.item_embeddings(seq));
            s_m.push(f.sfe_compress(x_u, kind, seq));
        }
    }
    let e_u = if model.has_student() {
        f.user_repr(x_u, &r.obs)
    } else {
        Vec::new()
    };
    let logits = observable_logits(&mut f, &r.obs);
    let xv = g.value(x_u).clone();
    let val = |v: Var| g.value(v).clone();
    Ok(ForwardTrace {
        h_m: h_m.into_iter().map(|h| sfe_condition(&val(h), &xv)).collect(),
        x_u: xv.clone(),
        day_items: day_items.into_iter().map(val).collect(),
        s: s.map(val),
        s_tilde: s_tilde.map(val),
        e_c: e_c.into_iter().map(val).collect(),
        s_m: s_m.into_iter().map(val).collect(),
        e_u: e_u.into_iter().map(val).collect(),
        logits: logits.into_iter().map(|l| g.scalar(l)).collect(),
    })
}
