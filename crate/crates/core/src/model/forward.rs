//! Forward computations recorded on an autodiff tape.

use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::params::ParamId;
use crate::tensor::Tensor;

use super::features::{ContentFeatures, ObservableFeatures, SeqFeatures, SeqKind};
use super::{ContentIds, MlpIds, Model, SfeSeqIds, UserIds};

/// Item tables that are projected before gathering.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Table {
    Raw,
    HaeKey,
    HaeValue,
    SfeKey(usize),
    SfeValue(usize),
}

impl Table {
    fn slot(self) -> usize {
        match self {
            Table::Raw => 0,
            Table::HaeKey => 1,
            Table::HaeValue => 2,
            Table::SfeKey(m) => 3 + 2 * m,
            Table::SfeValue(m) => 4 + 2 * m,
        }
    }
}

/// Builds model outputs on a tape, reusing per-tape projections.
///
/// In batch mode every projected item table (`E·W`) is computed once and
/// rows are gathered from it; otherwise rows are gathered first and then
/// projected. Both orders accumulate identically, so results are bitwise
/// equal; batch mode is just cheaper when many records share a tape.
pub struct Forward<'a, 'p> {
    pub g: &'a mut Graph<'p>,
    model: &'p Model,
    batch_mode: bool,
    tables: [Option<Var>; 7],
    queries: [Option<Var>; 2],
}

impl<'a, 'p> Forward<'a, 'p> {
    pub fn new(g: &'a mut Graph<'p>, model: &'p Model, batch_mode: bool) -> Self {
        assert!(
            core::ptr::eq(g.params(), model.params()),
            "tape and model must share parameters"
        );
        Forward {
            g,
            model,
            batch_mode,
            tables: [None; 7],
            queries: [None; 2],
        }
    }

    pub fn model(&self) -> &'p Model {
        self.model
    }

    fn p(&mut self, id: ParamId) -> Var {
        self.g.param(id)
    }

    fn table_weight(&self, t: Table) -> Option<ParamId> {
        let layout = self.model.layout();
        match t {
            Table::Raw => None,
            Table::HaeKey | Table::HaeValue => match &layout.content {
                Some(ContentIds::Hae { hae, .. }) => {
                    Some(if t == Table::HaeKey { hae.cross_wk } else { hae.cross_wv })
                }
                _ => panic!("model has no hierarchical content encoder"),
            },
            Table::SfeKey(m) | Table::SfeValue(m) => match &layout.user {
                Some(UserIds::Sfe { seqs, .. }) => Some(match t {
                    Table::SfeKey(_) => seqs[m].wk_item,
                    _ => seqs[m].wv_item,
                }),
                _ => panic!("model has no sequence fusion encoder"),
            },
        }
    }

    /// Rows `items` of the item table projected by the weight of `t`.
    fn rows(&mut self, t: Table, items: &[u32]) -> Var {
        let emb = self.model.layout().emb.item;
        let weight = self.table_weight(t);
        if self.batch_mode || weight.is_none() {
            let table = match self.tables[t.slot()] {
                Some(v) => v,
                None => {
                    let e = self.p(emb);
                    let v = match weight {
                        Some(w) => {
                            let w = self.p(w);
                            self.g.matmul(e, w)
                        }
                        None => e,
                    };
                    self.tables[t.slot()] = Some(v);
                    v
                }
            };
            self.g.gather(table, items)
        } else {
            let e = self.p(emb);
            let rows = self.g.gather(e, items);
            let w = self.p(weight.unwrap());
            self.g.matmul(rows, w)
        }
    }

    /// Two-layer MLP with a SiLU hidden layer.
    pub(crate) fn mlp(&mut self, x: Var, ids: &MlpIds) -> Var {
        let (w1, b1, w2, b2) = (self.p(ids.w1), self.p(ids.b1), self.p(ids.w2), self.p(ids.b2));
        let h = self.g.matmul(x, w1);
        let h = self.g.add_row(h, b1);
        let h = self.g.silu(h);
        let o = self.g.matmul(h, w2);
        self.g.add_row(o, b2)
    }

    /// Profile embedding `x_u`: categorical embeddings next to the projected dense profile.
    pub fn profile(&mut self, obs: &ObservableFeatures) -> Var {
        let emb = self.model.layout().emb.clone();
        let mut parts = Vec::with_capacity(emb.cats.len() + 1);
        for (id, &v) in emb.cats.iter().zip(&obs.profile_cat) {
            let table = self.p(*id);
            parts.push(self.g.gather(table, &[v]));
        }
        let dense = self.g.constant(Tensor::row_vector(obs.profile_dense.clone()));
        let w = self.p(emb.dense);
        parts.push(self.g.matmul(dense, w));
        self.g.concat(&parts)
    }

    /// Raw item embeddings of a sequence.
    pub fn item_embeddings(&mut self, seq: &SeqFeatures) -> Var {
        self.rows(Table::Raw, &seq.items)
    }

    /// Masked mean of a sequence's item embeddings (zero when empty).
    pub fn pooled(&mut self, seq: &SeqFeatures) -> Var {
        let e = self.item_embeddings(seq);
        self.g.masked_mean(e, &seq.mask)
    }

    fn hae_ids(&self) -> super::HaeIds {
        match &self.model.layout().content {
            Some(ContentIds::Hae { hae, .. }) => hae.clone(),
            _ => panic!("model has no hierarchical content encoder"),
        }
    }

    /// Pre-output day summary: profile-queried attention over one day's items.
    pub fn day_attention(&mut self, query: Var, day: &SeqFeatures) -> Var {
        let heads = self.model.config().n_heads;
        if day.valid_count() == 0 {
            let hae = self.hae_ids();
            let ph = self.p(hae.placeholder);
            let (wk, wv) = (self.p(hae.cross_wk), self.p(hae.cross_wv));
            let k = self.g.matmul(ph, wk);
            let v = self.g.matmul(ph, wv);
            return self.g.attention(query, k, v, None, heads, false);
        }
        let k = self.rows(Table::HaeKey, &day.items);
        let v = self.rows(Table::HaeValue, &day.items);
        self.g.attention(query, k, v, Some(&day.mask), heads, false)
    }

    /// Day summaries `s^(1..D)` stacked as rows (`D x d_emb`).
    pub fn hae_days(&mut self, x_u: Var, content: &ContentFeatures) -> Var {
        let hae = self.hae_ids();
        let wq = self.p(hae.cross_wq);
        let q = self.g.matmul(x_u, wq);
        let rows: Vec<Var> = content.days.iter().map(|d| self.day_attention(q, d)).collect();
        let s = self.g.stack_rows(&rows);
        let wo = self.p(hae.cross_wo);
        self.g.matmul(s, wo)
    }

    /// Causal self-attention across days: `s̃ = s + Attn(LN(s + pos))·W_o`.
    pub fn hae_causal(&mut self, s: Var) -> Var {
        let hae = self.hae_ids();
        let heads = self.model.config().n_heads;
        let pos = self.p(hae.pos);
        let x = self.g.add(s, pos);
        let (lg, lb) = (self.p(hae.ln_g), self.p(hae.ln_b));
        let y = self.g.layer_norm(x, lg, lb);
        let (wq, wk, wv, wo) = (
            self.p(hae.self_wq),
            self.p(hae.self_wk),
            self.p(hae.self_wv),
            self.p(hae.self_wo),
        );
        let q = self.g.matmul(y, wq);
        let k = self.g.matmul(y, wk);
        let v = self.g.matmul(y, wv);
        let a = self.g.attention(q, k, v, None, heads, true);
        let a = self.g.matmul(a, wo);
        self.g.add(s, a)
    }

    /// Per-task content representations `e_c`.
    pub fn content_repr(&mut self, x_u: Var, content: &ContentFeatures) -> Vec<Var> {
        let cfg = self.model.config();
        let horizons: Vec<usize> = cfg.tasks.iter().map(|t| t.horizon).collect();
        match self.model.layout().content.clone() {
            Some(ContentIds::Hae { proj, .. }) => {
                let s = self.hae_days(x_u, content);
                let st = self.hae_causal(s);
                horizons
                    .iter()
                    .zip(&proj)
                    .map(|(h, ids)| {
                        let row = self.g.row_of(st, h - 1);
                        self.mlp(row, ids)
                    })
                    .collect()
            }
            Some(ContentIds::Mlp { proj }) => {
                let d = cfg.d_emb;
                let means: Vec<Var> = content.days.iter().map(|day| self.pooled(day)).collect();
                let zero = self.g.constant(Tensor::zeros(1, d));
                horizons
                    .iter()
                    .zip(&proj)
                    .map(|(&h, ids)| {
                        // days past the horizon are hidden from this task
                        let parts: Vec<Var> = (0..means.len())
                            .map(|i| if i < h { means[i] } else { zero })
                            .collect();
                        let x = self.g.concat(&parts);
                        self.mlp(x, ids)
                    })
                    .collect()
            }
            None => panic!("model has no content encoder"),
        }
    }

    fn sfe_ids(&self, kind: SeqKind) -> SfeSeqIds {
        match &self.model.layout().user {
            Some(UserIds::Sfe { seqs, .. }) => seqs[kind.index()].clone(),
            _ => panic!("model has no sequence fusion encoder"),
        }
    }

    /// `K` compressed rows of one behaviour sequence, conditioned on the profile.
    pub fn sfe_compress(&mut self, x_u: Var, kind: SeqKind, seq: &SeqFeatures) -> Var {
        let ids = self.sfe_ids(kind);
        let m = kind.index();
        let heads = self.model.config().n_heads;
        let q = match self.queries[m] {
            Some(q) => q,
            None => {
                let (qs, wq) = (self.p(ids.queries), self.p(ids.wq));
                let q = self.g.matmul(qs, wq);
                self.queries[m] = Some(q);
                q
            }
        };
        let (wkp, wvp) = (self.p(ids.wk_prof), self.p(ids.wv_prof));
        let kp = self.g.matmul(x_u, wkp);
        let vp = self.g.matmul(x_u, wvp);
        let (ki, vi, mask) = if seq.valid_count() == 0 {
            let ph = self.p(ids.placeholder);
            let (wk, wv) = (self.p(ids.wk_item), self.p(ids.wv_item));
            (self.g.matmul(ph, wk), self.g.matmul(ph, wv), None)
        } else {
            (
                self.rows(Table::SfeKey(m), &seq.items),
                self.rows(Table::SfeValue(m), &seq.items),
                Some(seq.mask.as_slice()),
            )
        };
        // [e_j; x_u]·W_k == e_j·W_k_item + x_u·W_k_prof
        let k = self.g.add_row(ki, kp);
        let v = self.g.add_row(vi, vp);
        let a = self.g.attention(q, k, v, mask, heads, false);
        let wo = self.p(ids.wo);
        self.g.matmul(a, wo)
    }

    /// Per-task user representations `e_u`.
    pub fn user_repr(&mut self, x_u: Var, obs: &ObservableFeatures) -> Vec<Var> {
        match self.model.layout().user.clone() {
            Some(UserIds::Sfe { towers, .. }) => {
                let sh = self.sfe_compress(x_u, SeqKind::Hist, &obs.hist);
                let sa = self.sfe_compress(x_u, SeqKind::Ad, &obs.ad);
                let fh = self.g.flatten(sh);
                let fa = self.g.flatten(sa);
                let x = self.g.concat(&[x_u, fh, fa]);
                towers.iter().map(|ids| self.mlp(x, ids)).collect()
            }
            Some(UserIds::Mlp { towers }) => {
                let ph = self.pooled(&obs.hist);
                let pa = self.pooled(&obs.ad);
                let x = self.g.concat(&[x_u, ph, pa]);
                towers.iter().map(|ids| self.mlp(x, ids)).collect()
            }
            None => panic!("model has no user encoder"),
        }
    }

    /// Backbone logits per task; `aux[t]` is the task's auxiliary representation.
    pub fn backbone_logits(&mut self, x_u: Var, obs: &ObservableFeatures, aux: &[Var]) -> Vec<Var> {
        let bb = self.model.layout().backbone.clone();
        assert_eq!(aux.len(), bb.heads.len(), "one auxiliary input per task");
        let ph = self.pooled(&obs.hist);
        let pa = self.pooled(&obs.ad);
        let gates: Vec<Var> = bb
            .layers
            .iter()
            .map(|l| {
                let (gw, gb) = (self.p(l.gate_w), self.p(l.gate_b));
                let z = self.g.matmul(x_u, gw);
                let z = self.g.add_row(z, gb);
                let s = self.g.sigmoid(z);
                self.g.scale(s, 2.0)
            })
            .collect();
        aux.iter()
            .zip(&bb.heads)
            .map(|(&a, &(hw, hb))| {
                let mut h = self.g.concat(&[x_u, a, ph, pa]);
                for (l, &gate) in bb.layers.iter().zip(&gates) {
                    let (w, b) = (self.p(l.w), self.p(l.b));
                    let z = self.g.matmul(h, w);
                    let z = self.g.add_row(z, b);
                    let z = self.g.silu(z);
                    h = self.g.mul(z, gate);
                }
                let (hw, hb) = (self.p(hw), self.p(hb));
                let o = self.g.matmul(h, hw);
                self.g.add_row(o, hb)
            })
            .collect()
    }

    /// Zero auxiliary inputs, one per task.
    pub fn zero_aux(&mut self) -> Vec<Var> {
        let c = self.model.config();
        let n = c.tasks.len();
        let z = self.g.constant(Tensor::zeros(1, c.d_repr));
        alloc::vec![z; n]
    }
}
