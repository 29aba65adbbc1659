//! The parameterized model: embeddings, the hierarchical content encoder
//! (teacher), the sequence fusion user encoder (student), the gated
//! retention backbone, and the training objectives built on them.

mod features;
mod forward;
mod loss;
mod ops;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::GenConfig;
use crate::error::{Error, Result};
use crate::fingerprint::fingerprint;
use crate::params::{Group, ModelParams, ParamId};
use crate::task::TaskSpec;
use crate::tensor::Tensor;

pub use features::{ContentFeatures, ObservableFeatures, PreparedRecord, SeqFeatures, SeqKind};
pub use forward::Forward;
pub use loss::{batch_loss, BatchLoss, Objective};
pub use ops::{
    backbone_score, featurize, forward_trace, hae_causal, hae_day_compress, hae_project, infer,
    infer_record, loss_align, score_batch, sfe_compress, sfe_condition, sfe_task_tower,
    teacher_score, teacher_score_batch, Featurized, ForwardTrace,
};
pub(crate) use ops::representation_pairs;

/// Norm floor of the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContentEncoderKind {
    /// Intra-day cross-attention pooling followed by causal inter-day self-attention.
    #[serde(rename = "HAE")]
    Hae,
    /// Mean-pooled days flattened into a per-task MLP.
    #[serde(rename = "MLP")]
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UserEncoderKind {
    /// Profile-conditioned learnable-query compression of each behaviour sequence.
    #[serde(rename = "SFE")]
    Sfe,
    /// Mean-pooled sequences concatenated with the profile into a per-task MLP.
    #[serde(rename = "MLP")]
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// `1 - cos(e_u, e_c)` per task.
    Cosine,
    /// `|e_u - e_c|^2` per task.
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub profile_cardinalities: Vec<usize>,
    pub profile_dense_dim: usize,
    pub d_emb: usize,
    pub n_heads: usize,
    pub d_repr: usize,
    /// Learnable query tokens per behaviour sequence (`K`).
    pub n_queries: usize,
    /// Onboarding days (`D`).
    pub n_days: usize,
    /// Interactions kept per onboarding day (`N`).
    pub day_cap: usize,
    pub hist_cap: usize,
    pub ad_cap: usize,
    pub tasks: Vec<TaskSpec>,
    /// Weight of the alignment term in the stage-2 objective.
    pub lambda: f64,
    pub backbone_hidden: Vec<usize>,
    pub tower_hidden: usize,
    pub proj_hidden: usize,
    pub content_encoder: ContentEncoderKind,
    pub user_encoder: UserEncoderKind,
    pub teacher_pretrained: bool,
    pub stop_gradient: bool,
    pub similarity: Similarity,
    /// Backbone alone with a zero auxiliary input (the base configuration).
    pub backbone_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::for_data(&GenConfig::default())
    }
}

impl ModelConfig {
    /// Defaults sized for data produced by `gen`.
    pub fn for_data(gen: &GenConfig) -> Self {
        ModelConfig {
            vocab_size: gen.vocab_size,
            profile_cardinalities: gen.profile_cardinalities(),
            profile_dense_dim: gen.n_topics,
            d_emb: 32,
            n_heads: 2,
            d_repr: 16,
            n_queries: 4,
            n_days: gen.n_days,
            day_cap: gen.day_cap,
            hist_cap: gen.hist_len,
            ad_cap: gen.ad_len,
            tasks: gen.tasks.clone(),
            lambda: 1.0,
            backbone_hidden: alloc::vec![64, 32],
            tower_hidden: 64,
            proj_hidden: 32,
            content_encoder: ContentEncoderKind::Hae,
            user_encoder: UserEncoderKind::Sfe,
            teacher_pretrained: true,
            stop_gradient: true,
            similarity: Similarity::Cosine,
            backbone_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 {
            return err("`vocab_size` must be positive".into());
        }
        if self.profile_cardinalities.is_empty() || self.profile_cardinalities.contains(&0) {
            return err("`profile_cardinalities` must be non-empty and positive".into());
        }
        if self.n_heads == 0 || self.d_emb % self.n_heads != 0 {
            return err(format!(
                "`d_emb` = {} must be divisible by `n_heads` = {}",
                self.d_emb, self.n_heads
            ));
        }
        if self.d_emb <= self.profile_cardinalities.len() {
            return err("`d_emb` is too small for the profile fields".into());
        }
        if self.d_repr == 0 {
            return err("`d_repr` must be positive".into());
        }
        if self.n_queries == 0 {
            return err("`n_queries` (K) must be at least 1".into());
        }
        if self.n_days == 0 || self.day_cap == 0 {
            return err("`n_days` and `day_cap` must be positive".into());
        }
        if self.tasks.is_empty() {
            return err("`tasks` must not be empty".into());
        }
        for t in &self.tasks {
            if t.horizon == 0 || t.horizon > self.n_days {
                return err(format!(
                    "task `{}` horizon {} exceeds `n_days` = {}",
                    t.name, t.horizon, self.n_days
                ));
            }
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return err(format!("`lambda` = {} must be a finite value >= 0", self.lambda));
        }
        if self.backbone_hidden.is_empty() || self.backbone_hidden.contains(&0) {
            return err("`backbone_hidden` must list positive widths".into());
        }
        if self.tower_hidden == 0 || self.proj_hidden == 0 {
            return err("`tower_hidden` and `proj_hidden` must be positive".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        fingerprint(self)
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Input(format!("unknown task `{name}`")))
    }

    /// Widths of the categorical profile embeddings and of the dense projection.
    pub fn profile_widths(&self) -> (usize, usize) {
        let slots = self.profile_cardinalities.len() + 1;
        let cat = self.d_emb / slots;
        (cat, self.d_emb - cat * (slots - 1))
    }

    /// Name of the first field that differs, comparing everything.
    pub fn first_difference(&self, other: &ModelConfig) -> Option<&'static str> {
        self.differing_fields(other).into_iter().next()
    }

    fn differing_fields(&self, o: &ModelConfig) -> Vec<&'static str> {
        let mut out = Vec::new();
        macro_rules! cmp {
            ($($f:ident),*) => { $( if self.$f != o.$f { out.push(stringify!($f)); } )* };
        }
        cmp!(
            vocab_size, profile_cardinalities, profile_dense_dim, d_emb, n_heads, d_repr,
            n_queries, n_days, day_cap, hist_cap, ad_cap, tasks, lambda, backbone_hidden,
            tower_hidden, proj_hidden, content_encoder, user_encoder, teacher_pretrained,
            stop_gradient, similarity, backbone_only
        );
        out
    }

    /// First field that makes a teacher with config `teacher` unusable by `self`.
    pub fn teacher_mismatch(&self, teacher: &ModelConfig) -> Option<&'static str> {
        const SHARED: [&str; 11] = [
            "vocab_size",
            "profile_cardinalities",
            "profile_dense_dim",
            "d_emb",
            "n_heads",
            "d_repr",
            "n_days",
            "day_cap",
            "tasks",
            "proj_hidden",
            "content_encoder",
        ];
        if teacher.backbone_only {
            return Some("backbone_only");
        }
        self.differing_fields(teacher)
            .into_iter()
            .find(|f| SHARED.contains(f))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct EmbeddingIds {
    pub item: ParamId,
    pub cats: Vec<ParamId>,
    pub dense: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct HaeIds {
    pub cross_wq: ParamId,
    pub cross_wk: ParamId,
    pub cross_wv: ParamId,
    pub cross_wo: ParamId,
    pub placeholder: ParamId,
    pub pos: ParamId,
    pub ln_g: ParamId,
    pub ln_b: ParamId,
    pub self_wq: ParamId,
    pub self_wk: ParamId,
    pub self_wv: ParamId,
    pub self_wo: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) enum ContentIds {
    Hae { hae: HaeIds, proj: Vec<MlpIds> },
    Mlp { proj: Vec<MlpIds> },
}

#[derive(Clone, Debug)]
pub(crate) struct SfeSeqIds {
    pub queries: ParamId,
    pub wq: ParamId,
    pub wk_item: ParamId,
    pub wk_prof: ParamId,
    pub wv_item: ParamId,
    pub wv_prof: ParamId,
    pub wo: ParamId,
    pub placeholder: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) enum UserIds {
    Sfe { seqs: [SfeSeqIds; 2], towers: Vec<MlpIds> },
    Mlp { towers: Vec<MlpIds> },
}

#[derive(Clone, Debug)]
pub(crate) struct GatedLayerIds {
    pub w: ParamId,
    pub b: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct BackboneIds {
    pub layers: Vec<GatedLayerIds>,
    pub heads: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub emb: EmbeddingIds,
    pub content: Option<ContentIds>,
    pub user: Option<UserIds>,
    pub backbone: BackboneIds,
}

/// Named parameter shapes of a configuration, in creation order.
struct Spec {
    entries: Vec<(String, Group, usize, usize, Init)>,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Xavier,
}

impl Spec {
    fn add(&mut self, name: String, group: Group, rows: usize, cols: usize, init: Init) {
        self.entries.push((name, group, rows, cols, init));
    }

    fn mlp(&mut self, prefix: &str, group: Group, input: usize, hidden: usize, output: usize) {
        self.add(format!("{prefix}.w1"), group, input, hidden, Init::Xavier);
        self.add(format!("{prefix}.b1"), group, 1, hidden, Init::Zeros);
        self.add(format!("{prefix}.w2"), group, hidden, output, Init::Xavier);
        self.add(format!("{prefix}.b2"), group, 1, output, Init::Zeros);
    }
}

fn build_spec(c: &ModelConfig) -> Spec {
    let mut s = Spec { entries: Vec::new() };
    let d = c.d_emb;
    let emb_std = 1.0 / libm::sqrt(d as f64);
    let (cat_w, dense_w) = c.profile_widths();

    s.add("emb.item".into(), Group::Embeddings, c.vocab_size, d, Init::Normal(emb_std));
    for (i, card) in c.profile_cardinalities.iter().enumerate() {
        s.add(format!("emb.cat{i}"), Group::Embeddings, *card, cat_w, Init::Normal(emb_std));
    }
    s.add("emb.dense".into(), Group::Embeddings, c.profile_dense_dim, dense_w, Init::Xavier);

    if !c.backbone_only {
        match c.content_encoder {
            ContentEncoderKind::Hae => {
                for w in ["cross.wq", "cross.wk", "cross.wv", "cross.wo"] {
                    s.add(format!("hae.{w}"), Group::Hae, d, d, Init::Xavier);
                }
                s.add("hae.placeholder".into(), Group::Hae, 1, d, Init::Normal(emb_std));
                s.add("hae.pos".into(), Group::Hae, c.n_days, d, Init::Normal(0.1));
                s.add("hae.ln_g".into(), Group::Hae, 1, d, Init::Ones);
                s.add("hae.ln_b".into(), Group::Hae, 1, d, Init::Zeros);
                for w in ["self.wq", "self.wk", "self.wv", "self.wo"] {
                    s.add(format!("hae.{w}"), Group::Hae, d, d, Init::Xavier);
                }
                for t in &c.tasks {
                    s.mlp(&format!("hae_proj.{}", t.name), Group::HaeProj, d, c.proj_hidden, c.d_repr);
                }
            }
            ContentEncoderKind::Mlp => {
                for t in &c.tasks {
                    s.mlp(
                        &format!("hae_proj.{}", t.name),
                        Group::HaeProj,
                        c.n_days * d,
                        c.proj_hidden,
                        c.d_repr,
                    );
                }
            }
        }
        match c.user_encoder {
            UserEncoderKind::Sfe => {
                for kind in SeqKind::ALL {
                    let p = format!("sfe.{}", kind.name());
                    s.add(format!("{p}.queries"), Group::Sfe, c.n_queries, d, Init::Normal(0.02));
                    for w in ["wq", "wk_item", "wk_prof", "wv_item", "wv_prof", "wo"] {
                        s.add(format!("{p}.{w}"), Group::Sfe, d, d, Init::Xavier);
                    }
                    s.add(format!("{p}.placeholder"), Group::Sfe, 1, d, Init::Normal(emb_std));
                }
                let input = d + 2 * c.n_queries * d;
                for t in &c.tasks {
                    s.mlp(&format!("tower.{}", t.name), Group::TaskTowers, input, c.tower_hidden, c.d_repr);
                }
            }
            UserEncoderKind::Mlp => {
                for t in &c.tasks {
                    s.mlp(&format!("tower.{}", t.name), Group::TaskTowers, 3 * d, c.tower_hidden, c.d_repr);
                }
            }
        }
    }

    let mut input = d + c.d_repr + 2 * d;
    for (l, width) in c.backbone_hidden.iter().enumerate() {
        s.add(format!("backbone.l{l}.w"), Group::Backbone, input, *width, Init::Xavier);
        s.add(format!("backbone.l{l}.b"), Group::Backbone, 1, *width, Init::Zeros);
        s.add(format!("backbone.l{l}.gate_w"), Group::Backbone, d, *width, Init::Xavier);
        s.add(format!("backbone.l{l}.gate_b"), Group::Backbone, 1, *width, Init::Zeros);
        input = *width;
    }
    for t in &c.tasks {
        s.add(format!("backbone.head.{}.w", t.name), Group::Backbone, input, 1, Init::Xavier);
        s.add(format!("backbone.head.{}.b", t.name), Group::Backbone, 1, 1, Init::Zeros);
    }
    s
}

/// Configuration plus parameters, with parameter handles resolved.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ModelParams,
    layout: Layout,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(config, &mut rng)
    }

    pub fn init_with(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Model> {
        config.validate()?;
        let mut params = ModelParams::new();
        for (name, group, rows, cols, init) in build_spec(config).entries {
            let std = match init {
                Init::Normal(s) => Some(s),
                Init::Xavier => Some(libm::sqrt(2.0 / (rows + cols) as f64)),
                _ => None,
            };
            let value = match (init, std) {
                (Init::Zeros, _) => Tensor::zeros(rows, cols),
                (Init::Ones, _) => Tensor::filled(rows, cols, 1.0),
                (_, Some(std)) => {
                    let normal = Normal::new(0.0, std).expect("valid std");
                    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
                }
                _ => unreachable!(),
            };
            params.insert(&name, group, value);
        }
        Self::from_params(config, params)
    }

    /// Wraps existing parameters, checking every expected array is present with its shape.
    pub fn from_params(config: &ModelConfig, params: ModelParams) -> Result<Model> {
        config.validate()?;
        for (name, group, rows, cols, _) in build_spec(config).entries {
            let id = params.id(&name).ok_or_else(|| {
                Error::Incompatible(format!("parameter `{name}` is missing"))
            })?;
            let p = params.get(id);
            if p.group != group || p.value.shape() != (rows, cols) {
                return Err(Error::Incompatible(format!(
                    "parameter `{name}` has shape {:?} in group {}, expected {:?} in group {group}",
                    p.value.shape(),
                    p.group,
                    (rows, cols)
                )));
            }
        }
        let layout = Layout::resolve(config, &params)?;
        Ok(Model {
            config: config.clone(),
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn has_teacher(&self) -> bool {
        self.layout.content.is_some()
    }

    pub fn has_student(&self) -> bool {
        self.layout.user.is_some()
    }
}

impl Layout {
    fn resolve(c: &ModelConfig, p: &ModelParams) -> Result<Layout> {
        let id = |name: String| p.require(&name);
        let mlp = |prefix: String| -> Result<MlpIds> {
            Ok(MlpIds {
                w1: p.require(&format!("{prefix}.w1"))?,
                b1: p.require(&format!("{prefix}.b1"))?,
                w2: p.require(&format!("{prefix}.w2"))?,
                b2: p.require(&format!("{prefix}.b2"))?,
            })
        };
        let emb = EmbeddingIds {
            item: id("emb.item".into())?,
            cats: (0..c.profile_cardinalities.len())
                .map(|i| id(format!("emb.cat{i}")))
                .collect::<Result<_>>()?,
            dense: id("emb.dense".into())?,
        };
        let (content, user) = if c.backbone_only {
            (None, None)
        } else {
            let proj = c
                .tasks
                .iter()
                .map(|t| mlp(format!("hae_proj.{}", t.name)))
                .collect::<Result<Vec<_>>>()?;
            let content = match c.content_encoder {
                ContentEncoderKind::Hae => ContentIds::Hae {
                    hae: HaeIds {
                        cross_wq: id("hae.cross.wq".into())?,
                        cross_wk: id("hae.cross.wk".into())?,
                        cross_wv: id("hae.cross.wv".into())?,
                        cross_wo: id("hae.cross.wo".into())?,
                        placeholder: id("hae.placeholder".into())?,
                        pos: id("hae.pos".into())?,
                        ln_g: id("hae.ln_g".into())?,
                        ln_b: id("hae.ln_b".into())?,
                        self_wq: id("hae.self.wq".into())?,
                        self_wk: id("hae.self.wk".into())?,
                        self_wv: id("hae.self.wv".into())?,
                        self_wo: id("hae.self.wo".into())?,
                    },
                    proj,
                },
                ContentEncoderKind::Mlp => ContentIds::Mlp { proj },
            };
            let towers = c
                .tasks
                .iter()
                .map(|t| mlp(format!("tower.{}", t.name)))
                .collect::<Result<Vec<_>>>()?;
            let user = match c.user_encoder {
                UserEncoderKind::Sfe => {
                    let seq = |kind: SeqKind| -> Result<SfeSeqIds> {
                        let pre = format!("sfe.{}", kind.name());
                        Ok(SfeSeqIds {
                            queries: id(format!("{pre}.queries"))?,
                            wq: id(format!("{pre}.wq"))?,
                            wk_item: id(format!("{pre}.wk_item"))?,
                            wk_prof: id(format!("{pre}.wk_prof"))?,
                            wv_item: id(format!("{pre}.wv_item"))?,
                            wv_prof: id(format!("{pre}.wv_prof"))?,
                            wo: id(format!("{pre}.wo"))?,
                            placeholder: id(format!("{pre}.placeholder"))?,
                        })
                    };
                    UserIds::Sfe {
                        seqs: [seq(SeqKind::Hist)?, seq(SeqKind::Ad)?],
                        towers,
                    }
                }
                UserEncoderKind::Mlp => UserIds::Mlp { towers },
            };
            (Some(content), Some(user))
        };
        let backbone = BackboneIds {
            layers: (0..c.backbone_hidden.len())
                .map(|l| {
                    Ok(GatedLayerIds {
                        w: id(format!("backbone.l{l}.w"))?,
                        b: id(format!("backbone.l{l}.b"))?,
                        gate_w: id(format!("backbone.l{l}.gate_w"))?,
                        gate_b: id(format!("backbone.l{l}.gate_b"))?,
                    })
                })
                .collect::<Result<_>>()?,
            heads: c
                .tasks
                .iter()
                .map(|t| {
                    Ok((
                        id(format!("backbone.head.{}.w", t.name))?,
                        id(format!("backbone.head.{}.b", t.name))?,
                    ))
                })
                .collect::<Result<_>>()?,
        };
        Ok(Layout {
            emb,
            content,
            user,
            backbone,
        })
    }
}
