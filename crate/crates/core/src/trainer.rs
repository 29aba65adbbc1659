//! Two-stage training with group freezing and seeded determinism.
//!
//! Runs are single-threaded and use 64-bit arithmetic throughout, so the
//! same data, configs and seed always produce a bit-identical checkpoint.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::UserJourneyRecord;
use crate::error::{Error, Result};
use crate::fingerprint::fingerprint;
use crate::graph::Graph;
use crate::model::{batch_loss, Forward, Model, ModelConfig, Objective, PreparedRecord};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Group, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    /// Parameters are rounded to `f32` after every update and stored as `f32`.
    F32,
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// 1 (content path, or the backbone alone) or 2 (distillation).
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Extra groups held fixed; stage 2 with a pretrained teacher always freezes the teacher.
    #[serde(default)]
    pub freeze_groups: Vec<String>,
    /// Steps between training-loss log entries.
    pub eval_every: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: 1,
            epochs: 2,
            batch_size: 256,
            step_size: 1e-3,
            seed: 1,
            freeze_groups: Vec::new(),
            eval_every: 50,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(Error::Config(format!("`stage` = {} must be 1 or 2", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("`batch_size` must be positive".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("`step_size` = {} must be positive", self.step_size)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("`eval_every` must be positive".into()));
        }
        self.frozen()?;
        Ok(())
    }

    pub fn frozen(&self) -> Result<Vec<Group>> {
        self.freeze_groups
            .iter()
            .map(|n| {
                Group::from_name(n)
                    .ok_or_else(|| Error::Config(format!("`freeze_groups` names unknown group `{n}`")))
            })
            .collect()
    }

    pub fn hash(&self) -> String {
        fingerprint(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    /// Backbone alone, zero auxiliary input.
    Base,
    /// Content path trained with onboarding visible (the teacher).
    Stage1,
    /// Distilled user path.
    Stage2,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::Base => "base",
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
        }
    }

    pub fn from_name(s: &str) -> Option<StageTag> {
        [StageTag::Base, StageTag::Stage1, StageTag::Stage2]
            .into_iter()
            .find(|t| t.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub model_config: ModelConfig,
    pub stage: StageTag,
    pub train_config_hash: String,
    pub rng_seed: u64,
    /// Position of the training rng stream at the end of the run.
    pub rng_word_pos: u128,
    pub step: u64,
    pub precision: Precision,
}

impl Checkpoint {
    pub fn model(&self) -> Result<Model> {
        Model::from_params(&self.model_config, self.params.clone())
    }

    /// The model, provided the stored config is exactly `expected`.
    pub fn model_for(&self, expected: &ModelConfig) -> Result<Model> {
        if let Some(field) = expected.first_difference(&self.model_config) {
            return Err(Error::Incompatible(format!(
                "checkpoint model config differs in `{field}`"
            )));
        }
        self.model()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub bce: f64,
    pub align: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Batch losses every `eval_every` steps and at the last step.
    pub log: Vec<LossRecord>,
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Prepares records, keeping onboarding content when `with_content`.
pub fn prepare(records: &[UserJourneyRecord], config: &ModelConfig, with_content: bool) -> Result<Vec<PreparedRecord>> {
    records
        .iter()
        .map(|r| {
            if with_content {
                if r.onboarding.is_empty() || r.onboarding[0].is_empty() {
                    return Err(Error::Input(format!(
                        "record of user {} lacks onboarding content",
                        r.user_id
                    )));
                }
                PreparedRecord::from_record(r, config)
            } else {
                PreparedRecord::observable_only(r, config)
            }
        })
        .collect()
}

fn run(
    mut model: Model,
    trainable: Vec<bool>,
    records: &[PreparedRecord],
    objective: Objective,
    tc: &TrainConfig,
    mut rng: ChaCha8Rng,
    stage: StageTag,
) -> Result<TrainOutcome> {
    if records.is_empty() && tc.epochs > 0 {
        return Err(Error::Input("training set is empty".into()));
    }
    let round_all = |m: &mut Model| {
        if tc.precision == Precision::F32 {
            let ids: Vec<_> = m.params().iter().map(|(id, _)| id).collect();
            for id in ids {
                for v in m.params_mut().value_mut(id).data_mut() {
                    *v = Precision::F32.round(*v);
                }
            }
        }
    };
    round_all(&mut model);
    let mut opt = Adam::new(
        AdamConfig {
            step_size: tc.step_size,
            ..AdamConfig::default()
        },
        model.params().len(),
    );
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut log = Vec::new();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);
    let total_steps = tc.epochs as u64 * records.len().div_ceil(tc.batch_size) as u64;
    let mut step = 0u64;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<&PreparedRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let (grads, loss, bce, align) = {
                let mut g = Graph::training(model.params(), &trainable);
                let mut f = Forward::new(&mut g, &model, true);
                let l = batch_loss(&mut f, &batch, objective)?;
                let loss = g.scalar(l.total);
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at step {step}")));
                }
                (g.backward(l.total), loss, l.bce, l.align)
            };
            opt.step(model.params_mut(), &grads);
            if tc.precision == Precision::F32 {
                for (id, _) in grads.iter() {
                    for v in model.params_mut().value_mut(id).data_mut() {
                        *v = Precision::F32.round(*v);
                    }
                }
            }
            step += 1;
            sum += loss;
            batches += 1;
            if step % tc.eval_every as u64 == 0 || step == total_steps {
                log.push(LossRecord {
                    step,
                    epoch,
                    loss,
                    bce,
                    align,
                });
            }
        }
        epoch_losses.push(sum / batches as f64);
    }
    if !model.params().all_finite() {
        return Err(Error::Numeric("training produced non-finite parameters".into()));
    }
    let checkpoint = Checkpoint {
        model_config: model.config().clone(),
        params: model.into_params(),
        stage,
        train_config_hash: tc.hash(),
        rng_seed: tc.seed,
        rng_word_pos: rng.get_word_pos(),
        step,
        precision: tc.precision,
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        epoch_losses,
    })
}

fn trainable_mask(params: &ModelParams, frozen: &[Group]) -> Vec<bool> {
    params.iter().map(|(_, p)| !frozen.contains(&p.group)).collect()
}

/// Trains the content path and backbone end to end with onboarding visible,
/// or the backbone alone when the config is `backbone_only`.
pub fn train_stage1(train: &[UserJourneyRecord], mc: &ModelConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    mc.validate()?;
    if tc.stage != 1 {
        return Err(Error::Config("train_stage1 needs `stage` = 1".into()));
    }
    let (objective, tag) = if mc.backbone_only {
        (Objective::Base, StageTag::Base)
    } else {
        (Objective::Stage1, StageTag::Stage1)
    };
    let records = prepare(train, mc, objective == Objective::Stage1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let model = Model::init_with(mc, &mut rng)?;
    let trainable = trainable_mask(model.params(), &tc.frozen()?);
    run(model, trainable, &records, objective, tc, rng, tag)
}

/// Trains the user path against the content path.
///
/// With `teacher_pretrained`, the teacher's embeddings, content encoder and
/// projections are copied in and frozen, and the backbone starts fresh.
/// Without it, everything is trained jointly from initialization.
pub fn train_stage2(
    train: &[UserJourneyRecord],
    teacher: Option<&Checkpoint>,
    mc: &ModelConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    tc.validate()?;
    mc.validate()?;
    if tc.stage != 2 {
        return Err(Error::Config("train_stage2 needs `stage` = 2".into()));
    }
    if mc.backbone_only {
        return Err(Error::Config("stage 2 needs content and user encoders (`backbone_only` is set)".into()));
    }
    let records = prepare(train, mc, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = Model::init_with(mc, &mut rng)?;
    let mut frozen = tc.frozen()?;
    if mc.teacher_pretrained {
        let teacher = teacher.ok_or_else(|| {
            Error::Config("`teacher_pretrained` is set but no stage-1 checkpoint was given".into())
        })?;
        if teacher.stage != StageTag::Stage1 {
            return Err(Error::Incompatible(format!(
                "teacher checkpoint is tagged {}, expected stage1",
                teacher.stage.name()
            )));
        }
        if let Some(field) = mc.teacher_mismatch(&teacher.model_config) {
            return Err(Error::Config(format!(
                "teacher model config is incompatible in `{field}`"
            )));
        }
        for g in Group::TEACHER {
            model.params_mut().copy_group_from(&teacher.params, g)?;
            if !frozen.contains(&g) {
                frozen.push(g);
            }
        }
    } else if teacher.is_some() {
        return Err(Error::Config("a teacher was given but `teacher_pretrained` is false".into()));
    }
    let trainable = trainable_mask(model.params(), &frozen);
    run(model, trainable, &records, Objective::Stage2, tc, rng, StageTag::Stage2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, GenConfig};
    use crate::testutil::{tiny_gen, tiny_model};

    fn micro() -> (Vec<UserJourneyRecord>, ModelConfig) {
        let gen = GenConfig {
            n_users: 200,
            ..tiny_gen()
        };
        let (train, _) = generate_dataset(&gen).unwrap();
        let mut records = train.records;
        records.truncate(512);
        (records, tiny_model(&gen))
    }

    fn tc(stage: u8, epochs: usize) -> TrainConfig {
        TrainConfig {
            stage,
            epochs,
            batch_size: 32,
            step_size: 3e-3,
            seed: 5,
            eval_every: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn stage1_lowers_loss_and_is_deterministic() {
        let (records, mc) = micro();
        assert!(records.len() >= 400);
        let a = train_stage1(&records, &mc, &tc(1, 3)).unwrap();
        assert!(a.epoch_losses[2] < a.epoch_losses[0], "{:?}", a.epoch_losses);
        assert_eq!(a.checkpoint.stage, StageTag::Stage1);
        let b = train_stage1(&records, &mc, &tc(1, 3)).unwrap();
        assert!(a.checkpoint.params.bit_eq(&b.checkpoint.params));
        assert_eq!(a.checkpoint, b.checkpoint);
        assert!(!a.log.is_empty());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (records, mc) = micro();
        let out = train_stage1(&records, &mc, &tc(1, 0)).unwrap();
        let init = Model::init(&mc, 5).unwrap();
        assert!(out.checkpoint.params.bit_eq(init.params()));
        assert_eq!(out.checkpoint.step, 0);
    }

    #[test]
    fn stage2_freezes_teacher_and_learns() {
        let (records, mc) = micro();
        let teacher = train_stage1(&records, &mc, &tc(1, 1)).unwrap().checkpoint;
        let out = train_stage2(&records, Some(&teacher), &mc, &tc(2, 3)).unwrap();
        let ck = &out.checkpoint;
        for g in Group::TEACHER {
            assert!(ck.params.group_bit_eq(&teacher.params, g), "{g} changed");
        }
        assert!(out.epoch_losses[2] < out.epoch_losses[0], "{:?}", out.epoch_losses);
        assert_eq!(ck.stage, StageTag::Stage2);

        let mc0 = ModelConfig { lambda: 0.0, ..mc.clone() };
        let zero = train_stage2(&records, Some(&teacher), &mc0, &tc(2, 1)).unwrap().checkpoint;
        let one = train_stage2(&records, Some(&teacher), &mc, &tc(2, 1)).unwrap().checkpoint;
        assert!(!zero.params.group_bit_eq(&one.params, Group::Sfe));
    }

    #[test]
    fn stage2_requires_compatible_teacher() {
        let (records, mc) = micro();
        assert!(matches!(
            train_stage2(&records, None, &mc, &tc(2, 1)),
            Err(Error::Config(_))
        ));
        let other = ModelConfig { d_repr: 3, ..mc.clone() };
        let teacher = train_stage1(&records, &other, &tc(1, 0)).unwrap().checkpoint;
        let err = train_stage2(&records, Some(&teacher), &mc, &tc(2, 1)).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("d_repr")), "{err}");
    }

    #[test]
    fn joint_stage2_runs_without_teacher() {
        let (records, mc) = micro();
        let mc = ModelConfig {
            teacher_pretrained: false,
            stop_gradient: false,
            ..mc
        };
        let out = train_stage2(&records, None, &mc, &tc(2, 1)).unwrap();
        assert_eq!(out.checkpoint.stage, StageTag::Stage2);
        let init = Model::init(&mc, 5).unwrap();
        assert!(!out.checkpoint.params.group_bit_eq(init.params(), Group::Hae));
    }

    #[test]
    fn base_training_and_explicit_freezing() {
        let (records, mc) = micro();
        let base = ModelConfig { backbone_only: true, ..mc.clone() };
        let out = train_stage1(&records, &base, &tc(1, 1)).unwrap();
        assert_eq!(out.checkpoint.stage, StageTag::Base);

        let frozen = TrainConfig {
            freeze_groups: alloc::vec!["embeddings".into()],
            ..tc(1, 1)
        };
        let out = train_stage1(&records, &mc, &frozen).unwrap();
        let init = Model::init(&mc, 5).unwrap();
        assert!(out.checkpoint.params.group_bit_eq(init.params(), Group::Embeddings));
        let bad = TrainConfig {
            freeze_groups: alloc::vec!["nope".into()],
            ..tc(1, 1)
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn f32_precision_rounds_parameters() {
        let (records, mc) = micro();
        let c = TrainConfig {
            precision: Precision::F32,
            ..tc(1, 1)
        };
        let out = train_stage1(&records, &mc, &c).unwrap();
        for (_, p) in out.checkpoint.params.iter() {
            assert!(p.value.data().iter().all(|v| (*v as f32) as f64 == *v));
        }
    }

    #[test]
    fn missing_onboarding_is_rejected() {
        let (mut records, mc) = micro();
        records[3].onboarding.clear();
        assert!(matches!(train_stage1(&records, &mc, &tc(1, 1)), Err(Error::Input(_))));
    }
}
