use ocarm_core::datagen::{generate_dataset, GenConfig, UserJourneyRecord};
use ocarm_core::metrics::mean_alignment_similarity;
use ocarm_core::model::{Model, ModelConfig, PreparedRecord, UserEncoderKind};
use ocarm_core::tensor::Tensor;
use ocarm_core::trainer::prepare;
use ocarm_core::TaskSpec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn records(n_users: usize) -> (GenConfig, Vec<UserJourneyRecord>) {
    let gen = GenConfig {
        vocab_size: 60,
        n_topics: 4,
        day_cap: 4,
        hist_len: 8,
        ad_len: 4,
        n_users,
        min_day_items: 1,
        tasks: vec![TaskSpec::new("LT1", 1), TaskSpec::new("LT7", 7)],
        ..GenConfig::default()
    };
    let (train, _) = generate_dataset(&gen).unwrap();
    (gen, train.records)
}

fn model_config(gen: &GenConfig, d_repr: usize) -> ModelConfig {
    ModelConfig {
        d_emb: 8,
        d_repr,
        n_queries: 2,
        backbone_hidden: vec![8],
        tower_hidden: 8,
        proj_hidden: 8,
        ..ModelConfig::for_data(gen)
    }
}

fn set(m: &mut Model, name: &str, value: Tensor) {
    let id = m.params().id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    *m.params_mut().value_mut(id) = value;
}

/// Zeroes both output layers and gives them the same bias, so user and
/// content representations coincide for every record.
fn identical_heads(m: &mut Model, seed: u64) {
    let c = m.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in &c.tasks {
        let bias = Tensor::row_vector((0..c.d_repr).map(|_| rng.random_range(-2.0..2.0)).collect());
        for prefix in ["hae_proj", "tower"] {
            let w2 = format!("{prefix}.{}.w2", t.name);
            let shape = m.params().value(m.params().id(&w2).unwrap()).shape();
            set(m, &w2, Tensor::zeros(shape.0, shape.1));
            set(m, &format!("{prefix}.{}.b2", t.name), bias.clone());
        }
    }
}

fn prepared(c: &ModelConfig, recs: &[UserJourneyRecord]) -> Vec<PreparedRecord> {
    prepare(recs, c, true).unwrap()
}

#[test]
fn identical_representations_have_unit_similarity() {
    let (gen, recs) = records(60);
    for user_encoder in [UserEncoderKind::Sfe, UserEncoderKind::Mlp] {
        let c = ModelConfig {
            user_encoder,
            ..model_config(&gen, 6)
        };
        let mut m = Model::init(&c, 5).unwrap();
        identical_heads(&mut m, 9);
        let sim = mean_alignment_similarity(&m, &prepared(&c, &recs)).unwrap();
        for (task, s) in sim {
            assert!((s - 1.0).abs() < 1e-12, "{task}: {s}");
        }
    }
}

#[test]
fn opposite_representations_have_negative_unit_similarity() {
    let (gen, recs) = records(30);
    let c = model_config(&gen, 6);
    let mut m = Model::init(&c, 5).unwrap();
    identical_heads(&mut m, 9);
    for t in &c.tasks {
        let name = format!("tower.{}.b2", t.name);
        let b = m.params().value(m.params().id(&name).unwrap()).map(|v| -v);
        set(&mut m, &name, b);
    }
    let sim = mean_alignment_similarity(&m, &prepared(&c, &recs)).unwrap();
    for (task, s) in sim {
        assert!((s + 1.0).abs() < 1e-12, "{task}: {s}");
    }
}

#[test]
fn untrained_model_is_roughly_unaligned() {
    let (gen, recs) = records(500);
    assert!(recs.len() >= 1000, "{} records", recs.len());
    let c = model_config(&gen, 16);
    let m = Model::init(&c, 21).unwrap();
    let sim = mean_alignment_similarity(&m, &prepared(&c, &recs)).unwrap();
    for (task, s) in sim {
        assert!(s.abs() < 0.2, "{task}: {s}");
    }
}

#[test]
fn similarity_needs_records() {
    let (gen, _) = records(10);
    let c = model_config(&gen, 4);
    let m = Model::init(&c, 1).unwrap();
    assert!(mean_alignment_similarity(&m, &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn similarity_is_a_cosine(seed in any::<u64>(), d_repr in 1usize..8) {
        let (gen, recs) = records(12);
        let c = model_config(&gen, d_repr);
        let m = Model::init(&c, seed).unwrap();
        let sim = mean_alignment_similarity(&m, &prepared(&c, &recs)).unwrap();
        prop_assert_eq!(sim.len(), 2);
        for s in sim.values() {
            prop_assert!(s.is_finite() && (-1.0..=1.0).contains(s), "{}", s);
        }
    }
}
