//! Small fixtures shared by unit tests.

use alloc::vec::Vec;

use crate::datagen::{generate_dataset, GenConfig, UserJourneyRecord};
use crate::model::{ModelConfig, PreparedRecord};
use crate::task::TaskSpec;

pub fn tiny_gen() -> GenConfig {
    GenConfig {
        vocab_size: 40,
        n_topics: 4,
        n_days: 3,
        day_cap: 4,
        hist_len: 6,
        ad_len: 3,
        n_users: 40,
        min_day_items: 1,
        tasks: alloc::vec![TaskSpec::new("LT1", 1), TaskSpec::new("LT3", 3)],
        ..GenConfig::default()
    }
}

pub fn tiny_model(gen: &GenConfig) -> ModelConfig {
    ModelConfig {
        d_emb: 8,
        d_repr: 4,
        n_queries: 2,
        backbone_hidden: alloc::vec![6, 5],
        tower_hidden: 6,
        proj_hidden: 5,
        ..ModelConfig::for_data(gen)
    }
}

pub fn tiny_records() -> (GenConfig, Vec<UserJourneyRecord>) {
    let gen = tiny_gen();
    let (train, _) = generate_dataset(&gen).unwrap();
    (gen, train.records)
}

pub fn prepared(records: &[UserJourneyRecord], c: &ModelConfig) -> Vec<PreparedRecord> {
    records
        .iter()
        .map(|r| PreparedRecord::from_record(r, c).unwrap())
        .collect()
}
