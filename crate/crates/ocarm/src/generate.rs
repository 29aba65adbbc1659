//! Parallel dataset generation.
//!
//! Each user owns its rng stream, so the parallel result equals
//! `ocarm_core::datagen::generate_dataset` record for record.

use ocarm_core::datagen::{generate_user, split_user_ids, Dataset, GenConfig, Split, World};
use rayon::prelude::*;

use crate::error::Result;

pub fn generate_dataset_parallel(config: &GenConfig) -> Result<(Dataset, Dataset)> {
    let world = World::new(config)?;
    let (train_ids, test_ids) = split_user_ids(config)?;
    let hash = config.hash();
    let build = |ids: std::ops::Range<u64>, split| Dataset {
        records: ids
            .into_par_iter()
            .map(|u| generate_user(&world, u))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect(),
        split_tag: split,
        gen_config_hash: hash.clone(),
    };
    Ok((build(train_ids, Split::Train), build(test_ids, Split::Test)))
}
