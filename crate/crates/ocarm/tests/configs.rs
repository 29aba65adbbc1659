use std::path::PathBuf;

use ocarm::config::{load_gen_config, load_matrix_config, load_model_config, load_train_config, MatrixConfig};
use ocarm_core::model::ModelConfig;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn shipped_configs_match_the_defaults() {
    let defaults = MatrixConfig::default();
    let gen = load_gen_config(&config("gen.toml")).unwrap();
    assert_eq!(gen, defaults.gen);
    let model = load_model_config(&config("model.toml")).unwrap();
    assert_eq!(model, ModelConfig::for_data(&gen));
    assert_eq!(load_train_config(&config("train_stage1.toml")).unwrap(), defaults.stage1);
    assert_eq!(load_train_config(&config("train_stage2.toml")).unwrap(), defaults.stage2);
    assert_eq!(load_matrix_config(&config("matrix.toml")).unwrap(), defaults);
}
