//! Binary checkpoint container.
//!
//! Layout: a magic line, one line of JSON metadata (config, stage, rng
//! state and the name, group and shape of every array), the little-endian
//! payload in the stored precision, then the SHA-256 of everything before it.

use std::path::Path;

use ocarm_core::model::ModelConfig;
use ocarm_core::params::{Group, ModelParams};
use ocarm_core::tensor::Tensor;
use ocarm_core::trainer::{Checkpoint, Precision, StageTag};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::fsutil::write_atomic;

pub const MAGIC: &[u8] = b"OCARM-CKPT/1\n";
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayMeta {
    name: String,
    group: Group,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    stage: StageTag,
    precision: Precision,
    model_config: ModelConfig,
    train_config_hash: String,
    rng_seed: u64,
    /// Decimal string: JSON numbers cannot carry 128 bits.
    rng_word_pos: String,
    step: u64,
    arrays: Vec<ArrayMeta>,
}

fn width(p: Precision) -> usize {
    match p {
        Precision::F64 => 8,
        Precision::F32 => 4,
    }
}

/// Serializes to bytes; the stored precision is the checkpoint's.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = Meta {
        stage: ckpt.stage,
        precision: ckpt.precision,
        model_config: ckpt.model_config.clone(),
        train_config_hash: ckpt.train_config_hash.clone(),
        rng_seed: ckpt.rng_seed,
        rng_word_pos: ckpt.rng_word_pos.to_string(),
        step: ckpt.step,
        arrays: ckpt
            .params
            .iter()
            .map(|(_, p)| ArrayMeta {
                name: p.name.clone(),
                group: p.group,
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
    };
    let mut out = MAGIC.to_vec();
    serde_json::to_writer(&mut out, &meta).expect("checkpoint metadata serializes");
    out.push(b'\n');
    for (_, p) in ckpt.params.iter() {
        for v in p.value.data() {
            match ckpt.precision {
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Parses bytes produced by [`encode`]. Any damage is an integrity error;
/// nothing is returned unless the checksum and layout both hold.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |message: String| Error::Integrity {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < MAGIC.len() + DIGEST_LEN {
        return Err(bad("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch".into()));
    }
    let rest = body
        .strip_prefix(MAGIC)
        .ok_or_else(|| bad("not a checkpoint (bad magic line)".into()))?;
    let nl = rest
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| bad("unterminated metadata line".into()))?;
    let meta: Meta = serde_json::from_slice(&rest[..nl]).map_err(|e| bad(format!("metadata: {e}")))?;
    let payload = &rest[nl + 1..];
    let w = width(meta.precision);
    let expected: usize = meta.arrays.iter().map(|a| a.rows * a.cols * w).sum();
    if payload.len() != expected {
        return Err(bad(format!("payload holds {} bytes, metadata implies {expected}", payload.len())));
    }
    let rng_word_pos = meta
        .rng_word_pos
        .parse::<u128>()
        .map_err(|e| bad(format!("rng_word_pos: {e}")))?;
    let mut params = ModelParams::new();
    let mut chunks = payload.chunks_exact(w);
    for a in &meta.arrays {
        let data: Vec<f64> = chunks
            .by_ref()
            .take(a.rows * a.cols)
            .map(|c| match meta.precision {
                Precision::F64 => f64::from_le_bytes(c.try_into().expect("8-byte chunk")),
                Precision::F32 => f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64,
            })
            .collect();
        if params.id(&a.name).is_some() {
            return Err(bad(format!("duplicate array `{}`", a.name)));
        }
        params.insert(&a.name, a.group, Tensor::from_vec(a.rows, a.cols, data));
    }
    if !params.all_finite() {
        return Err(bad("non-finite parameter values".into()));
    }
    Ok(Checkpoint {
        params,
        model_config: meta.model_config,
        stage: meta.stage,
        train_config_hash: meta.train_config_hash,
        rng_seed: meta.rng_seed,
        rng_word_pos,
        step: meta.step,
        precision: meta.precision,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt);
    write_atomic(path, |w| w.write_all(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let ckpt = decode(&bytes, path)?;
    // shapes and groups must match what the stored config builds
    ckpt.model()?;
    Ok(ckpt)
}

/// Loads a checkpoint that must have been trained with exactly `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.model_for(expected)?;
    Ok(ckpt)
}
