//! Saving and loading a whole model bundle: the vocabulary as a plain text
//! file next to a binary weight checkpoint covering the three frozen
//! backbones and the plug-in parameters.
//!
//! Loading is lenient about plug-in tensors only: a phase-1 checkpoint
//! lacking the phase-2 groups loads fine, with the absent groups staying at
//! their seeded initialization. Backbone tensors are always required.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backbones::tokenizer::Tokenizer;
use crate::backbones::{BackboneError, FrozenLm, FrozenTextEncoder, FrozenVisualEncoder};
use crate::hash::fnv1a;
use crate::model::{IpnParams, ModelBundle};
use crate::rng::substream;
use crate::tensor::Tensor;
use crate::train::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const WEIGHTS_FILE: &str = "weights.ipnb";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("checkpoint was written for a different vocabulary")]
    VocabMismatch,
    #[error("tensor '{name}' has shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
}

/// Digest binding a weight file to the vocabulary it was trained with.
pub fn vocab_digest(tokenizer: &Tokenizer) -> u64 {
    let mut buf = Vec::new();
    for id in 0..tokenizer.vocab_size() {
        buf.extend_from_slice(tokenizer.detokenize(&[id]).unwrap_or_default().as_bytes());
        buf.push(b'\n');
    }
    fnv1a(&buf)
}

/// Every tensor in the bundle under its canonical name.
pub fn all_named(bundle: &ModelBundle<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut out = bundle.lm.named();
    out.extend(bundle.visual.named());
    out.extend(bundle.text.named());
    out.extend(bundle.ipn.named());
    out
}

/// Fresh bundle with every component drawn from per-component substreams of
/// `seed`; nothing is frozen yet.
pub fn init_bundle(seed: u64, tokenizer: Tokenizer) -> ModelBundle<f32> {
    let v = tokenizer.vocab_size();
    ModelBundle {
        lm: FrozenLm::init(&mut substream(seed, "init-lm"), v),
        visual: FrozenVisualEncoder::init(&mut substream(seed, "init-visual")),
        text: FrozenTextEncoder::init(&mut substream(seed, "init-text"), v),
        ipn: IpnParams::init(&mut substream(seed, "init-ipn")),
        tokenizer,
    }
}

/// Writes `vocab.txt` and `weights.ipnb` under `dir`. `tensors` selects
/// what goes into the weight file (e.g. everything, or backbones plus only
/// the phase-1 groups).
pub fn save_bundle_with(
    dir: &Path,
    bundle: &ModelBundle<f32>,
    tensors: &[(String, Tensor<f32>)],
) -> Result<(), BundleError> {
    std::fs::create_dir_all(dir)?;
    bundle.tokenizer.save(&dir.join(VOCAB_FILE))?;
    save_checkpoint(
        &dir.join(WEIGHTS_FILE),
        vocab_digest(&bundle.tokenizer),
        tensors,
    )?;
    Ok(())
}

/// Writes the complete bundle.
pub fn save_bundle(dir: &Path, bundle: &ModelBundle<f32>) -> Result<(), BundleError> {
    save_bundle_with(dir, bundle, &all_named(bundle))
}

/// What `load_bundle` found: plug-in tensors absent from the file keep
/// their seeded initialization.
#[derive(Debug)]
pub struct LoadReport {
    pub seeded_ipn_tensors: Vec<String>,
    pub frozen_checksums: [u64; 3],
}

/// Reads a bundle back: vocabulary, then weights applied over a seeded
/// initialization. Backbone tensors must all be present; missing plug-in
/// tensors are reported, not fatal. Backbones come back frozen.
pub fn load_bundle(dir: &Path, seed: u64) -> Result<(ModelBundle<f32>, LoadReport), BundleError> {
    let vocab_path = dir.join(VOCAB_FILE);
    let weights_path = dir.join(WEIGHTS_FILE);
    for p in [&vocab_path, &weights_path] {
        if !p.exists() {
            return Err(BundleError::MissingFile(p.clone()));
        }
    }
    let tokenizer = Tokenizer::load(&vocab_path)?;
    let (meta, stored) = load_checkpoint(&weights_path)?;
    if meta != vocab_digest(&tokenizer) {
        return Err(BundleError::VocabMismatch);
    }
    let bundle = init_bundle(seed, tokenizer);
    let mut seeded = Vec::new();
    for (name, t) in all_named(&bundle) {
        match stored.iter().find(|(n, _, _)| *n == name) {
            Some((_, shape, data)) => {
                if *shape != t.shape() {
                    return Err(BundleError::ShapeMismatch {
                        name,
                        got: shape.clone(),
                        want: t.shape(),
                    });
                }
                t.set_data(data.clone());
            }
            None if name.starts_with("ipn.") => seeded.push(name),
            None => return Err(CheckpointError::MissingTensor(name).into()),
        }
    }
    bundle.lm.freeze();
    bundle.visual.freeze();
    bundle.text.freeze();
    let report = LoadReport {
        seeded_ipn_tensors: seeded,
        frozen_checksums: bundle.frozen_checksums(),
    };
    Ok((bundle, report))
}
