//! Frozen backbones: word-level tokenizer, a text-pretrained decoder-only
//! language model, and a contrastively pretrained visual/text encoder pair
//! sharing one embedding space. After pretraining every backbone is frozen
//! and checksummed; the plug-in layers are the only trainable surface left.

mod block;
pub mod encoders;
pub mod lm;
pub mod pretrain;
pub mod tokenizer;

pub use encoders::{FrozenTextEncoder, FrozenVisualEncoder};
pub use lm::FrozenLm;
pub use tokenizer::Tokenizer;

use thiserror::Error;

use crate::hash::Fnv1a;
use crate::tensor::{Scalar, Tensor};

/// Language-model width.
pub const D_L: usize = 64;
/// Language-model depth.
pub const LM_LAYERS: usize = 2;
/// Language-model attention heads per layer.
pub const LM_HEADS: usize = 2;
/// Text-encoder width; also the fine-grained feature width.
pub const D_T: usize = 32;
/// Visual feature width.
pub const D_V: usize = 32;
/// Hard context limit for both transformers.
pub const MAX_SEQ: usize = 64;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("token '{0}' not in vocabulary")]
    UnknownToken(String),
    #[error("token id {0} out of range (vocab {1})")]
    UnknownId(usize, usize),
    #[error("sequence length {got} outside 1..={max}")]
    BadLength { got: usize, max: usize },
    #[error("vocabulary file malformed: {0}")]
    BadVocabFile(String),
    #[error("lm perplexity {final_ppl:.2} did not reach {target:.2} within {epochs} epochs; curve: {curve:?}")]
    LmNotConverged {
        final_ppl: f64,
        target: f64,
        epochs: usize,
        curve: Vec<f64>,
    },
    #[error(
        "retrieval accuracy {acc:.4} below threshold {threshold:.4}; loss curve: {curve:?}"
    )]
    RetrievalBelowThreshold {
        acc: f64,
        threshold: f64,
        curve: Vec<f64>,
    },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Order-stable digest over the named tensors' f32 little-endian bytes.
pub fn checksum_tensors<T: Scalar>(tensors: &[(String, Tensor<T>)]) -> u64 {
    let mut h = Fnv1a::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for v in t.to_f32_vec() {
            h.update(&v.to_le_bytes());
        }
    }
    h.finish()
}

/// Drops every tensor out of the trainable set.
pub fn freeze_tensors<T: Scalar>(tensors: &[(String, Tensor<T>)]) {
    for (_, t) in tensors {
        t.set_requires_grad(false);
    }
}

/// Uniform init in [-scale, scale], trainable.
pub(crate) fn init_param<T: Scalar>(
    rng: &mut impl rand::Rng,
    shape: Vec<usize>,
    scale: f64,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| crate::tensor::lit::<T>(rng.gen_range(-scale..scale)))
        .collect();
    Tensor::param(shape, data)
}

/// All-ones / all-zeros affine pair for layer norm, trainable.
pub(crate) fn ln_params<T: Scalar>(width: usize) -> (Tensor<T>, Tensor<T>) {
    (
        Tensor::param(vec![width], vec![T::one(); width]),
        Tensor::param(vec![width], vec![T::zero(); width]),
    )
}
