//! Decoder-only toy language model: 2 layers, 2 heads, width 64,
//! feed-forward 256, learned positions, causal mask, tied output
//! projection. Pretrained on text, then frozen.

use rand::Rng;

use super::block::Layer;
use super::{checksum_tensors, freeze_tensors, BackboneError, D_L, MAX_SEQ};
use crate::tensor::{Scalar, Tape, Tensor};

pub struct FrozenLm<T: Scalar> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub ln_f_g: Tensor<T>,
    pub ln_f_b: Tensor<T>,
}

impl<T: Scalar> FrozenLm<T> {
    pub fn init(rng: &mut impl Rng, vocab: usize) -> FrozenLm<T> {
        let s = 0.05;
        let (ln_f_g, ln_f_b) = super::ln_params(D_L);
        FrozenLm {
            tok_emb: super::init_param(rng, vec![vocab, D_L], s),
            pos_emb: super::init_param(rng, vec![MAX_SEQ, D_L], s),
            layers: (0..super::LM_LAYERS)
                .map(|_| Layer::init(rng, D_L, super::LM_HEADS, 256))
                .collect(),
            ln_f_g,
            ln_f_b,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.shape()[0]
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("lm.tok_emb".to_string(), self.tok_emb.clone()),
            ("lm.pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("lm.layer{i}")));
        }
        out.push(("lm.ln_f_g".to_string(), self.ln_f_g.clone()));
        out.push(("lm.ln_f_b".to_string(), self.ln_f_b.clone()));
        out
    }

    pub fn checksum(&self) -> u64 {
        checksum_tensors(&self.named())
    }

    pub fn freeze(&self) {
        freeze_tensors(&self.named());
    }

    /// Token-embedding rows for `ids`.
    pub fn embed_tokens(&self, tape: &Tape<T>, ids: &[usize]) -> Result<Tensor<T>, BackboneError> {
        Ok(tape.embed(&self.tok_emb, ids)?)
    }

    /// Runs the causal transformer over a `[L, d_L]` embedding sequence.
    /// Returns last-layer hidden states `[L, d_L]` and next-token logits
    /// `[L, V]` through the tied output projection.
    pub fn forward(
        &self,
        tape: &Tape<T>,
        embeddings: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>), BackboneError> {
        let len = embeddings.shape()[0];
        if len == 0 || len > MAX_SEQ {
            return Err(BackboneError::BadLength {
                got: len,
                max: MAX_SEQ,
            });
        }
        let pos = tape.slice_rows(&self.pos_emb, 0, len)?;
        let mut x = tape.add(embeddings, &pos)?;
        for layer in &self.layers {
            x = layer.forward(tape, &x, true)?;
        }
        let hidden = tape.layer_norm(&x, &self.ln_f_g, &self.ln_f_b)?;
        let logits = tape.matmul_nt(&hidden, &self.tok_emb)?;
        Ok((hidden, logits))
    }

    pub fn cast<U: Scalar>(&self) -> FrozenLm<U> {
        let c = |t: &Tensor<T>| Tensor::<U>::from_f32(t.shape(), &t.to_f32_vec());
        FrozenLm {
            tok_emb: c(&self.tok_emb),
            pos_emb: c(&self.pos_emb),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            ln_f_g: c(&self.ln_f_g),
            ln_f_b: c(&self.ln_f_b),
        }
    }
}
