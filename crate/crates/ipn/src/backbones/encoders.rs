//! Contrastively pretrained visual and text encoders sharing one
//! 32-dimensional embedding space, frozen after pretraining.

use rand::Rng;

use super::block::Layer;
use super::tokenizer::SEP;
use super::{checksum_tensors, freeze_tensors, BackboneError, D_T, D_V, MAX_SEQ};
use crate::data::Scene;
use crate::tensor::{lit, Scalar, Tape, Tensor};

/// Symbolic image encoder: one 16-wide table per attribute, object features
/// concatenated to 64, sum-pooled over objects, then affine + tanh to d_v.
pub struct FrozenVisualEncoder<T: Scalar> {
    pub shape_emb: Tensor<T>,
    pub color_emb: Tensor<T>,
    pub row_emb: Tensor<T>,
    pub col_emb: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
}

impl<T: Scalar> FrozenVisualEncoder<T> {
    pub fn init(rng: &mut impl Rng) -> FrozenVisualEncoder<T> {
        let s = 0.05;
        FrozenVisualEncoder {
            shape_emb: super::init_param(rng, vec![3, 16], s),
            color_emb: super::init_param(rng, vec![4, 16], s),
            row_emb: super::init_param(rng, vec![4, 16], s),
            col_emb: super::init_param(rng, vec![4, 16], s),
            proj_w: super::init_param(rng, vec![64, D_V], s),
            proj_b: Tensor::param(vec![D_V], vec![T::zero(); D_V]),
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("vis.shape_emb".to_string(), self.shape_emb.clone()),
            ("vis.color_emb".to_string(), self.color_emb.clone()),
            ("vis.row_emb".to_string(), self.row_emb.clone()),
            ("vis.col_emb".to_string(), self.col_emb.clone()),
            ("vis.proj_w".to_string(), self.proj_w.clone()),
            ("vis.proj_b".to_string(), self.proj_b.clone()),
        ]
    }

    pub fn checksum(&self) -> u64 {
        checksum_tensors(&self.named())
    }

    pub fn freeze(&self) {
        freeze_tensors(&self.named());
    }

    /// Global image feature h_I, `[1, d_v]`, deterministic per scene.
    pub fn encode_image(&self, tape: &Tape<T>, scene: &Scene) -> Result<Tensor<T>, BackboneError> {
        let mut rows = Vec::with_capacity(scene.objects.len());
        for o in &scene.objects {
            let s = tape.embed(&self.shape_emb, &[o.shape as usize])?;
            let c = tape.embed(&self.color_emb, &[o.color as usize])?;
            let r = tape.embed(&self.row_emb, &[o.row as usize])?;
            let l = tape.embed(&self.col_emb, &[o.col as usize])?;
            rows.push(tape.concat_cols(&[&s, &c, &r, &l])?);
        }
        let refs: Vec<&Tensor<T>> = rows.iter().collect();
        let stacked = tape.concat_rows(&refs)?;
        // sum pool = mean * count
        let pooled = tape.scale(&tape.mean_rows(&stacked), lit::<T>(rows.len() as f64));
        let affine = tape.add(&tape.matmul(&pooled, &self.proj_w)?, &self.proj_b)?;
        Ok(tape.tanh(&affine))
    }

    pub fn cast<U: Scalar>(&self) -> FrozenVisualEncoder<U> {
        let c = |t: &Tensor<T>| Tensor::<U>::from_f32(t.shape(), &t.to_f32_vec());
        FrozenVisualEncoder {
            shape_emb: c(&self.shape_emb),
            color_emb: c(&self.color_emb),
            row_emb: c(&self.row_emb),
            col_emb: c(&self.col_emb),
            proj_w: c(&self.proj_w),
            proj_b: c(&self.proj_b),
        }
    }
}

/// Bidirectional text-side encoder: 2 layers, 2 heads, width 32,
/// feed-forward 128, no causal mask. Owns the [SEP] embedding row used to
/// seed the interaction's global slot.
pub struct FrozenTextEncoder<T: Scalar> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<Layer<T>>,
    pub ln_f_g: Tensor<T>,
    pub ln_f_b: Tensor<T>,
}

impl<T: Scalar> FrozenTextEncoder<T> {
    pub fn init(rng: &mut impl Rng, vocab: usize) -> FrozenTextEncoder<T> {
        let s = 0.05;
        let (ln_f_g, ln_f_b) = super::ln_params(D_T);
        FrozenTextEncoder {
            tok_emb: super::init_param(rng, vec![vocab, D_T], s),
            pos_emb: super::init_param(rng, vec![MAX_SEQ, D_T], s),
            layers: (0..2).map(|_| Layer::init(rng, D_T, 2, 128)).collect(),
            ln_f_g,
            ln_f_b,
        }
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![
            ("txt.tok_emb".to_string(), self.tok_emb.clone()),
            ("txt.pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("txt.layer{i}")));
        }
        out.push(("txt.ln_f_g".to_string(), self.ln_f_g.clone()));
        out.push(("txt.ln_f_b".to_string(), self.ln_f_b.clone()));
        out
    }

    pub fn checksum(&self) -> u64 {
        checksum_tensors(&self.named())
    }

    pub fn freeze(&self) {
        freeze_tensors(&self.named());
    }

    /// The frozen [SEP] row, `[1, d_t]`.
    pub fn sep_embedding(&self, tape: &Tape<T>) -> Result<Tensor<T>, BackboneError> {
        Ok(tape.embed(&self.tok_emb, &[SEP])?)
    }

    /// Position-wise outputs over a `[L, d_t]` vector sequence;
    /// bidirectional. `use_positions = false` exists for the permutation
    /// symmetry check only.
    pub fn forward_vectors(
        &self,
        tape: &Tape<T>,
        seq: &Tensor<T>,
        use_positions: bool,
    ) -> Result<Tensor<T>, BackboneError> {
        let len = seq.shape()[0];
        if len == 0 || len > MAX_SEQ {
            return Err(BackboneError::BadLength {
                got: len,
                max: MAX_SEQ,
            });
        }
        let mut x = if use_positions {
            let pos = tape.slice_rows(&self.pos_emb, 0, len)?;
            tape.add(seq, &pos)?
        } else {
            seq.clone()
        };
        for layer in &self.layers {
            x = layer.forward(tape, &x, false)?;
        }
        Ok(tape.layer_norm(&x, &self.ln_f_g, &self.ln_f_b)?)
    }

    /// Mean-pooled caption encoding, `[1, d_t]`, used during contrastive
    /// pretraining and retrieval evaluation.
    pub fn encode_text(&self, tape: &Tape<T>, ids: &[usize]) -> Result<Tensor<T>, BackboneError> {
        let emb = tape.embed(&self.tok_emb, ids)?;
        let out = self.forward_vectors(tape, &emb, true)?;
        Ok(tape.mean_rows(&out))
    }

    pub fn cast<U: Scalar>(&self) -> FrozenTextEncoder<U> {
        let c = |t: &Tensor<T>| Tensor::<U>::from_f32(t.shape(), &t.to_f32_vec());
        FrozenTextEncoder {
            tok_emb: c(&self.tok_emb),
            pos_emb: c(&self.pos_emb),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            ln_f_g: c(&self.ln_f_g),
            ln_f_b: c(&self.ln_f_b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_scenes;
    use crate::rng::substream;

    #[test]
    fn encode_image_is_deterministic_width_32() {
        let enc = FrozenVisualEncoder::<f32>::init(&mut substream(1, "vis-test"));
        let scenes = gen_scenes(3, 4);
        let tape = Tape::no_grad();
        let a = enc.encode_image(&tape, &scenes[0]).unwrap();
        let b = enc.encode_image(&tape, &scenes[0]).unwrap();
        assert_eq!(a.shape(), vec![1, D_V]);
        assert_eq!(a.to_vec(), b.to_vec());
        assert!(a.norm().is_finite());
    }

    #[test]
    fn distinct_scenes_map_to_distinct_features() {
        let enc = FrozenVisualEncoder::<f32>::init(&mut substream(1, "vis-test"));
        let scenes = gen_scenes(5, 200);
        let tape = Tape::no_grad();
        let feats: Vec<Vec<f32>> = scenes
            .iter()
            .map(|s| enc.encode_image(&tape, s).unwrap().to_vec())
            .collect();
        for i in 0..feats.len() {
            for j in (i + 1)..feats.len() {
                assert_ne!(feats[i], feats[j], "scenes {i} and {j} collided");
            }
        }
    }

    #[test]
    fn text_encoder_is_bidirectional_and_width_32() {
        let enc = FrozenTextEncoder::<f32>::init(&mut substream(1, "txt-test"), 20);
        let tape = Tape::no_grad();
        let seq = tape.embed(&enc.tok_emb, &[7, 8, 9]).unwrap();
        let out = enc.forward_vectors(&tape, &seq, true).unwrap();
        assert_eq!(out.shape(), vec![3, D_T]);
        // perturbing the LAST input changes the FIRST output: not causal
        let seq2 = tape.embed(&enc.tok_emb, &[7, 8, 10]).unwrap();
        let out2 = enc.forward_vectors(&tape, &seq2, true).unwrap();
        assert_ne!(out.to_vec()[..D_T], out2.to_vec()[..D_T]);
    }

    #[test]
    fn permuting_inputs_permutes_outputs_without_positions() {
        let enc = FrozenTextEncoder::<f32>::init(&mut substream(1, "txt-test"), 20);
        let tape = Tape::no_grad();
        let fwd = enc
            .forward_vectors(&tape, &tape.embed(&enc.tok_emb, &[7, 8, 9]).unwrap(), false)
            .unwrap()
            .to_vec();
        let rev = enc
            .forward_vectors(&tape, &tape.embed(&enc.tok_emb, &[9, 8, 7]).unwrap(), false)
            .unwrap()
            .to_vec();
        for (i, j) in [(0usize, 2usize), (1, 1), (2, 0)] {
            for d in 0..D_T {
                assert!((fwd[i * D_T + d] - rev[j * D_T + d]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn single_position_input_is_valid() {
        let enc = FrozenTextEncoder::<f32>::init(&mut substream(1, "txt-test"), 20);
        let tape = Tape::no_grad();
        let sep = enc.sep_embedding(&tape).unwrap();
        let out = enc.forward_vectors(&tape, &sep, true).unwrap();
        assert_eq!(out.shape(), vec![1, D_T]);
    }
}
