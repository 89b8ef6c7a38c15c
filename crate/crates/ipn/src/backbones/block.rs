//! Shared pre-norm transformer layer used by both the decoder-only
//! language model (causal) and the bidirectional text encoder.

use rand::Rng;

use super::{init_param, ln_params};
use crate::tensor::{lit, Scalar, Tape, Tensor, TensorError};

/// One pre-LN block: x + attn(ln1(x)), then + ff(ln2(x)).
pub struct Layer<T: Scalar> {
    pub width: usize,
    pub heads: usize,
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn init(rng: &mut impl Rng, width: usize, heads: usize, ff: usize) -> Layer<T> {
        let s = 1.0 / (width as f64).sqrt();
        let (ln1_g, ln1_b) = ln_params(width);
        let (ln2_g, ln2_b) = ln_params(width);
        Layer {
            width,
            heads,
            ln1_g,
            ln1_b,
            wq: init_param(rng, vec![width, width], s),
            bq: Tensor::param(vec![width], vec![T::zero(); width]),
            wk: init_param(rng, vec![width, width], s),
            bk: Tensor::param(vec![width], vec![T::zero(); width]),
            wv: init_param(rng, vec![width, width], s),
            bv: Tensor::param(vec![width], vec![T::zero(); width]),
            wo: init_param(rng, vec![width, width], s),
            bo: Tensor::param(vec![width], vec![T::zero(); width]),
            ln2_g,
            ln2_b,
            w1: init_param(rng, vec![width, ff], s),
            b1: Tensor::param(vec![ff], vec![T::zero(); ff]),
            w2: init_param(rng, vec![ff, width], 1.0 / (ff as f64).sqrt()),
            b2: Tensor::param(vec![width], vec![T::zero(); width]),
        }
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let pairs: [(&str, &Tensor<T>); 16] = [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ];
        pairs
            .iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), (*t).clone()))
            .collect()
    }

    pub fn forward(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        causal: bool,
    ) -> Result<Tensor<T>, TensorError> {
        let d = self.width;
        let h = self.heads;
        let dh = d / h;
        let normed = tape.layer_norm(x, &self.ln1_g, &self.ln1_b)?;
        let q = tape.add(&tape.matmul(&normed, &self.wq)?, &self.bq)?;
        let k = tape.add(&tape.matmul(&normed, &self.wk)?, &self.bk)?;
        let v = tape.add(&tape.matmul(&normed, &self.wv)?, &self.bv)?;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let mut head_outs = Vec::with_capacity(h);
        for i in 0..h {
            let (lo, hi) = (i * dh, (i + 1) * dh);
            let qi = tape.slice_cols(&q, lo, hi)?;
            let ki = tape.slice_cols(&k, lo, hi)?;
            let vi = tape.slice_cols(&v, lo, hi)?;
            let mut scores = tape.scale(&tape.matmul_nt(&qi, &ki)?, scale);
            if causal {
                scores = tape.causal_mask(&scores)?;
            }
            let probs = tape.softmax(&scores);
            head_outs.push(tape.matmul(&probs, &vi)?);
        }
        let refs: Vec<&Tensor<T>> = head_outs.iter().collect();
        let merged = tape.concat_cols(&refs)?;
        let attn = tape.add(&tape.matmul(&merged, &self.wo)?, &self.bo)?;
        let x = tape.add(x, &attn)?;

        let normed = tape.layer_norm(&x, &self.ln2_g, &self.ln2_b)?;
        let hidden = tape.gelu(&tape.add(&tape.matmul(&normed, &self.w1)?, &self.b1)?);
        let ff = tape.add(&tape.matmul(&hidden, &self.w2)?, &self.b2)?;
        tape.add(&x, &ff)
    }

    /// Rebuilds the layer in another scalar type via the canonical f32
    /// weight bytes.
    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        let c = |t: &Tensor<T>| Tensor::<U>::from_f32(t.shape(), &t.to_f32_vec());
        Layer {
            width: self.width,
            heads: self.heads,
            ln1_g: c(&self.ln1_g),
            ln1_b: c(&self.ln1_b),
            wq: c(&self.wq),
            bq: c(&self.bq),
            wk: c(&self.wk),
            bk: c(&self.bk),
            wv: c(&self.wv),
            bv: c(&self.bv),
            wo: c(&self.wo),
            bo: c(&self.bo),
            ln2_g: c(&self.ln2_g),
            ln2_b: c(&self.ln2_b),
            w1: c(&self.w1),
            b1: c(&self.b1),
            w2: c(&self.w2),
            b2: c(&self.b2),
        }
    }
}
