//! The interactive perception plug-in: four learnable linear layers plus
//! the <img>/<img-d> token embeddings, and the two-pass protocol that lets
//! the frozen language model request query-specific visual information.
//!
//! Pass one runs the LM over `[h_img] ++ query ++ [E_imgd]` and reads the
//! request off the final position. The request interacts with five
//! fine-grained image features inside the frozen text encoder; the result
//! is projected back and takes the final prefix slot of pass two.

use rand::Rng;

use crate::backbones::tokenizer::Tokenizer;
use crate::backbones::{
    checksum_tensors, BackboneError, FrozenLm, FrozenTextEncoder, FrozenVisualEncoder, D_L, D_T,
    D_V, MAX_SEQ,
};
use crate::data::Scene;
use crate::tensor::{Scalar, Tape, Tensor};

/// Number of fine-grained image features entering the interaction.
pub const N_FINE: usize = 5;

/// The six trainable parameter groups (weights with their biases, plus the
/// two special-token embeddings). Nothing else in the system trains.
pub struct IpnParams<T: Scalar> {
    pub w_align: Tensor<T>,
    pub b_align: Tensor<T>,
    pub w_req: Tensor<T>,
    pub b_req: Tensor<T>,
    pub w_decomp: Tensor<T>,
    pub b_decomp: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
    pub e_img: Tensor<T>,
    pub e_imgd: Tensor<T>,
}

/// Group name → member tensor names, used for freeze audits and gradcheck.
pub const GROUPS: [(&str, &[&str]); 6] = [
    ("align", &["ipn.w_align", "ipn.b_align"]),
    ("request", &["ipn.w_req", "ipn.b_req"]),
    ("decompose", &["ipn.w_decomp", "ipn.b_decomp"]),
    ("transmit", &["ipn.w_out", "ipn.b_out"]),
    ("img", &["ipn.e_img"]),
    ("img_d", &["ipn.e_imgd"]),
];

impl<T: Scalar> IpnParams<T> {
    pub fn init(rng: &mut impl Rng) -> IpnParams<T> {
        let s = 0.05;
        IpnParams {
            w_align: crate::backbones::init_param(rng, vec![D_V, D_L], s),
            b_align: Tensor::param(vec![D_L], vec![T::zero(); D_L]),
            w_req: crate::backbones::init_param(rng, vec![D_L, D_T], s),
            b_req: Tensor::param(vec![D_T], vec![T::zero(); D_T]),
            w_decomp: crate::backbones::init_param(rng, vec![D_V, N_FINE * D_T], s),
            b_decomp: Tensor::param(vec![N_FINE * D_T], vec![T::zero(); N_FINE * D_T]),
            w_out: crate::backbones::init_param(rng, vec![D_T, D_L], s),
            b_out: Tensor::param(vec![D_L], vec![T::zero(); D_L]),
            e_img: crate::backbones::init_param(rng, vec![1, D_L], s),
            e_imgd: crate::backbones::init_param(rng, vec![1, D_L], s),
        }
    }

    /// Re-initializes the bias of every projection feeding a frozen
    /// transformer at that transformer's mean content-word embedding, for
    /// the given word ids — the vocabulary the projected vectors stand in
    /// for. A near-zero start puts those vectors outside anything the
    /// frozen attention reacts to, and the loss then has no usable
    /// gradient through them: the transmission (into the language model),
    /// and the request plus the five fine-grained features (into the text
    /// encoder).
    pub fn center_projections(
        &self,
        lm: &FrozenLm<T>,
        text: &FrozenTextEncoder<T>,
        word_ids: &[usize],
        h_i_norm: f64,
    ) {
        assert!(!word_ids.is_empty(), "need at least one content word");
        let rows = |emb: &Tensor<T>, width: usize| -> (Vec<f32>, f32) {
            let data = emb.to_f32_vec();
            let mut mean = vec![0.0f32; width];
            let mut norm = 0.0f32;
            for &row in word_ids {
                let r = &data[row * width..(row + 1) * width];
                for (m, v) in mean.iter_mut().zip(r) {
                    *m += v;
                }
                norm += r.iter().map(|v| v * v).sum::<f32>().sqrt();
            }
            let n = word_ids.len() as f32;
            for m in mean.iter_mut() {
                *m /= n;
            }
            (mean, norm / n)
        };
        let lit = |v: &[f32]| {
            v.iter()
                .map(|&x| crate::tensor::lit::<T>(x as f64))
                .collect::<Vec<T>>()
        };
        let (lm_mean, lm_norm) = rows(&lm.tok_emb, D_L);
        let (txt_mean, txt_norm) = rows(&text.tok_emb, D_T);
        self.b_out.set_data(lit(&lm_mean));
        self.b_req.set_data(lit(&txt_mean));
        self.b_decomp.set_data(lit(&txt_mean.repeat(N_FINE)));
        // rescale each projection so its output variation matches the
        // target embedding norm, given the known input norms: the request
        // and interaction outputs are layer-normed (norm ~ sqrt(width)),
        // the raw image feature's norm is measured by the caller
        let rescale = |w: &Tensor<T>, in_norm: f64, out_dim: usize, target: f64| {
            let sigma = target / (in_norm * (out_dim as f64).sqrt());
            // existing entries are uniform in [-0.05, 0.05]
            let factor = sigma / (0.05 / 3f64.sqrt());
            let data = w
                .to_f32_vec()
                .into_iter()
                .map(|v| crate::tensor::lit::<T>(v as f64 * factor))
                .collect();
            w.set_data(data);
        };
        rescale(&self.w_out, (D_T as f64).sqrt(), D_L, lm_norm as f64);
        rescale(&self.w_req, (D_L as f64).sqrt(), D_T, txt_norm as f64);
        rescale(
            &self.w_decomp,
            h_i_norm,
            N_FINE * D_T,
            (N_FINE as f64).sqrt() * txt_norm as f64,
        );
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("ipn.w_align".to_string(), self.w_align.clone()),
            ("ipn.b_align".to_string(), self.b_align.clone()),
            ("ipn.w_req".to_string(), self.w_req.clone()),
            ("ipn.b_req".to_string(), self.b_req.clone()),
            ("ipn.w_decomp".to_string(), self.w_decomp.clone()),
            ("ipn.b_decomp".to_string(), self.b_decomp.clone()),
            ("ipn.w_out".to_string(), self.w_out.clone()),
            ("ipn.b_out".to_string(), self.b_out.clone()),
            ("ipn.e_img".to_string(), self.e_img.clone()),
            ("ipn.e_imgd".to_string(), self.e_imgd.clone()),
        ]
    }

    /// Phase-1 trainable set: feature alignment and the <img> embedding.
    pub fn phase1_trainable(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("ipn.w_align".to_string(), self.w_align.clone()),
            ("ipn.b_align".to_string(), self.b_align.clone()),
            ("ipn.e_img".to_string(), self.e_img.clone()),
        ]
    }

    /// Phase-2 trainable set: request, decomposition, transmission and the
    /// <img-d> embedding; the phase-1 set stays frozen.
    pub fn phase2_trainable(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("ipn.w_req".to_string(), self.w_req.clone()),
            ("ipn.b_req".to_string(), self.b_req.clone()),
            ("ipn.w_decomp".to_string(), self.w_decomp.clone()),
            ("ipn.b_decomp".to_string(), self.b_decomp.clone()),
            ("ipn.w_out".to_string(), self.w_out.clone()),
            ("ipn.b_out".to_string(), self.b_out.clone()),
            ("ipn.e_imgd".to_string(), self.e_imgd.clone()),
        ]
    }

    /// Marks exactly the given phase's set trainable, everything else not.
    pub fn set_phase(&self, phase: u8) {
        let trainable: Vec<String> = match phase {
            1 => self.phase1_trainable(),
            2 => self.phase2_trainable(),
            _ => panic!("phase must be 1 or 2"),
        }
        .into_iter()
        .map(|(n, _)| n)
        .collect();
        for (name, t) in self.named() {
            t.set_requires_grad(trainable.contains(&name));
        }
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn checksum(&self) -> u64 {
        checksum_tensors(&self.named())
    }

    pub fn cast<U: Scalar>(&self) -> IpnParams<U> {
        let c = |t: &Tensor<T>| Tensor::<U>::from_f32(t.shape(), &t.to_f32_vec());
        IpnParams {
            w_align: c(&self.w_align),
            b_align: c(&self.b_align),
            w_req: c(&self.w_req),
            b_req: c(&self.b_req),
            w_decomp: c(&self.w_decomp),
            b_decomp: c(&self.b_decomp),
            w_out: c(&self.w_out),
            b_out: c(&self.b_out),
            e_img: c(&self.e_img),
            e_imgd: c(&self.e_imgd),
        }
    }
}

/// Everything a forward pass needs: frozen backbones, plug-in parameters,
/// and the vocabulary.
pub struct ModelBundle<T: Scalar> {
    pub tokenizer: Tokenizer,
    pub lm: FrozenLm<T>,
    pub visual: FrozenVisualEncoder<T>,
    pub text: FrozenTextEncoder<T>,
    pub ipn: IpnParams<T>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn cast<U: Scalar>(&self) -> ModelBundle<U> {
        ModelBundle {
            tokenizer: self.tokenizer.clone(),
            lm: self.lm.cast(),
            visual: self.visual.cast(),
            text: self.text.cast(),
            ipn: self.ipn.cast(),
        }
    }

    /// Checksums of the three frozen backbones, in a fixed order.
    pub fn frozen_checksums(&self) -> [u64; 3] {
        [
            self.lm.checksum(),
            self.visual.checksum(),
            self.text.checksum(),
        ]
    }
}

/// Intermediates of one interaction, kept for tracing and tests.
pub struct Interaction<T: Scalar> {
    pub h_r: Tensor<T>,
    pub h_req: Tensor<T>,
    pub h_fine: Tensor<T>,
    pub h_g_out: Tensor<T>,
    pub h_d: Tensor<T>,
}

/// Output of the full protocol: decode prefix, its LM states, and (in ipn
/// mode) the interaction intermediates.
pub struct IpnForward<T: Scalar> {
    pub prefix: Tensor<T>,
    pub hidden: Tensor<T>,
    pub logits: Tensor<T>,
    pub interaction: Option<Interaction<T>>,
    pub truncated: usize,
}

/// h_img = (W_align · h_I + b) + E_img.
pub fn feature_align<T: Scalar>(
    tape: &Tape<T>,
    ipn: &IpnParams<T>,
    h_i: &Tensor<T>,
) -> Result<Tensor<T>, BackboneError> {
    let aligned = tape.add(&tape.matmul(h_i, &ipn.w_align)?, &ipn.b_align)?;
    Ok(tape.add(&aligned, &ipn.e_img)?)
}

/// Query tokens left-truncated so the two specials always fit the context.
fn fit_query(query_ids: &[usize]) -> (&[usize], usize) {
    let max_query = MAX_SEQ - 2;
    if query_ids.len() > max_query {
        let cut = query_ids.len() - max_query;
        (&query_ids[cut..], cut)
    } else {
        (query_ids, 0)
    }
}

/// First-pass prefix `[h_img] ++ tok_emb(X) ++ [E_imgd]`, length M+2.
pub fn build_first_pass<T: Scalar>(
    tape: &Tape<T>,
    lm: &FrozenLm<T>,
    ipn: &IpnParams<T>,
    h_img: &Tensor<T>,
    query_ids: &[usize],
) -> Result<(Tensor<T>, usize), BackboneError> {
    if query_ids.is_empty() {
        return Err(BackboneError::BadLength {
            got: 0,
            max: MAX_SEQ - 2,
        });
    }
    let (ids, truncated) = fit_query(query_ids);
    let toks = lm.embed_tokens(tape, ids)?;
    let seq = tape.concat_rows(&[h_img, &toks, &ipn.e_imgd])?;
    Ok((seq, truncated))
}

/// Second-pass prefix `[h_img] ++ tok_emb(X) ++ [h_d]`; same length as the
/// first pass.
pub fn build_second_pass<T: Scalar>(
    tape: &Tape<T>,
    lm: &FrozenLm<T>,
    h_img: &Tensor<T>,
    query_ids: &[usize],
    h_d: &Tensor<T>,
) -> Result<(Tensor<T>, usize), BackboneError> {
    if query_ids.is_empty() {
        return Err(BackboneError::BadLength {
            got: 0,
            max: MAX_SEQ - 2,
        });
    }
    let (ids, truncated) = fit_query(query_ids);
    let toks = lm.embed_tokens(tape, ids)?;
    let seq = tape.concat_rows(&[h_img, &toks, h_d])?;
    Ok((seq, truncated))
}

/// h_r: last-layer hidden state at the final (<img-d>) position.
pub fn extract_request<T: Scalar>(
    tape: &Tape<T>,
    hidden: &Tensor<T>,
) -> Result<Tensor<T>, BackboneError> {
    let rows = hidden.shape()[0];
    Ok(tape.slice_rows(hidden, rows - 1, rows)?)
}

/// h_R = W_req · h_r + b_req, the request entering the shared space.
pub fn project_request<T: Scalar>(
    tape: &Tape<T>,
    ipn: &IpnParams<T>,
    h_r: &Tensor<T>,
) -> Result<Tensor<T>, BackboneError> {
    Ok(tape.add(&tape.matmul(h_r, &ipn.w_req)?, &ipn.b_req)?)
}

/// Five fine-grained features from the global image feature, `[5, d_t]`.
pub fn decompose_image<T: Scalar>(
    tape: &Tape<T>,
    ipn: &IpnParams<T>,
    h_i: &Tensor<T>,
) -> Result<Tensor<T>, BackboneError> {
    let flat = tape.add(&tape.matmul(h_i, &ipn.w_decomp)?, &ipn.b_decomp)?;
    let mut slices = Vec::with_capacity(N_FINE);
    for i in 0..N_FINE {
        slices.push(tape.slice_cols(&flat, i * D_T, (i + 1) * D_T)?);
    }
    let refs: Vec<&Tensor<T>> = slices.iter().collect();
    Ok(tape.concat_rows(&refs)?)
}

/// Runs the frozen text encoder over `[f1..f5, h_R, sep]` (length exactly
/// 7) and returns the output at the global slot.
pub fn interact<T: Scalar>(
    tape: &Tape<T>,
    text: &FrozenTextEncoder<T>,
    h_fine: &Tensor<T>,
    h_req: &Tensor<T>,
) -> Result<Tensor<T>, BackboneError> {
    let sep = text.sep_embedding(tape)?;
    let seq = tape.concat_rows(&[h_fine, h_req, &sep])?;
    debug_assert_eq!(seq.shape()[0], N_FINE + 2);
    let out = text.forward_vectors(tape, &seq, true)?;
    Ok(tape.slice_rows(&out, N_FINE + 1, N_FINE + 2)?)
}

/// h_d = W_out · h_g_out + b_out, back in the LM's embedding space.
pub fn transmit<T: Scalar>(
    tape: &Tape<T>,
    ipn: &IpnParams<T>,
    h_g_out: &Tensor<T>,
) -> Result<Tensor<T>, BackboneError> {
    Ok(tape.add(&tape.matmul(h_g_out, &ipn.w_out)?, &ipn.b_out)?)
}

/// Full protocol. `interactive = false` is the static-information ablation:
/// decoding happens straight off the first-pass prefix.
pub fn ipn_forward<T: Scalar>(
    tape: &Tape<T>,
    bundle: &ModelBundle<T>,
    scene: &Scene,
    query_ids: &[usize],
    interactive: bool,
) -> Result<IpnForward<T>, BackboneError> {
    let h_i = bundle.visual.encode_image(tape, scene)?;
    let h_img = feature_align(tape, &bundle.ipn, &h_i)?;
    let (first, truncated) = build_first_pass(tape, &bundle.lm, &bundle.ipn, &h_img, query_ids)?;
    let (hidden1, logits1) = bundle.lm.forward(tape, &first)?;
    if !interactive {
        return Ok(IpnForward {
            prefix: first,
            hidden: hidden1,
            logits: logits1,
            interaction: None,
            truncated,
        });
    }
    let h_r = extract_request(tape, &hidden1)?;
    let h_req = project_request(tape, &bundle.ipn, &h_r)?;
    let h_fine = decompose_image(tape, &bundle.ipn, &h_i)?;
    let h_g_out = interact(tape, &bundle.text, &h_fine, &h_req)?;
    let h_d = transmit(tape, &bundle.ipn, &h_g_out)?;
    let (second, _) = build_second_pass(tape, &bundle.lm, &h_img, query_ids, &h_d)?;
    let (hidden2, logits2) = bundle.lm.forward(tape, &second)?;
    Ok(IpnForward {
        prefix: second,
        hidden: hidden2,
        logits: logits2,
        interaction: Some(Interaction {
            h_r,
            h_req,
            h_fine,
            h_g_out,
            h_d,
        }),
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_scenes;
    use crate::rng::substream;
    use crate::tensor::TensorError;

    fn toy_bundle() -> ModelBundle<f32> {
        let scenes = gen_scenes(21, 40);
        let texts: Vec<String> = scenes.iter().map(crate::data::render_caption).collect();
        let tokenizer = Tokenizer::build(&texts);
        let mut rng = substream(21, "bundle-test");
        ModelBundle {
            lm: FrozenLm::init(&mut rng, tokenizer.vocab_size()),
            visual: FrozenVisualEncoder::init(&mut rng),
            text: FrozenTextEncoder::init(&mut rng, tokenizer.vocab_size()),
            ipn: IpnParams::init(&mut rng),
            tokenizer,
        }
    }

    #[test]
    fn protocol_shapes() {
        let bundle = toy_bundle();
        let scenes = gen_scenes(21, 3);
        let tape = Tape::no_grad();
        let query = bundle.tokenizer.tokenize("a red circle and").unwrap();
        let fwd = ipn_forward(&tape, &bundle, &scenes[0], &query, true).unwrap();
        let inter = fwd.interaction.as_ref().unwrap();
        assert_eq!(fwd.prefix.shape(), vec![query.len() + 2, D_L]);
        assert_eq!(inter.h_r.shape(), vec![1, D_L]);
        assert_eq!(inter.h_req.shape(), vec![1, D_T]);
        assert_eq!(inter.h_fine.shape(), vec![N_FINE, D_T]);
        assert_eq!(inter.h_g_out.shape(), vec![1, D_T]);
        assert_eq!(inter.h_d.shape(), vec![1, D_L]);
        assert_eq!(fwd.truncated, 0);
        // static pass shares the prefix length
        let stat = ipn_forward(&tape, &bundle, &scenes[0], &query, false).unwrap();
        assert_eq!(stat.prefix.shape(), fwd.prefix.shape());
        assert!(stat.interaction.is_none());
    }

    #[test]
    fn substitution_identity_reproduces_first_pass_bit_exactly() {
        let bundle = toy_bundle();
        let scenes = gen_scenes(21, 1);
        let tape = Tape::no_grad();
        let query = bundle.tokenizer.tokenize("a red circle").unwrap();
        let h_i = bundle.visual.encode_image(&tape, &scenes[0]).unwrap();
        let h_img = feature_align(&tape, &bundle.ipn, &h_i).unwrap();
        let (first, _) =
            build_first_pass(&tape, &bundle.lm, &bundle.ipn, &h_img, &query).unwrap();
        let (_, logits1) = bundle.lm.forward(&tape, &first).unwrap();
        let (second, _) =
            build_second_pass(&tape, &bundle.lm, &h_img, &query, &bundle.ipn.e_imgd).unwrap();
        let (_, logits2) = bundle.lm.forward(&tape, &second).unwrap();
        let (a, b) = (logits1.to_vec(), logits2.to_vec());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn zero_alignment_yields_e_img() {
        let bundle = toy_bundle();
        bundle
            .ipn
            .w_align
            .set_data(vec![0.0; D_V * D_L]);
        bundle.ipn.b_align.set_data(vec![0.0; D_L]);
        let tape = Tape::no_grad();
        let scenes = gen_scenes(21, 1);
        let h_i = bundle.visual.encode_image(&tape, &scenes[0]).unwrap();
        let h_img = feature_align(&tape, &bundle.ipn, &h_i).unwrap();
        assert_eq!(h_img.to_vec(), bundle.ipn.e_img.to_vec());
    }

    #[test]
    fn centered_projections_match_embedding_statistics() {
        let bundle = toy_bundle();
        let word_ids = vec![6, 7, 8];
        bundle
            .ipn
            .center_projections(&bundle.lm, &bundle.text, &word_ids, 0.3);
        // each bias equals the mean of the selected embedding rows
        let lm_emb = bundle.lm.tok_emb.to_vec();
        let b_out = bundle.ipn.b_out.to_vec();
        for k in 0..D_L {
            let want: f32 =
                word_ids.iter().map(|&r| lm_emb[r * D_L + k]).sum::<f32>() / 3.0;
            assert!((b_out[k] - want).abs() < 1e-6);
        }
        let txt_emb = bundle.text.tok_emb.to_vec();
        let b_req = bundle.ipn.b_req.to_vec();
        let b_decomp = bundle.ipn.b_decomp.to_vec();
        for k in 0..D_T {
            let want: f32 =
                word_ids.iter().map(|&r| txt_emb[r * D_T + k]).sum::<f32>() / 3.0;
            assert!((b_req[k] - want).abs() < 1e-6);
            for i in 0..N_FINE {
                assert!((b_decomp[i * D_T + k] - want).abs() < 1e-6);
            }
        }
        // projected outputs land at the embedding scale: a layer-norm-sized
        // input through w_out has norm near the mean word-embedding norm
        let norm = |v: &[f32]| v.iter().map(|x| x * x).sum::<f32>().sqrt();
        let lm_norm: f32 = word_ids
            .iter()
            .map(|&r| norm(&lm_emb[r * D_L..(r + 1) * D_L]))
            .sum::<f32>()
            / 3.0;
        let tape = Tape::no_grad();
        let g = Tensor::new(vec![1, D_T], vec![1.0; D_T]); // norm sqrt(D_T)
        let out = tape.matmul(&g, &bundle.ipn.w_out).unwrap();
        let got = norm(&out.to_vec());
        assert!(
            got > 0.2 * lm_norm && got < 5.0 * lm_norm,
            "projected norm {got} far from embedding norm {lm_norm}"
        );
    }

    #[test]
    fn zero_decompose_and_transmit_yield_biases() {
        let bundle = toy_bundle();
        bundle.ipn.w_decomp.set_data(vec![0.0; D_V * N_FINE * D_T]);
        let tape = Tape::no_grad();
        let scenes = gen_scenes(21, 1);
        let h_i = bundle.visual.encode_image(&tape, &scenes[0]).unwrap();
        let fine = decompose_image(&tape, &bundle.ipn, &h_i).unwrap();
        let b = bundle.ipn.b_decomp.to_vec();
        for i in 0..N_FINE {
            assert_eq!(fine.to_vec()[i * D_T..(i + 1) * D_T], b[i * D_T..(i + 1) * D_T]);
        }
        bundle.ipn.w_out.set_data(vec![0.0; D_T * D_L]);
        let g = Tensor::new(vec![1, D_T], vec![1.0; D_T]);
        let h_d = transmit(&tape, &bundle.ipn, &g).unwrap();
        assert_eq!(h_d.to_vec(), bundle.ipn.b_out.to_vec());
    }

    #[test]
    fn distinct_queries_give_distinct_requests_and_h_d() {
        let bundle = toy_bundle();
        let scenes = gen_scenes(21, 1);
        let words: Vec<String> = bundle
            .tokenizer
            .tokenize("a red circle and blue square green triangle yellow")
            .unwrap()
            .iter()
            .map(|&id| bundle.tokenizer.detokenize(&[id]).unwrap())
            .collect();
        let tape = Tape::no_grad();
        let mut seen_r = Vec::new();
        let mut seen_d = Vec::new();
        for i in 0..words.len() {
            for j in 0..words.len() {
                let q = bundle
                    .tokenizer
                    .tokenize(&format!("{} {}", words[i], words[j]))
                    .unwrap();
                let fwd = ipn_forward(&tape, &bundle, &scenes[0], &q, true).unwrap();
                let inter = fwd.interaction.unwrap();
                seen_r.push(inter.h_req.to_vec());
                seen_d.push(inter.h_d.to_vec());
            }
        }
        for i in 0..seen_r.len() {
            for j in (i + 1)..seen_r.len() {
                assert_ne!(seen_r[i], seen_r[j], "request collapse at {i},{j}");
                assert_ne!(seen_d[i], seen_d[j], "h_d collapse at {i},{j}");
            }
        }
    }

    #[test]
    fn over_length_query_truncates_from_the_left() {
        let bundle = toy_bundle();
        let scenes = gen_scenes(21, 1);
        let tape = Tape::no_grad();
        let long: Vec<usize> = (0..80)
            .map(|i| 6 + (i % (bundle.tokenizer.vocab_size() - 6)))
            .collect();
        let fwd = ipn_forward(&tape, &bundle, &scenes[0], &long, true).unwrap();
        assert_eq!(fwd.prefix.shape()[0], MAX_SEQ);
        assert_eq!(fwd.truncated, 80 - (MAX_SEQ - 2));
        // empty query is a contract error
        assert!(ipn_forward(&tape, &bundle, &scenes[0], &[], true).is_err());
    }

    #[test]
    fn gradients_reach_w_req_through_frozen_backbones() {
        let bundle = toy_bundle();
        bundle.lm.freeze();
        bundle.visual.freeze();
        bundle.text.freeze();
        bundle.ipn.set_phase(2);
        let scenes = gen_scenes(21, 1);
        let tape = Tape::new();
        let query = bundle.tokenizer.tokenize("a red circle").unwrap();
        let fwd = ipn_forward(&tape, &bundle, &scenes[0], &query, true).unwrap();
        let rows = fwd.logits.shape()[0];
        let last = tape.slice_rows(&fwd.logits, rows - 1, rows).unwrap();
        let loss = tape.cross_entropy(&last, &[7]).unwrap();
        tape.backward(&loss).unwrap();
        let g = bundle.ipn.w_req.grad().expect("w_req should carry a gradient");
        assert!(g.iter().any(|&x| x != 0.0), "w_req gradient all zero");
        // frozen backbone carries no grad buffer at all
        assert!(bundle.lm.tok_emb.grad().is_none());
        // phase-2 freeze: alignment group untouched
        assert!(bundle.ipn.w_align.grad().is_none());
    }

    #[test]
    fn param_count_covers_exactly_the_six_groups() {
        let bundle = toy_bundle();
        let expect = (D_V * D_L + D_L)
            + (D_L * D_T + D_T)
            + (D_V * N_FINE * D_T + N_FINE * D_T)
            + (D_T * D_L + D_L)
            + D_L
            + D_L;
        assert_eq!(bundle.ipn.param_count(), expect);
        let group_members: usize = GROUPS.iter().map(|(_, m)| m.len()).sum();
        assert_eq!(group_members, bundle.ipn.named().len());
    }

    #[test]
    fn forward_is_deterministic() {
        let bundle = toy_bundle();
        let scenes = gen_scenes(21, 1);
        let query = bundle.tokenizer.tokenize("a red circle").unwrap();
        let tape = Tape::no_grad();
        let a = ipn_forward(&tape, &bundle, &scenes[0], &query, true).unwrap();
        let b = ipn_forward(&tape, &bundle, &scenes[0], &query, true).unwrap();
        assert_eq!(a.logits.to_vec(), b.logits.to_vec());
    }

    #[test]
    fn dimension_mismatch_is_a_contract_error() {
        let bundle = toy_bundle();
        let tape = Tape::no_grad();
        let bad = Tensor::new(vec![1, D_V + 1], vec![0.0; D_V + 1]);
        match feature_align(&tape, &bundle.ipn, &bad) {
            Err(BackboneError::Tensor(TensorError::ShapeMismatch { .. })) => {}
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }
}
