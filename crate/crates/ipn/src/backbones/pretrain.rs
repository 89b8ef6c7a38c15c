//! Backbone pretraining: next-token training of the toy language model on
//! pure text, and symmetric InfoNCE alignment of the visual/text encoder
//! pair. Both end frozen and checksummed.

use rand::seq::SliceRandom;

use super::tokenizer::{Tokenizer, BOS, EOS};
use super::{BackboneError, FrozenLm, FrozenTextEncoder, FrozenVisualEncoder, D_T, MAX_SEQ};
use crate::data::Scene;
use crate::rng::substream;
use crate::tensor::{cosine_lr, lit, AdamW, Tape, Tensor, DEFAULT_WEIGHT_DECAY};

pub const INFO_NCE_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone)]
pub struct LmPretrainCfg {
    pub seed: u64,
    /// Epochs always run before the convergence bar may stop training; the
    /// bar is lax, and downstream quality wants the extra epochs.
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Convergence bar: held-out perplexity below this fraction of |V|.
    pub target_frac: f64,
}

impl Default for LmPretrainCfg {
    fn default() -> Self {
        LmPretrainCfg {
            seed: 0,
            min_epochs: 1,
            max_epochs: 8,
            batch: 64,
            lr: 3e-3,
            target_frac: 0.6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveCfg {
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Held-out candidate pool for the retrieval check.
    pub eval_candidates: usize,
    /// Required top-1 accuracy as a multiple of chance.
    pub min_chance_multiple: f64,
}

impl Default for ContrastiveCfg {
    fn default() -> Self {
        ContrastiveCfg {
            seed: 0,
            epochs: 4,
            batch: 64,
            lr: 2e-3,
            eval_candidates: 256,
            min_chance_multiple: 5.0,
        }
    }
}

/// Encodes one text line as `[<bos>] ++ ids ++ [<eos>]`, left-truncated to
/// the context limit.
fn line_ids(tokenizer: &Tokenizer, line: &str) -> Result<Vec<usize>, BackboneError> {
    let mut ids = tokenizer.tokenize(line)?;
    // input length is ids.len() + 1, which must fit MAX_SEQ
    if ids.len() + 1 > MAX_SEQ {
        ids = ids[ids.len() + 1 - MAX_SEQ..].to_vec();
    }
    let mut seq = Vec::with_capacity(ids.len() + 2);
    seq.push(BOS);
    seq.extend(ids);
    seq.push(EOS);
    Ok(seq)
}

fn sequence_nll(lm: &FrozenLm<f32>, tape: &Tape<f32>, seq: &[usize]) -> Result<Tensor<f32>, BackboneError> {
    let inputs = &seq[..seq.len() - 1];
    let targets = &seq[1..];
    let emb = lm.embed_tokens(tape, inputs)?;
    let (_, logits) = lm.forward(tape, &emb)?;
    Ok(tape.cross_entropy(&logits, targets)?)
}

fn held_out_perplexity(
    lm: &FrozenLm<f32>,
    seqs: &[Vec<usize>],
) -> Result<f64, BackboneError> {
    let mut total = 0.0;
    let mut count = 0.0;
    for seq in seqs {
        let tape = Tape::no_grad();
        let n = (seq.len() - 1) as f64;
        total += sequence_nll(lm, &tape, seq)?.value() as f64 * n;
        count += n;
    }
    Ok((total / count).exp())
}

pub struct LmPretrainOutcome {
    pub lm: FrozenLm<f32>,
    pub ppl_curve: Vec<f64>,
    pub checksum: u64,
}

/// Trains the language model on pure text until held-out perplexity drops
/// under `target_frac * |V|`, then freezes and checksums it.
pub fn pretrain_text_lm(
    tokenizer: &Tokenizer,
    lines: &[String],
    cfg: &LmPretrainCfg,
) -> Result<LmPretrainOutcome, BackboneError> {
    let mut rng = substream(cfg.seed, "lm-pretrain");
    let lm = FrozenLm::<f32>::init(&mut rng, tokenizer.vocab_size());
    let seqs: Vec<Vec<usize>> = lines
        .iter()
        .map(|l| line_ids(tokenizer, l))
        .collect::<Result<_, _>>()?;
    // every 8th line held out for the perplexity bar
    let (train, held): (Vec<_>, Vec<_>) = seqs
        .into_iter()
        .enumerate()
        .partition(|(i, _)| i % 8 != 7);
    let train: Vec<Vec<usize>> = train.into_iter().map(|(_, s)| s).collect();
    let held: Vec<Vec<usize>> = held.into_iter().map(|(_, s)| s).collect();

    let mut opt = AdamW::new(lm.named(), cfg.lr, DEFAULT_WEIGHT_DECAY);
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let target = cfg.target_frac * tokenizer.vocab_size() as f64;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let tape = Tape::new();
            let mut loss: Option<Tensor<f32>> = None;
            for &i in chunk {
                let l = sequence_nll(&lm, &tape, &train[i])?;
                loss = Some(match loss {
                    Some(acc) => tape.add(&acc, &l)?,
                    None => l,
                });
            }
            let loss = tape.scale(&loss.unwrap(), 1.0 / chunk.len() as f32);
            tape.backward(&loss)?;
            opt.step(cosine_lr(step, total_steps, cfg.lr))?;
            opt.zero_grads();
            step += 1;
        }
        let ppl = held_out_perplexity(&lm, &held)?;
        curve.push(ppl);
        if ppl < target && epoch + 1 >= cfg.min_epochs {
            lm.freeze();
            let checksum = lm.checksum();
            return Ok(LmPretrainOutcome {
                lm,
                ppl_curve: curve,
                checksum,
            });
        }
    }
    Err(BackboneError::LmNotConverged {
        final_ppl: *curve.last().unwrap_or(&f64::INFINITY),
        target,
        epochs: cfg.max_epochs,
        curve,
    })
}

pub struct ContrastiveOutcome {
    pub visual: FrozenVisualEncoder<f32>,
    pub text: FrozenTextEncoder<f32>,
    pub loss_curve: Vec<f64>,
    pub retrieval_acc: f64,
    pub visual_checksum: u64,
    pub text_checksum: u64,
}

/// Symmetric InfoNCE loss over one batch: image features vs head-projected
/// pooled text features, unnormalized dot products over temperature.
fn info_nce_batch(
    tape: &Tape<f32>,
    visual: &FrozenVisualEncoder<f32>,
    text: &FrozenTextEncoder<f32>,
    head: &Tensor<f32>,
    tokenizer: &Tokenizer,
    batch: &[(Scene, String)],
) -> Result<Tensor<f32>, BackboneError> {
    let mut img_rows = Vec::with_capacity(batch.len());
    let mut txt_rows = Vec::with_capacity(batch.len());
    for (scene, caption) in batch {
        img_rows.push(visual.encode_image(tape, scene)?);
        let ids = tokenizer.tokenize(caption)?;
        txt_rows.push(text.encode_text(tape, &ids)?);
    }
    let img_refs: Vec<&Tensor<f32>> = img_rows.iter().collect();
    let txt_refs: Vec<&Tensor<f32>> = txt_rows.iter().collect();
    let imgs = tape.concat_rows(&img_refs)?;
    let txts = tape.matmul(&tape.concat_rows(&txt_refs)?, head)?;
    let inv_t = lit::<f32>(1.0 / INFO_NCE_TEMPERATURE);
    let logits_i2t = tape.scale(&tape.matmul_nt(&imgs, &txts)?, inv_t);
    let logits_t2i = tape.scale(&tape.matmul_nt(&txts, &imgs)?, inv_t);
    let diag: Vec<usize> = (0..batch.len()).collect();
    let a = tape.cross_entropy(&logits_i2t, &diag)?;
    let b = tape.cross_entropy(&logits_t2i, &diag)?;
    Ok(tape.scale(&tape.add(&a, &b)?, 0.5))
}

/// Top-1 caption→scene retrieval accuracy over a candidate pool, using the
/// same head-projected text space the loss trained.
fn retrieval_accuracy(
    visual: &FrozenVisualEncoder<f32>,
    text: &FrozenTextEncoder<f32>,
    head: &Tensor<f32>,
    tokenizer: &Tokenizer,
    pool: &[(Scene, String)],
) -> Result<f64, BackboneError> {
    let tape = Tape::no_grad();
    let mut img_feats = Vec::with_capacity(pool.len());
    let mut txt_feats = Vec::with_capacity(pool.len());
    for (scene, caption) in pool {
        img_feats.push(visual.encode_image(&tape, scene)?.to_vec());
        let ids = tokenizer.tokenize(caption)?;
        let t = text.encode_text(&tape, &ids)?;
        txt_feats.push(tape.matmul(&t, head)?.to_vec());
    }
    let mut hits = 0usize;
    for (qi, q) in txt_feats.iter().enumerate() {
        let mut best = (f32::NEG_INFINITY, 0usize);
        for (ci, img) in img_feats.iter().enumerate() {
            let dot: f32 = q.iter().zip(img).map(|(a, b)| a * b).sum();
            if dot > best.0 {
                best = (dot, ci);
            }
        }
        if best.1 == qi {
            hits += 1;
        }
    }
    Ok(hits as f64 / pool.len() as f64)
}

/// Contrastively aligns the encoder pair on (scene, caption) pairs, checks
/// held-out retrieval, then freezes both. The text-side projection head is
/// trained and then discarded; retrieval is measured in the trained space
/// before discarding.
pub fn contrastive_pretrain(
    tokenizer: &Tokenizer,
    pairs: &[(Scene, String)],
    cfg: &ContrastiveCfg,
) -> Result<ContrastiveOutcome, BackboneError> {
    let mut rng = substream(cfg.seed, "contrastive-pretrain");
    let visual = FrozenVisualEncoder::<f32>::init(&mut rng);
    let text = FrozenTextEncoder::<f32>::init(&mut rng, tokenizer.vocab_size());
    let head = super::init_param::<f32>(&mut rng, vec![D_T, D_T], 0.05);

    // hold out the retrieval pool from training
    let n_eval = cfg.eval_candidates.min(pairs.len() / 4);
    let (eval_pool, train_pool) = pairs.split_at(n_eval);

    let mut params = visual.named();
    params.extend(text.named());
    params.push(("contrastive.head".to_string(), head.clone()));
    let mut opt = AdamW::new(params, cfg.lr, DEFAULT_WEIGHT_DECAY);

    let steps_per_epoch = train_pool.len() / cfg.batch;
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut order: Vec<usize> = (0..train_pool.len()).collect();
    let mut curve = Vec::new();
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            if chunk.len() < cfg.batch {
                continue; // InfoNCE needs full batches for a stable task size
            }
            let batch: Vec<(Scene, String)> =
                chunk.iter().map(|&i| train_pool[i].clone()).collect();
            let tape = Tape::new();
            let loss = info_nce_batch(&tape, &visual, &text, &head, tokenizer, &batch)?;
            curve.push(loss.value() as f64);
            tape.backward(&loss)?;
            opt.step(cosine_lr(step, total_steps, cfg.lr))?;
            opt.zero_grads();
            step += 1;
        }
    }

    let acc = retrieval_accuracy(&visual, &text, &head, tokenizer, eval_pool)?;
    let threshold = cfg.min_chance_multiple / eval_pool.len() as f64;
    if acc < threshold {
        return Err(BackboneError::RetrievalBelowThreshold {
            acc,
            threshold,
            curve,
        });
    }
    visual.freeze();
    text.freeze();
    let visual_checksum = visual.checksum();
    let text_checksum = text.checksum();
    Ok(ContrastiveOutcome {
        visual,
        text,
        loss_curve: curve,
        retrieval_acc: acc,
        visual_checksum,
        text_checksum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{caption_sample, gen_scenes, pretrain_text};

    fn caption_pairs(n: usize) -> (Tokenizer, Vec<(Scene, String)>) {
        let scenes = gen_scenes(11, n);
        let pairs: Vec<(Scene, String)> = scenes
            .iter()
            .map(|s| (s.clone(), caption_sample(s).target))
            .collect();
        let texts: Vec<String> = pairs.iter().map(|(_, c)| c.clone()).collect();
        (Tokenizer::build(&texts), pairs)
    }

    #[test]
    fn info_nce_initial_loss_is_near_ln_batch() {
        let (tok, pairs) = caption_pairs(64);
        let mut rng = substream(3, "nce-init");
        let visual = FrozenVisualEncoder::<f32>::init(&mut rng);
        let text = FrozenTextEncoder::<f32>::init(&mut rng, tok.vocab_size());
        let head = super::super::init_param::<f32>(&mut rng, vec![D_T, D_T], 0.05);
        let tape = Tape::no_grad();
        let loss = info_nce_batch(&tape, &visual, &text, &head, &tok, &pairs)
            .unwrap()
            .value() as f64;
        let expect = (64f64).ln();
        assert!(
            (loss - expect).abs() / expect < 0.10,
            "init loss {loss} vs ln(64) = {expect}"
        );
    }

    #[test]
    fn contrastive_training_reduces_loss_and_freezes() {
        let (tok, pairs) = caption_pairs(512);
        let cfg = ContrastiveCfg {
            seed: 5,
            epochs: 3,
            batch: 64,
            eval_candidates: 128,
            min_chance_multiple: 5.0,
            ..ContrastiveCfg::default()
        };
        let out = contrastive_pretrain(&tok, &pairs, &cfg).unwrap();
        let first = out.loss_curve.first().unwrap();
        let last = out.loss_curve.last().unwrap();
        assert!(last < first, "loss did not drop: {first} -> {last}");
        assert!(out.retrieval_acc >= 5.0 / 128.0);
        // frozen: checksums stable and no grad buffers wanted
        assert_eq!(out.visual.checksum(), out.visual_checksum);
        assert_eq!(out.text.checksum(), out.text_checksum);
        assert!(!out.visual.proj_w.requires_grad());
        assert!(!out.text.tok_emb.requires_grad());
    }

    #[test]
    fn lm_pretraining_reaches_perplexity_bar_and_freezes() {
        let scenes = gen_scenes(7, 600);
        let lines: Vec<String> = scenes
            .iter()
            .map(|s| {
                let c = caption_sample(s);
                pretrain_text(s, &c)
            })
            .collect();
        let tok = Tokenizer::build(&lines);
        let cfg = LmPretrainCfg {
            seed: 7,
            max_epochs: 6,
            ..LmPretrainCfg::default()
        };
        let out = pretrain_text_lm(&tok, &lines, &cfg).unwrap();
        let bar = 0.6 * tok.vocab_size() as f64;
        assert!(out.ppl_curve.last().unwrap() < &bar);
        assert!(!out.lm.tok_emb.requires_grad());
        assert_eq!(out.lm.checksum(), out.checksum);
    }

    #[test]
    fn lm_nonconvergence_reports_curve() {
        let scenes = gen_scenes(7, 64);
        let lines: Vec<String> = scenes
            .iter()
            .map(|s| pretrain_text(s, &caption_sample(s)))
            .collect();
        let tok = Tokenizer::build(&lines);
        let cfg = LmPretrainCfg {
            seed: 7,
            max_epochs: 1,
            lr: 1e-7, // too small to move anywhere
            ..LmPretrainCfg::default()
        };
        match pretrain_text_lm(&tok, &lines, &cfg) {
            Err(BackboneError::LmNotConverged { curve, .. }) => assert_eq!(curve.len(), 1),
            Err(e) => panic!("unexpected error: {e}"),
            Ok(_) => panic!("expected non-convergence"),
        }
    }
}
