//! Greedy and beam-search decoding over the frozen language model.
//!
//! Scores are mean per-token log-probabilities (length-normalized with
//! exponent 1). A hypothesis retires when it emits <eos>; ties break on the
//! token ids so decoding is fully deterministic. The special tokens <pad>,
//! <img> and <img-d> are never emitted.

use thiserror::Error;

use crate::backbones::tokenizer::{EOS, IMG, IMGD, PAD};
use crate::backbones::{BackboneError, FrozenLm};
use crate::data::Scene;
use crate::model::{ipn_forward, ModelBundle};
use crate::tensor::{Scalar, Tape, Tensor};

/// Largest supported beam width.
pub const MAX_BEAM: usize = 16;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("beam width {0} outside 1..={MAX_BEAM}")]
    BadBeam(usize),
    #[error("query '{0}' does not tokenize: {1}")]
    BadQuery(String, String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

/// Next-token distribution source; abstracted so the search can be tested
/// against exhaustive oracles.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities of the next token given the generated suffix.
    fn step_logprobs(&self, generated: &[usize]) -> Result<Vec<f64>, DecodeError>;
}

/// Scores continuations of a fixed embedded prefix under the language
/// model.
pub struct LmPrefixScorer<'a, T: Scalar> {
    pub lm: &'a FrozenLm<T>,
    pub prefix: &'a Tensor<T>,
}

impl<T: Scalar> StepScorer for LmPrefixScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.lm.vocab_size()
    }

    fn step_logprobs(&self, generated: &[usize]) -> Result<Vec<f64>, DecodeError> {
        let tape = Tape::no_grad();
        let input = if generated.is_empty() {
            self.prefix.clone()
        } else {
            let emb = self.lm.embed_tokens(&tape, generated)?;
            tape.concat_rows(&[self.prefix, &emb]).map_err(BackboneError::from)?
        };
        let (_, logits) = self.lm.forward(&tape, &input)?;
        let rows = logits.shape()[0];
        let v = self.vocab_size();
        let last: Vec<f64> = logits.to_vec()[(rows - 1) * v..]
            .iter()
            .map(|x| x.to_f64().unwrap())
            .collect();
        let mx = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = last.iter().map(|x| (x - mx).exp()).sum();
        Ok(last.iter().map(|x| (x - mx) - z.ln()).collect())
    }
}

/// One decoded sequence: tokens as generated (including a final <eos> if
/// one was emitted) and their log-probabilities.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub logprobs: Vec<f64>,
    pub beam_size: usize,
}

impl DecodeResult {
    /// Total log-probability divided by length (normalization exponent 1).
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.logprobs.iter().sum::<f64>() / self.tokens.len() as f64
        }
    }

    /// Generated tokens with the terminating <eos> stripped.
    pub fn answer_tokens(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == EOS => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn banned(token: usize) -> bool {
    token == PAD || token == IMG || token == IMGD
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logprobs: Vec<f64>,
    total: f64,
}

impl Hyp {
    fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.total / self.tokens.len() as f64
        }
    }

    fn done(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// `(score desc, tokens asc)` — the deterministic beam ordering.
fn better(a: &Hyp, b: &Hyp) -> std::cmp::Ordering {
    b.score()
        .partial_cmp(&a.score())
        .expect("scores are never NaN")
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-normalized beam search. Retired (<eos>) hypotheses keep
/// competing for the beam on their final score; the best hypothesis over
/// the whole run is returned.
pub fn beam_search(
    scorer: &dyn StepScorer,
    k: usize,
    max_len: usize,
) -> Result<DecodeResult, DecodeError> {
    if k == 0 || k > MAX_BEAM {
        return Err(DecodeError::BadBeam(k));
    }
    let mut beam = vec![Hyp {
        tokens: Vec::new(),
        logprobs: Vec::new(),
        total: 0.0,
    }];
    for _ in 0..max_len {
        if beam.iter().all(Hyp::done) {
            break;
        }
        let mut next: Vec<Hyp> = Vec::new();
        for h in &beam {
            if h.done() {
                next.push(h.clone());
                continue;
            }
            let lp = scorer.step_logprobs(&h.tokens)?;
            for (tok, &p) in lp.iter().enumerate() {
                if banned(tok) {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                let mut logprobs = h.logprobs.clone();
                logprobs.push(p);
                next.push(Hyp {
                    tokens,
                    logprobs,
                    total: h.total + p,
                });
            }
        }
        next.sort_by(better);
        next.truncate(k);
        beam = next;
    }
    let best = beam
        .into_iter()
        .min_by(better)
        .expect("beam never empties");
    Ok(DecodeResult {
        tokens: best.tokens,
        logprobs: best.logprobs,
        beam_size: k,
    })
}

/// Argmax decoding with the same masking and tie-breaking (lowest token id
/// on equal log-probability); coincides with `beam_search(_, 1, _)`.
pub fn greedy_decode(
    scorer: &dyn StepScorer,
    max_len: usize,
) -> Result<DecodeResult, DecodeError> {
    let mut tokens = Vec::new();
    let mut logprobs = Vec::new();
    for _ in 0..max_len {
        let lp = scorer.step_logprobs(&tokens)?;
        let (tok, p) = lp
            .iter()
            .enumerate()
            .filter(|(t, _)| !banned(*t))
            .max_by(|(ta, a), (tb, b)| a.partial_cmp(b).unwrap().then(tb.cmp(ta)))
            .expect("vocabulary has allowed tokens");
        tokens.push(tok);
        logprobs.push(*p);
        if tok == EOS {
            break;
        }
    }
    Ok(DecodeResult {
        tokens,
        logprobs,
        beam_size: 1,
    })
}

/// Whether the answer uses the full two-pass protocol or stops at the
/// static first-pass information.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerMode {
    Ipn,
    Static,
}

impl std::str::FromStr for AnswerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ipn" => Ok(AnswerMode::Ipn),
            "static" => Ok(AnswerMode::Static),
            other => Err(format!("unknown mode '{other}' (expected ipn|static)")),
        }
    }
}

/// Intermediate norms surfaced by `answer` for tracing.
#[derive(Debug, Clone)]
pub struct AnswerTrace {
    pub h_r_norm: Option<f64>,
    pub h_req_norm: Option<f64>,
    pub h_d_norm: Option<f64>,
    pub truncated: usize,
}

#[derive(Debug)]
pub struct Answer {
    pub result: DecodeResult,
    pub text: String,
    pub trace: AnswerTrace,
}

/// Decodes an answer to `query` about `scene`, beam width `beam`.
pub fn answer<T: Scalar>(
    bundle: &ModelBundle<T>,
    scene: &Scene,
    query: &str,
    mode: AnswerMode,
    beam: usize,
    max_len: usize,
) -> Result<Answer, DecodeError> {
    let ids = bundle
        .tokenizer
        .tokenize(query)
        .map_err(|e| DecodeError::BadQuery(query.to_string(), e.to_string()))?;
    let tape = Tape::no_grad();
    let fwd = ipn_forward(&tape, bundle, scene, &ids, mode == AnswerMode::Ipn)?;
    let scorer = LmPrefixScorer {
        lm: &bundle.lm,
        prefix: &fwd.prefix,
    };
    let result = beam_search(&scorer, beam, max_len)?;
    let text = bundle
        .tokenizer
        .detokenize(result.answer_tokens())
        .unwrap_or_default();
    let trace = AnswerTrace {
        h_r_norm: fwd.interaction.as_ref().map(|i| i.h_r.norm()),
        h_req_norm: fwd.interaction.as_ref().map(|i| i.h_req.norm()),
        h_d_norm: fwd.interaction.as_ref().map(|i| i.h_d.norm()),
        truncated: fwd.truncated,
    };
    Ok(Answer {
        result,
        text,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::tokenizer::Tokenizer;
    use crate::backbones::{FrozenTextEncoder, FrozenVisualEncoder};
    use crate::data::gen_scenes;
    use crate::model::IpnParams;
    use crate::rng::substream;
    use rand::Rng;

    /// Deterministic pseudo-random conditional distribution: logits depend
    /// on the generated suffix through a hash.
    struct HashScorer {
        vocab: usize,
        salt: u64,
    }

    impl StepScorer for HashScorer {
        fn vocab_size(&self) -> usize {
            self.vocab
        }

        fn step_logprobs(&self, generated: &[usize]) -> Result<Vec<f64>, DecodeError> {
            let mut h = crate::hash::Fnv1a::new();
            h.update(&self.salt.to_le_bytes());
            for &t in generated {
                h.update(&(t as u64).to_le_bytes());
            }
            let mut logits = Vec::with_capacity(self.vocab);
            let mut state = h.finish();
            for _ in 0..self.vocab {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                logits.push(((state >> 33) as f64 / (1u64 << 31) as f64) * 4.0 - 2.0);
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - mx).exp()).sum();
            Ok(logits.iter().map(|x| (x - mx) - z.ln()).collect())
        }
    }

    /// Exhaustive best over every legal sequence up to `max_len`: sequences
    /// stop at <eos> or at the length cap; specials other than <eos> never
    /// appear.
    fn exhaustive_best(scorer: &dyn StepScorer, max_len: usize) -> DecodeResult {
        fn recurse(
            scorer: &dyn StepScorer,
            prefix: &mut Vec<usize>,
            lps: &mut Vec<f64>,
            max_len: usize,
            best: &mut Option<(f64, Vec<usize>, Vec<f64>)>,
        ) {
            let consider = |best: &mut Option<(f64, Vec<usize>, Vec<f64>)>,
                            toks: &[usize],
                            lps: &[f64]| {
                let score = lps.iter().sum::<f64>() / toks.len() as f64;
                let replace = match best {
                    None => true,
                    Some((s, t, _)) => {
                        score > *s || (score == *s && toks < t.as_slice())
                    }
                };
                if replace {
                    *best = Some((score, toks.to_vec(), lps.to_vec()));
                }
            };
            if prefix.last() == Some(&EOS) || prefix.len() == max_len {
                consider(best, prefix, lps);
                return;
            }
            if !prefix.is_empty() {
                // a live sequence at less than max length is not a final
                // candidate; beam search only returns retired or capped ones
            }
            let lp = scorer.step_logprobs(prefix).unwrap();
            for (tok, &p) in lp.iter().enumerate() {
                if banned(tok) {
                    continue;
                }
                prefix.push(tok);
                lps.push(p);
                recurse(scorer, prefix, lps, max_len, best);
                prefix.pop();
                lps.pop();
            }
        }
        let mut best = None;
        recurse(scorer, &mut Vec::new(), &mut Vec::new(), max_len, &mut best);
        let (_, tokens, logprobs) = best.unwrap();
        DecodeResult {
            tokens,
            logprobs,
            beam_size: 0,
        }
    }

    #[test]
    fn wide_beam_matches_exhaustive_oracle() {
        // vocab 8: specials 0..5, two content tokens; only <eos>, <bos>,
        // <sep> and the content tokens are emittable -> branching 5,
        // depth 3; a width-16 beam retains every live prefix at each depth
        // of the pruned tree, so it must equal brute force
        for salt in 0..20 {
            let scorer = HashScorer { vocab: 7, salt };
            let oracle = exhaustive_best(&scorer, 3);
            let got = beam_search(&scorer, 16, 3).unwrap();
            assert_eq!(got.tokens, oracle.tokens, "salt {salt}");
            assert!((got.score() - oracle.score()).abs() < 1e-12);
        }
    }

    #[test]
    fn narrow_beams_never_beat_exhaustive() {
        for salt in 0..10 {
            let scorer = HashScorer { vocab: 9, salt };
            let oracle = exhaustive_best(&scorer, 3);
            for k in 1..=16 {
                let got = beam_search(&scorer, k, 3).unwrap();
                assert!(
                    got.score() <= oracle.score() + 1e-12,
                    "salt {salt} beam {k} beat brute force"
                );
            }
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for salt in 0..50 {
            let scorer = HashScorer { vocab: 12, salt };
            let g = greedy_decode(&scorer, 6).unwrap();
            let b = beam_search(&scorer, 1, 6).unwrap();
            assert_eq!(g.tokens, b.tokens, "salt {salt}");
        }
    }

    #[test]
    fn beam_width_is_validated() {
        let scorer = HashScorer { vocab: 8, salt: 1 };
        assert!(matches!(
            beam_search(&scorer, 0, 3),
            Err(DecodeError::BadBeam(0))
        ));
        assert!(matches!(
            beam_search(&scorer, 17, 3),
            Err(DecodeError::BadBeam(17))
        ));
    }

    fn toy_bundle() -> ModelBundle<f32> {
        let scenes = gen_scenes(51, 30);
        let texts: Vec<String> = scenes.iter().map(crate::data::render_caption).collect();
        let tokenizer = Tokenizer::build(&texts);
        let mut rng = substream(51, "decode-test");
        ModelBundle {
            lm: crate::backbones::FrozenLm::init(&mut rng, tokenizer.vocab_size()),
            visual: FrozenVisualEncoder::init(&mut rng),
            text: FrozenTextEncoder::init(&mut rng, tokenizer.vocab_size()),
            ipn: IpnParams::init(&mut rng),
            tokenizer,
        }
    }

    #[test]
    fn lm_scorer_beam_one_is_greedy_on_many_prompts() {
        let bundle = toy_bundle();
        let scenes = gen_scenes(51, 10);
        let mut rng = substream(51, "decode-prompts");
        for i in 0..20 {
            let scene = &scenes[i % scenes.len()];
            let n = rng.gen_range(1..5);
            let words: Vec<usize> = (0..n)
                .map(|_| rng.gen_range(6..bundle.tokenizer.vocab_size()))
                .collect();
            let tape = Tape::no_grad();
            let fwd = ipn_forward(&tape, &bundle, scene, &words, true).unwrap();
            let scorer = LmPrefixScorer {
                lm: &bundle.lm,
                prefix: &fwd.prefix,
            };
            let g = greedy_decode(&scorer, 8).unwrap();
            let b = beam_search(&scorer, 1, 8).unwrap();
            assert_eq!(g.tokens, b.tokens, "prompt {i}");
        }
    }

    #[test]
    fn answers_never_contain_masked_specials() {
        let bundle = toy_bundle();
        let scenes = gen_scenes(51, 5);
        for scene in &scenes {
            for mode in [AnswerMode::Ipn, AnswerMode::Static] {
                let a = answer(&bundle, scene, "a red circle", mode, 4, 10).unwrap();
                for &t in &a.result.tokens {
                    assert!(!banned(t), "emitted masked token {t}");
                }
                if mode == AnswerMode::Static {
                    assert!(a.trace.h_d_norm.is_none());
                } else {
                    assert!(a.trace.h_d_norm.is_some());
                }
            }
        }
    }

    #[test]
    fn unknown_query_word_is_an_error() {
        let bundle = toy_bundle();
        let scenes = gen_scenes(51, 1);
        assert!(matches!(
            answer(&bundle, &scenes[0], "zzz", AnswerMode::Ipn, 1, 5),
            Err(DecodeError::BadQuery(_, _))
        ));
    }
}
