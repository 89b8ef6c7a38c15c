//! Two-phase training: phase 1 fits feature alignment on captions, phase 2
//! fits the interaction layers on mixed instruction data. Backbones stay
//! frozen throughout; each phase freezes everything outside its own set.

pub mod checkpoint;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::tokenizer::{BOS, EOS};
use crate::backbones::{BackboneError, FrozenLm, MAX_SEQ};
use crate::data::{InstructionSample, Kind, Scene};
use crate::hash::Fnv1a;
use crate::model::{
    build_second_pass, decompose_image, extract_request, feature_align, interact,
    project_request, transmit, ModelBundle,
};
use crate::rng::substream;
use crate::tensor::{cosine_lr, AdamW, Scalar, Tape, Tensor, TensorError, DEFAULT_WEIGHT_DECAY};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became NaN at step {step}; parameters restored to the last good snapshot")]
    NanLoss { step: usize },
    #[error("phase {phase} corpus rejected sample of kind {kind}")]
    WrongKind { phase: u8, kind: Kind },
    #[error("sample references unknown scene id {0}")]
    MissingScene(u64),
    #[error("frozen weights drifted during training: {0}")]
    FrozenDrift(String),
    #[error("target '{0}' does not tokenize: {1}")]
    BadTarget(String, String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: u8,
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn phase1_default(seed: u64) -> TrainConfig {
        TrainConfig {
            phase: 1,
            base_lr: 1e-4,
            batch_size: 64,
            epochs: 5,
            seed,
            eval_every: 10,
        }
    }

    pub fn phase2_default(seed: u64) -> TrainConfig {
        TrainConfig {
            phase: 2,
            base_lr: 1e-4,
            batch_size: 32,
            epochs: 5,
            seed,
            eval_every: 10,
        }
    }
}

/// One optimizer step in the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub phase: u8,
    /// Per-token NLL averaged over the batch.
    pub loss: f64,
    pub lr: f64,
    /// Digest of the trainable parameter names, for freeze auditing.
    pub trainable_digest: u64,
    pub kind_losses: BTreeMap<String, f64>,
}

/// Line-delimited JSON training log.
pub fn write_train_log(path: &Path, records: &[LossRecord]) -> std::io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("loss record serializes"));
        out.push('\n');
    }
    std::fs::write(path, out)
}

fn names_digest(names: &[String]) -> u64 {
    let mut h = Fnv1a::new();
    for n in names {
        h.update(n.as_bytes());
        h.update(b"\n");
    }
    h.finish()
}

/// Mean next-token NLL of `targets` continuing `prefix` with teacher
/// forcing: position prefix_len-1+k predicts targets[k].
pub fn sequence_loss<T: Scalar>(
    tape: &Tape<T>,
    lm: &FrozenLm<T>,
    prefix: &Tensor<T>,
    targets: &[usize],
) -> Result<Tensor<T>, TrainError> {
    assert!(!targets.is_empty(), "empty target sequence");
    let p = prefix.shape()[0];
    let n = targets.len();
    let input = if n > 1 {
        let forced = lm.embed_tokens(tape, &targets[..n - 1])?;
        tape.concat_rows(&[prefix, &forced])?
    } else {
        prefix.clone()
    };
    let (_, logits) = lm.forward(tape, &input)?;
    let rows = tape.slice_rows(&logits, p - 1, p - 1 + n)?;
    Ok(tape.cross_entropy(&rows, targets)?)
}

/// Tokenized target plus the closing <eos>, left-room-checked.
fn target_ids(
    bundle: &ModelBundle<f32>,
    text: &str,
) -> Result<Vec<usize>, TrainError> {
    let mut ids = bundle
        .tokenizer
        .tokenize(text)
        .map_err(|e| TrainError::BadTarget(text.to_string(), e.to_string()))?;
    ids.push(EOS);
    Ok(ids)
}

/// Phase-1 loss for one caption: prefix `[h_img, <bos>]`, target the
/// caption tokens plus <eos>.
pub fn phase1_example_loss<T: Scalar>(
    tape: &Tape<T>,
    bundle: &ModelBundle<T>,
    scene: &Scene,
    caption_ids: &[usize],
) -> Result<Tensor<T>, TrainError> {
    let h_i = bundle.visual.encode_image(tape, scene)?;
    let h_img = feature_align(tape, &bundle.ipn, &h_i)?;
    let bos = bundle.lm.embed_tokens(tape, &[BOS])?;
    let prefix = tape.concat_rows(&[&h_img, &bos])?;
    sequence_loss(tape, &bundle.lm, &prefix, caption_ids)
}

/// Phase-2 loss for one instruction: full two-pass protocol, NLL of the
/// target tokens after the second-pass prefix.
pub fn phase2_example_loss<T: Scalar>(
    tape: &Tape<T>,
    bundle: &ModelBundle<T>,
    scene: &Scene,
    query_ids: &[usize],
    target: &[usize],
) -> Result<Tensor<T>, TrainError> {
    let h_i = bundle.visual.encode_image(tape, scene)?;
    let h_img = feature_align(tape, &bundle.ipn, &h_i)?;
    let (first, _) =
        crate::model::build_first_pass(tape, &bundle.lm, &bundle.ipn, &h_img, query_ids)?;
    let (hidden1, _) = bundle.lm.forward(tape, &first)?;
    let h_r = extract_request(tape, &hidden1)?;
    let h_req = project_request(tape, &bundle.ipn, &h_r)?;
    let h_fine = decompose_image(tape, &bundle.ipn, &h_i)?;
    let h_g_out = interact(tape, &bundle.text, &h_fine, &h_req)?;
    let h_d = transmit(tape, &bundle.ipn, &h_g_out)?;
    let (prefix, _) = build_second_pass(tape, &bundle.lm, &h_img, query_ids, &h_d)?;
    sequence_loss(tape, &bundle.lm, &prefix, target)
}

fn scene_map(scenes: &[Scene]) -> HashMap<u64, &Scene> {
    scenes.iter().map(|s| (s.id, s)).collect()
}

fn snapshot(params: &[(String, Tensor<f32>)]) -> Vec<(String, Vec<f32>)> {
    params
        .iter()
        .map(|(n, t)| (n.clone(), t.to_vec()))
        .collect()
}

fn restore(params: &[(String, Tensor<f32>)], snap: &[(String, Vec<f32>)]) {
    for ((_, t), (_, data)) in params.iter().zip(snap) {
        t.set_data(data.clone());
    }
}

struct FreezeAudit {
    backbones: [u64; 3],
    untouched: Vec<(String, Vec<f32>)>,
}

impl FreezeAudit {
    fn begin(bundle: &ModelBundle<f32>, untouched: Vec<(String, Tensor<f32>)>) -> FreezeAudit {
        FreezeAudit {
            backbones: bundle.frozen_checksums(),
            untouched: snapshot(&untouched),
        }
    }

    fn verify(
        &self,
        bundle: &ModelBundle<f32>,
        untouched: &[(String, Tensor<f32>)],
    ) -> Result<(), TrainError> {
        if bundle.frozen_checksums() != self.backbones {
            return Err(TrainError::FrozenDrift("backbone checksum".to_string()));
        }
        for ((name, t), (_, before)) in untouched.iter().zip(&self.untouched) {
            if t.to_vec() != *before {
                return Err(TrainError::FrozenDrift(name.clone()));
            }
        }
        Ok(())
    }
}

enum PhaseExample {
    Caption { scene_id: u64, target: Vec<usize> },
    Instruction {
        scene_id: u64,
        kind: Kind,
        query: Vec<usize>,
        target: Vec<usize>,
    },
}

fn run_phase(
    bundle: &ModelBundle<f32>,
    scenes: &[Scene],
    examples: Vec<PhaseExample>,
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>, TrainError> {
    use rand::seq::SliceRandom;
    let by_id = scene_map(scenes);
    for ex in &examples {
        let id = match ex {
            PhaseExample::Caption { scene_id, .. } => *scene_id,
            PhaseExample::Instruction { scene_id, .. } => *scene_id,
        };
        if !by_id.contains_key(&id) {
            return Err(TrainError::MissingScene(id));
        }
    }

    bundle.ipn.set_phase(cfg.phase);
    let trainable = match cfg.phase {
        1 => bundle.ipn.phase1_trainable(),
        _ => bundle.ipn.phase2_trainable(),
    };
    let untouched: Vec<(String, Tensor<f32>)> = bundle
        .ipn
        .named()
        .into_iter()
        .filter(|(n, _)| !trainable.iter().any(|(tn, _)| tn == n))
        .collect();
    let audit = FreezeAudit::begin(bundle, untouched.clone());
    let digest = names_digest(&trainable.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>());
    let mut opt = AdamW::new(trainable.clone(), cfg.base_lr, DEFAULT_WEIGHT_DECAY);

    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = substream(cfg.seed, &format!("phase{}-order", cfg.phase));
    let mut records = Vec::new();
    let mut good = snapshot(&trainable);
    let mut step = 0usize;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let mut batch_loss: Option<Tensor<f32>> = None;
            let mut kind_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for &i in chunk {
                let (loss, kind_name) = match &examples[i] {
                    PhaseExample::Caption { scene_id, target } => (
                        phase1_example_loss(&tape, bundle, by_id[scene_id], target)?,
                        "caption".to_string(),
                    ),
                    PhaseExample::Instruction {
                        scene_id,
                        kind,
                        query,
                        target,
                    } => (
                        phase2_example_loss(&tape, bundle, by_id[scene_id], query, target)?,
                        kind.to_string(),
                    ),
                };
                let e = kind_sums.entry(kind_name).or_insert((0.0, 0));
                e.0 += loss.value() as f64;
                e.1 += 1;
                batch_loss = Some(match batch_loss {
                    Some(acc) => tape.add(&acc, &loss)?,
                    None => loss,
                });
            }
            let loss = tape.scale(&batch_loss.unwrap(), 1.0 / chunk.len() as f32);
            let loss_val = loss.value() as f64;
            if !loss_val.is_finite() {
                restore(&trainable, &good);
                return Err(TrainError::NanLoss { step });
            }
            tape.backward(&loss)?;
            let lr = cosine_lr(step, total_steps, cfg.base_lr);
            opt.step(lr)?;
            opt.zero_grads();
            records.push(LossRecord {
                step,
                phase: cfg.phase,
                loss: loss_val,
                lr,
                trainable_digest: digest,
                kind_losses: kind_sums
                    .into_iter()
                    .map(|(k, (s, c))| (k, s / c as f64))
                    .collect(),
            });
            step += 1;
        }
        good = snapshot(&trainable);
    }

    audit.verify(bundle, &untouched)?;
    Ok(records)
}

/// Phase 1: captions only; trains {W_align, b_align, E_img}.
pub fn phase1_train(
    bundle: &ModelBundle<f32>,
    scenes: &[Scene],
    samples: &[InstructionSample],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>, TrainError> {
    assert_eq!(cfg.phase, 1);
    let mut examples = Vec::with_capacity(samples.len());
    for s in samples {
        if s.kind != Kind::Caption {
            return Err(TrainError::WrongKind {
                phase: 1,
                kind: s.kind,
            });
        }
        examples.push(PhaseExample::Caption {
            scene_id: s.scene_id,
            target: target_ids(bundle, &s.target)?,
        });
    }
    run_phase(bundle, scenes, examples, cfg)
}

/// Phase 2: mixed instruction kinds; trains {W_req, b_req, W_decomp,
/// b_decomp, W_out, b_out, E_imgd} with the phase-1 set frozen.
pub fn phase2_train(
    bundle: &ModelBundle<f32>,
    scenes: &[Scene],
    samples: &[InstructionSample],
    cfg: &TrainConfig,
) -> Result<Vec<LossRecord>, TrainError> {
    assert_eq!(cfg.phase, 2);
    let mut examples = Vec::with_capacity(samples.len());
    for s in samples {
        if s.kind == Kind::Caption {
            continue; // captions are phase-1 material; optional here, skipped
        }
        let query = bundle
            .tokenizer
            .tokenize(&s.prompt)
            .map_err(|e| TrainError::BadTarget(s.prompt.clone(), e.to_string()))?;
        let target = target_ids(bundle, &s.target)?;
        // queries must leave room for the target under the context limit
        if query.len() + 2 + target.len() > MAX_SEQ {
            return Err(TrainError::BadTarget(
                s.prompt.clone(),
                "query plus target exceeds context".to_string(),
            ));
        }
        examples.push(PhaseExample::Instruction {
            scene_id: s.scene_id,
            kind: s.kind,
            query,
            target,
        });
    }
    run_phase(bundle, scenes, examples, cfg)
}
