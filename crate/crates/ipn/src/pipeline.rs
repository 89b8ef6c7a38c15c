//! End-to-end orchestration: corpus generation, backbone pretraining, the
//! two training phases and evaluation, all reading and writing one run
//! directory. The command-line binary and the integration tests drive the
//! same functions, so a run is reproducible from its artifacts alone.
//!
//! Run directory layout:
//!
//! ```text
//! out/
//!   data/        scenes.jsonl captions.jsonl train.jsonl heldout.jsonl manifest.json
//!   backbones/   vocab.txt weights.ipnb pretrain.json
//!   phase1/      vocab.txt weights.ipnb train_log.jsonl
//!   phase2/      vocab.txt weights.ipnb train_log.jsonl
//!   eval/        report_<mode>.json rows_<mode>.csv
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbones::pretrain::{
    contrastive_pretrain, pretrain_text_lm, ContrastiveCfg, LmPretrainCfg,
};
use crate::backbones::tokenizer::Tokenizer;
use crate::backbones::BackboneError;
use crate::bundle::{load_bundle, save_bundle, BundleError};
use crate::data::{
    caption_sample, gen_scenes, is_held_out, make_detail_sample, make_matching_samples,
    make_vqa_samples, pretrain_text, read_jsonl, write_jsonl, DataError, InstructionSample, Kind,
    Scene, VqaTopic,
};
use crate::decode::{answer, AnswerMode, DecodeError};
use crate::metrics::{exact_match, EvalReport, EvalRow};
use crate::model::ModelBundle;
use crate::train::{phase1_train, phase2_train, write_train_log, LossRecord, TrainConfig, TrainError};

pub const DATA_DIR: &str = "data";
pub const BACKBONES_DIR: &str = "backbones";
pub const PHASE1_DIR: &str = "phase1";
pub const PHASE2_DIR: &str = "phase2";
pub const EVAL_DIR: &str = "eval";
pub const SCENES_FILE: &str = "scenes.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const TRAIN_FILE: &str = "train.jsonl";
pub const HELD_FILE: &str = "heldout.jsonl";
pub const DATA_MANIFEST: &str = "manifest.json";
pub const PRETRAIN_MANIFEST: &str = "pretrain.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Everything a full run needs, flat so a `key = value` config file maps
/// one-to-one onto fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Total scenes; roughly a quarter land in the held-out split.
    pub scenes: usize,
    /// Train-split scenes whose rendered text feeds language-model
    /// pretraining.
    pub lm_scenes: usize,
    pub lm_epochs: usize,
    pub encoder_epochs: usize,
    pub phase1_captions: usize,
    pub phase1_lr: f64,
    pub phase1_epochs: usize,
    pub phase1_batch: usize,
    pub phase2_lr: f64,
    pub phase2_epochs: usize,
    pub phase2_batch: usize,
    /// Question-answer items kept per train scene in the phase-2 mix.
    pub phase2_vqa_per_scene: usize,
    /// One description sample per this many train scenes.
    pub phase2_detail_every: usize,
    /// Hard cap on the phase-2 mix, enforced by an even stride.
    pub phase2_max_samples: usize,
    pub eval_true_false: usize,
    pub eval_four_choice: usize,
    /// Query-dependent question cap (color / count / location).
    pub eval_vqa_topical: usize,
    pub eval_vqa_existence: usize,
    pub eval_detail: usize,
    pub beam_short: usize,
    pub beam_detail: usize,
    pub max_short_answer: usize,
    pub max_detail_answer: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            scenes: 2800,
            lm_scenes: 600,
            lm_epochs: 6,
            encoder_epochs: 4,
            phase1_captions: 2000,
            phase1_lr: 1e-4,
            phase1_epochs: 5,
            phase1_batch: 64,
            phase2_lr: 1e-4,
            phase2_epochs: 5,
            phase2_batch: 32,
            phase2_vqa_per_scene: 2,
            phase2_detail_every: 4,
            phase2_max_samples: 6000,
            eval_true_false: 400,
            eval_four_choice: 300,
            eval_vqa_topical: 520,
            eval_vqa_existence: 130,
            eval_detail: 60,
            beam_short: 1,
            beam_detail: 5,
            max_short_answer: 10,
            max_detail_answer: 48,
        }
    }
}

impl PipelineConfig {
    pub fn phase1_train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.phase1_lr,
            batch_size: self.phase1_batch,
            epochs: self.phase1_epochs,
            ..TrainConfig::phase1_default(self.seed)
        }
    }

    pub fn phase2_train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.phase2_lr,
            batch_size: self.phase2_batch,
            epochs: self.phase2_epochs,
            ..TrainConfig::phase2_default(self.seed)
        }
    }
}

/// The generated corpus as held in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub scenes: Vec<Scene>,
    pub captions: Vec<InstructionSample>,
    pub train: Vec<InstructionSample>,
    pub held: Vec<InstructionSample>,
}

impl Corpus {
    pub fn scene(&self, id: u64) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub scenes: usize,
    pub train_scenes: usize,
    pub held_scenes: usize,
    pub captions: usize,
    pub train_by_kind: BTreeMap<String, usize>,
    pub held_by_kind: BTreeMap<String, usize>,
    pub held_vqa_topical: usize,
}

fn by_kind(samples: &[InstructionSample]) -> BTreeMap<String, usize> {
    let mut map = BTreeMap::new();
    for s in samples {
        *map.entry(s.kind.to_string()).or_insert(0) += 1;
    }
    map
}

/// Whether a question needs query-specific visual information (color,
/// count or location, as opposed to bare existence).
pub fn is_topical_vqa(sample: &InstructionSample) -> bool {
    sample.kind == Kind::Vqa
        && matches!(
            crate::data::vqa_topic(&sample.prompt),
            Some(VqaTopic::Color | VqaTopic::Count | VqaTopic::Location)
        )
}

/// Keeps at most `cap` items, evenly strided so the kind mixture survives.
fn stride_cap<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    if items.len() <= cap {
        return items.to_vec();
    }
    (0..cap).map(|k| items[k * items.len() / cap].clone()).collect()
}

/// Builds the whole corpus in memory: scenes split by the content hash,
/// phase-1 captions and phase-2 mix from the train split, evaluation items
/// from the held-out split.
pub fn build_corpus(cfg: &PipelineConfig) -> Result<Corpus, PipelineError> {
    let scenes = gen_scenes(cfg.seed, cfg.scenes);
    let train_scenes: Vec<Scene> = scenes.iter().filter(|s| !is_held_out(s.id)).cloned().collect();
    let held_scenes: Vec<Scene> = scenes.iter().filter(|s| is_held_out(s.id)).cloned().collect();
    if train_scenes.len() < cfg.phase1_captions {
        return Err(PipelineError::Contract(format!(
            "need {} captions but only {} train scenes; raise `scenes`",
            cfg.phase1_captions,
            train_scenes.len()
        )));
    }

    let captions: Vec<InstructionSample> = train_scenes[..cfg.phase1_captions]
        .iter()
        .map(caption_sample)
        .collect();

    let mut train = make_matching_samples(&train_scenes, cfg.seed);
    // four-choice items exist only for single-object scenes, a small slice
    // of the corpus; extra rounds with fresh distractor draws rebalance the
    // phase-2 mix so the answer-slot query gets trained on them
    for r in 1..8u64 {
        train.extend(
            make_matching_samples(&train_scenes, cfg.seed.wrapping_mul(7919).wrapping_add(r))
                .into_iter()
                .filter(|m| m.kind == Kind::FourChoice),
        );
    }
    for (i, s) in train_scenes.iter().enumerate() {
        let vqa = make_vqa_samples(s);
        for j in 0..cfg.phase2_vqa_per_scene.min(vqa.len()) {
            train.push(vqa[(i + j) % vqa.len()].clone());
        }
        if i % cfg.phase2_detail_every == 0 {
            train.push(make_detail_sample(s));
        }
    }
    let train = stride_cap(&train, cfg.phase2_max_samples);

    let matching = make_matching_samples(&held_scenes, cfg.seed);
    let tf: Vec<InstructionSample> = matching
        .iter()
        .filter(|m| m.kind == Kind::TrueFalse)
        .cloned()
        .collect();
    let fc: Vec<InstructionSample> = matching
        .iter()
        .filter(|m| m.kind == Kind::FourChoice)
        .cloned()
        .collect();
    let mut held = stride_cap(&tf, cfg.eval_true_false);
    held.extend(stride_cap(&fc, cfg.eval_four_choice));
    let mut topical = Vec::new();
    let mut existence = Vec::new();
    for s in &held_scenes {
        for v in make_vqa_samples(s) {
            if is_topical_vqa(&v) {
                topical.push(v);
            } else {
                existence.push(v);
            }
        }
    }
    held.extend(stride_cap(&topical, cfg.eval_vqa_topical));
    held.extend(stride_cap(&existence, cfg.eval_vqa_existence));
    let details: Vec<InstructionSample> =
        held_scenes.iter().map(make_detail_sample).collect();
    held.extend(stride_cap(&details, cfg.eval_detail));

    Ok(Corpus {
        scenes,
        captions,
        train,
        held,
    })
}

fn data_dir(out: &Path) -> PathBuf {
    out.join(DATA_DIR)
}

/// Generates the corpus and writes it under `out/data/`. Refuses to
/// overwrite an existing non-empty data directory unless `force` is set.
pub fn gen_data(cfg: &PipelineConfig, out: &Path, force: bool) -> Result<DataManifest, PipelineError> {
    let dir = data_dir(out);
    if dir.exists() && dir.read_dir()?.next().is_some() && !force {
        return Err(PipelineError::Contract(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    let corpus = build_corpus(cfg)?;
    std::fs::create_dir_all(&dir)?;
    write_jsonl(&dir.join(SCENES_FILE), &corpus.scenes)?;
    write_jsonl(&dir.join(CAPTIONS_FILE), &corpus.captions)?;
    write_jsonl(&dir.join(TRAIN_FILE), &corpus.train)?;
    write_jsonl(&dir.join(HELD_FILE), &corpus.held)?;
    let manifest = DataManifest {
        seed: cfg.seed,
        scenes: corpus.scenes.len(),
        train_scenes: corpus.scenes.iter().filter(|s| !is_held_out(s.id)).count(),
        held_scenes: corpus.scenes.iter().filter(|s| is_held_out(s.id)).count(),
        captions: corpus.captions.len(),
        train_by_kind: by_kind(&corpus.train),
        held_by_kind: by_kind(&corpus.held),
        held_vqa_topical: corpus.held.iter().filter(|s| is_topical_vqa(s)).count(),
    };
    std::fs::write(
        dir.join(DATA_MANIFEST),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Reads a corpus previously written by [`gen_data`].
pub fn load_data(out: &Path) -> Result<Corpus, PipelineError> {
    let dir = data_dir(out);
    if !dir.join(SCENES_FILE).exists() {
        return Err(PipelineError::Contract(format!(
            "no generated data under {}; run gen-data first",
            dir.display()
        )));
    }
    Ok(Corpus {
        scenes: read_jsonl(&dir.join(SCENES_FILE))?,
        captions: read_jsonl(&dir.join(CAPTIONS_FILE))?,
        train: read_jsonl(&dir.join(TRAIN_FILE))?,
        held: read_jsonl(&dir.join(HELD_FILE))?,
    })
}

/// Every line of text in the run, for vocabulary building: the tokenizer
/// must cover held-out prompts and targets too.
fn all_text(corpus: &Corpus) -> Vec<String> {
    let mut lines = Vec::new();
    for s in corpus
        .captions
        .iter()
        .chain(&corpus.train)
        .chain(&corpus.held)
    {
        if !s.prompt.is_empty() {
            lines.push(s.prompt.clone());
        }
        lines.push(s.target.clone());
    }
    lines
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainManifest {
    pub seed: u64,
    pub vocab_size: usize,
    pub lm_lines: usize,
    pub lm_ppl_curve: Vec<f64>,
    pub lm_checksum: u64,
    pub visual_checksum: u64,
    pub text_checksum: u64,
    pub retrieval_acc: f64,
}

/// Pretrains the three backbones on the train split and writes a complete
/// bundle (plug-in layers at their seeded initialization) under
/// `out/backbones/`. On language-model non-convergence the perplexity
/// curve still lands in `pretrain.json` before the error propagates.
pub fn pretrain(cfg: &PipelineConfig, out: &Path) -> Result<PretrainManifest, PipelineError> {
    let corpus = load_data(out)?;
    let tokenizer = Tokenizer::build(&all_text(&corpus));

    // mixed pretraining text: captions, descriptions and question-answer
    // lines rendered from a slice of train scenes, so the model learns to
    // read a described image as context rather than caption statistics only
    let train_scenes: Vec<&Scene> = corpus
        .scenes
        .iter()
        .filter(|s| !is_held_out(s.id))
        .take(cfg.lm_scenes)
        .collect();
    let mut lines = Vec::new();
    for s in &train_scenes {
        lines.push(pretrain_text(s, &caption_sample(s)));
        lines.push(pretrain_text(s, &make_detail_sample(s)));
        for v in make_vqa_samples(s) {
            lines.push(pretrain_text(s, &v));
        }
    }
    let owned: Vec<Scene> = train_scenes.iter().map(|s| (*s).clone()).collect();
    for m in make_matching_samples(&owned, cfg.seed) {
        let scene = corpus.scene(m.scene_id).expect("matching sample references its scene");
        lines.push(pretrain_text(scene, &m));
    }
    // extra four-choice rounds with fresh distractor draws: each round lists
    // new choices and answer letters for the same scenes, giving the
    // caption-to-letter copy pattern enough coverage to generalize
    for r in 1..8u64 {
        for m in make_matching_samples(&owned, cfg.seed.wrapping_mul(7919).wrapping_add(r)) {
            if m.kind == Kind::FourChoice {
                let scene = corpus.scene(m.scene_id).expect("matching sample references its scene");
                lines.push(pretrain_text(scene, &m));
            }
        }
    }

    let dir = out.join(BACKBONES_DIR);
    std::fs::create_dir_all(&dir)?;
    let lm_cfg = LmPretrainCfg {
        seed: cfg.seed,
        min_epochs: cfg.lm_epochs,
        max_epochs: cfg.lm_epochs,
        ..LmPretrainCfg::default()
    };
    let lm_out = match pretrain_text_lm(&tokenizer, &lines, &lm_cfg) {
        Ok(o) => o,
        Err(BackboneError::LmNotConverged {
            final_ppl,
            target,
            epochs,
            curve,
        }) => {
            // leave the curve behind for post-mortems, then fail
            std::fs::write(
                dir.join(PRETRAIN_MANIFEST),
                serde_json::to_string_pretty(&serde_json::json!({
                    "seed": cfg.seed,
                    "lm_ppl_curve": curve,
                    "error": format!("lm did not converge: ppl {final_ppl:.3} vs target {target:.3} after {epochs} epochs"),
                }))?,
            )?;
            return Err(BackboneError::LmNotConverged {
                final_ppl,
                target,
                epochs,
                curve,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };

    let pairs: Vec<(Scene, String)> = corpus
        .scenes
        .iter()
        .filter(|s| !is_held_out(s.id))
        .map(|s| (s.clone(), crate::data::render_caption(s)))
        .collect();
    let enc_cfg = ContrastiveCfg {
        seed: cfg.seed,
        epochs: cfg.encoder_epochs,
        ..ContrastiveCfg::default()
    };
    let enc = contrastive_pretrain(&tokenizer, &pairs, &enc_cfg)?;

    let bundle = ModelBundle {
        lm: lm_out.lm,
        visual: enc.visual,
        text: enc.text,
        ipn: crate::model::IpnParams::init(&mut crate::rng::substream(cfg.seed, "init-ipn")),
        tokenizer,
    };
    let content_ids: Vec<usize> = crate::data::Color::ALL
        .iter()
        .map(|c| c.word())
        .chain(crate::data::Shape::ALL.iter().map(|s| s.word()))
        .map(|w| {
            bundle
                .tokenizer
                .tokenize(w)
                .expect("caption vocabulary is in the tokenizer")[0]
        })
        .collect();
    let h_i_norm = {
        let tape = crate::tensor::Tape::no_grad();
        let sample: Vec<&Scene> = corpus
            .scenes
            .iter()
            .filter(|s| !is_held_out(s.id))
            .take(64)
            .collect();
        let total: f64 = sample
            .iter()
            .map(|s| {
                let h = bundle.visual.encode_image(&tape, s).expect("encode train scene");
                h.to_f32_vec().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
            })
            .sum();
        total / sample.len() as f64
    };
    bundle
        .ipn
        .center_projections(&bundle.lm, &bundle.text, &content_ids, h_i_norm);
    save_bundle(&dir, &bundle)?;
    let manifest = PretrainManifest {
        seed: cfg.seed,
        vocab_size: bundle.tokenizer.vocab_size(),
        lm_lines: lines.len(),
        lm_ppl_curve: lm_out.ppl_curve,
        lm_checksum: lm_out.checksum,
        visual_checksum: enc.visual_checksum,
        text_checksum: enc.text_checksum,
        retrieval_acc: enc.retrieval_acc,
    };
    std::fs::write(
        dir.join(PRETRAIN_MANIFEST),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Outcome of one training phase, with the freeze audit made explicit.
#[derive(Debug)]
pub struct PhaseOutcome {
    pub records: Vec<LossRecord>,
    pub frozen_before: [u64; 3],
    pub frozen_after: [u64; 3],
}

fn require_dir(out: &Path, sub: &str, hint: &str) -> Result<PathBuf, PipelineError> {
    let dir = out.join(sub);
    if !dir.join(crate::bundle::WEIGHTS_FILE).exists() {
        return Err(PipelineError::Contract(format!(
            "no checkpoint under {}; run {hint} first",
            dir.display()
        )));
    }
    Ok(dir)
}

/// Phase 1 over the generated captions, starting from the pretrained
/// backbones; writes `out/phase1/`.
pub fn train_phase1(cfg: &PipelineConfig, out: &Path) -> Result<PhaseOutcome, PipelineError> {
    let corpus = load_data(out)?;
    let src = require_dir(out, BACKBONES_DIR, "pretrain")?;
    let (bundle, report) = load_bundle(&src, cfg.seed)?;
    let frozen_before = report.frozen_checksums;
    let records = phase1_train(
        &bundle,
        &corpus.scenes,
        &corpus.captions,
        &cfg.phase1_train_config(),
    )?;
    let frozen_after = bundle.frozen_checksums();
    if frozen_after != frozen_before {
        return Err(TrainError::FrozenDrift("backbone checksum after phase 1".into()).into());
    }
    let dir = out.join(PHASE1_DIR);
    save_bundle(&dir, &bundle)?;
    write_train_log(&dir.join(TRAIN_LOG), &records)?;
    Ok(PhaseOutcome {
        records,
        frozen_before,
        frozen_after,
    })
}

/// Phase 2 over the mixed instruction data, starting from the phase-1
/// checkpoint (refused if that is missing); writes `out/phase2/`.
pub fn train_phase2(cfg: &PipelineConfig, out: &Path) -> Result<PhaseOutcome, PipelineError> {
    let corpus = load_data(out)?;
    let src = require_dir(out, PHASE1_DIR, "train --phase 1")?;
    let (bundle, report) = load_bundle(&src, cfg.seed)?;
    let frozen_before = report.frozen_checksums;
    let records = phase2_train(
        &bundle,
        &corpus.scenes,
        &corpus.train,
        &cfg.phase2_train_config(),
    )?;
    let frozen_after = bundle.frozen_checksums();
    if frozen_after != frozen_before {
        return Err(TrainError::FrozenDrift("backbone checksum after phase 2".into()).into());
    }
    let dir = out.join(PHASE2_DIR);
    save_bundle(&dir, &bundle)?;
    write_train_log(&dir.join(TRAIN_LOG), &records)?;
    Ok(PhaseOutcome {
        records,
        frozen_before,
        frozen_after,
    })
}

/// Evaluates one sample set against a bundle. Decode settings depend only
/// on the sample kind and the passed configuration, never on the mode, so
/// the two modes are compared under identical conditions.
pub fn eval_samples(
    cfg: &PipelineConfig,
    bundle: &ModelBundle<f32>,
    corpus: &Corpus,
    samples: &[InstructionSample],
    mode: AnswerMode,
    beam_override: Option<usize>,
) -> Result<EvalReport, PipelineError> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let scene = corpus
            .scene(s.scene_id)
            .ok_or(TrainError::MissingScene(s.scene_id))?;
        let (beam, max_len) = match s.kind {
            Kind::Detail => (cfg.beam_detail, cfg.max_detail_answer),
            _ => (cfg.beam_short, cfg.max_short_answer),
        };
        let beam = beam_override.unwrap_or(beam);
        let a = answer(bundle, scene, &s.prompt, mode, beam, max_len)?;
        rows.push(EvalRow {
            kind: s.kind,
            scene_id: s.scene_id,
            prompt: s.prompt.clone(),
            target: s.target.clone(),
            hypothesis: a.text.clone(),
            em: exact_match(&a.text, &s.target),
        });
    }
    let mode_name = match mode {
        AnswerMode::Ipn => "ipn",
        AnswerMode::Static => "static",
    };
    Ok(EvalReport::from_rows(mode_name, rows))
}

/// Evaluates the held-out split against the phase-2 checkpoint and writes
/// `report_<mode>.json` plus a per-example CSV under `out/eval/`.
pub fn evaluate(
    cfg: &PipelineConfig,
    out: &Path,
    mode: AnswerMode,
    beam_override: Option<usize>,
) -> Result<EvalReport, PipelineError> {
    let corpus = load_data(out)?;
    let src = require_dir(out, PHASE2_DIR, "train --phase 2")?;
    let (bundle, _) = load_bundle(&src, cfg.seed)?;
    let report = eval_samples(cfg, &bundle, &corpus, &corpus.held, mode, beam_override)?;
    let dir = out.join(EVAL_DIR);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(
        dir.join(format!("report_{}.json", report.mode)),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(dir.join(format!("rows_{}.csv", report.mode)), report.rows_csv())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(seed: u64) -> PipelineConfig {
        PipelineConfig {
            seed,
            scenes: 120,
            lm_scenes: 40,
            lm_epochs: 1,
            encoder_epochs: 1,
            phase1_captions: 60,
            phase1_epochs: 1,
            phase2_epochs: 1,
            phase2_max_samples: 80,
            eval_true_false: 20,
            eval_four_choice: 10,
            eval_vqa_topical: 30,
            eval_vqa_existence: 10,
            eval_detail: 4,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn corpus_splits_are_disjoint_and_counted() {
        let cfg = tiny_config(3);
        let corpus = build_corpus(&cfg).unwrap();
        // no scene appears on both sides
        for s in corpus.captions.iter().chain(&corpus.train) {
            assert!(!is_held_out(s.scene_id), "train item on held-out scene");
        }
        for s in &corpus.held {
            assert!(is_held_out(s.scene_id), "eval item on train scene");
        }
        assert_eq!(corpus.captions.len(), 60);
        assert!(corpus.train.len() <= 80);
        // caps respected per kind
        let tf = corpus.held.iter().filter(|s| s.kind == Kind::TrueFalse).count();
        assert!(tf <= 20 && tf > 0);
    }

    #[test]
    fn stride_cap_preserves_order_and_length() {
        let items: Vec<usize> = (0..100).collect();
        let kept = stride_cap(&items, 30);
        assert_eq!(kept.len(), 30);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(stride_cap(&items, 200), items);
    }

    #[test]
    fn gen_data_round_trips_and_respects_force() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(5);
        let manifest = gen_data(&cfg, dir.path(), false).unwrap();
        assert_eq!(manifest.scenes, 120);
        assert!(manifest.held_vqa_topical > 0);
        let corpus = load_data(dir.path()).unwrap();
        assert_eq!(corpus.scenes.len(), 120);
        assert_eq!(corpus.held.len(), manifest.held_by_kind.values().sum::<usize>());
        // second run without force refuses; with force succeeds
        assert!(matches!(
            gen_data(&cfg, dir.path(), false),
            Err(PipelineError::Contract(_))
        ));
        gen_data(&cfg, dir.path(), true).unwrap();
    }

    #[test]
    fn phases_refuse_out_of_order_runs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(7);
        gen_data(&cfg, dir.path(), false).unwrap();
        assert!(matches!(
            train_phase1(&cfg, dir.path()),
            Err(PipelineError::Contract(_))
        ));
        assert!(matches!(
            train_phase2(&cfg, dir.path()),
            Err(PipelineError::Contract(_))
        ));
        assert!(matches!(
            evaluate(&cfg, dir.path(), AnswerMode::Ipn, None),
            Err(PipelineError::Contract(_))
        ));
    }
}
