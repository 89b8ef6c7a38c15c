//! Single operator binary: data generation, backbone pretraining, the two
//! training phases, evaluation, one-off answering and gradient checking.
//!
//! Exit codes: 0 success, 1 contract or usage error, 2 a quality threshold
//! was not met (pretraining convergence, gradient check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ipn::backbones::BackboneError;
use ipn::config::{apply_file, resolved_text};
use ipn::decode::{answer, AnswerMode};
use ipn::gradcheck::run_gradcheck;
use ipn::pipeline::{
    evaluate, gen_data, load_data, pretrain, train_phase1, train_phase2, PipelineConfig,
    PipelineError, PHASE2_DIR,
};

const EXIT_CONTRACT: u8 = 1;
const EXIT_THRESHOLD: u8 = 2;

#[derive(Parser)]
#[command(
    name = "ipn",
    about = "Interactive perception plug-in around frozen toy backbones",
    version
)]
struct Cli {
    /// Run configuration file (`key = value`, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory all artifacts live under.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the scene corpus and instruction data under <out>/data.
    GenData {
        /// Overwrite an existing non-empty data directory.
        #[arg(long)]
        force: bool,
    },
    /// Pretrain and freeze the language model and both encoders.
    Pretrain,
    /// Run one training phase from the previous stage's checkpoint.
    Train {
        /// 1 = feature alignment on captions, 2 = interaction layers.
        #[arg(long)]
        phase: u8,
    },
    /// Evaluate the phase-2 checkpoint on the held-out split.
    Eval {
        /// ipn (two-pass) or static (first-pass information only).
        #[arg(long, default_value = "ipn")]
        mode: AnswerMode,
        /// Beam width for every kind; default is 1, 5 for descriptions.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Answer one query about one generated scene.
    Answer {
        /// Scene id from data/scenes.jsonl (a zero-based index works too).
        #[arg(long)]
        scene_id: u64,
        /// The query text, e.g. "how many circles are there ?".
        query: String,
        #[arg(long, default_value = "ipn")]
        mode: AnswerMode,
        #[arg(long)]
        beam: Option<usize>,
        /// Print intermediate vector norms of the two-pass protocol.
        #[arg(long)]
        trace: bool,
    },
    /// Verify analytic gradients of both phase losses in 64-bit.
    Gradcheck,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            return ExitCode::from(EXIT_CONTRACT);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Threshold misses are acceptance failures (2); everything else that errors
/// is a contract problem (1).
fn exit_code_for(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Backbone(
            BackboneError::LmNotConverged { .. } | BackboneError::RetrievalBelowThreshold { .. },
        ) => EXIT_THRESHOLD,
        _ => EXIT_CONTRACT,
    }
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &cli.config {
        apply_file(&mut cfg, path).map_err(|e| PipelineError::Contract(e.to_string()))?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Echoes every effective value into the run directory; the run is
/// reproducible from this file plus the command line.
fn echo_resolved(cli: &Cli, cfg: &PipelineConfig) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join("resolved-config.txt"), resolved_text(cfg))?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, PipelineError> {
    let cfg = build_config(&cli)?;
    echo_resolved(&cli, &cfg)?;
    let out = cli.out.clone();
    match cli.cmd {
        Cmd::GenData { force } => {
            let m = gen_data(&cfg, &out, force)?;
            println!(
                "generated {} scenes ({} train / {} held out), {} captions",
                m.scenes, m.train_scenes, m.held_scenes, m.captions
            );
            println!("train mix: {:?}", m.train_by_kind);
            println!(
                "held-out mix: {:?} ({} query-dependent questions)",
                m.held_by_kind, m.held_vqa_topical
            );
        }
        Cmd::Pretrain => {
            let m = pretrain(&cfg, &out)?;
            println!(
                "language model: {} lines, vocabulary {}, held-out perplexity {:.3}, checksum {:016x}",
                m.lm_lines,
                m.vocab_size,
                m.lm_ppl_curve.last().copied().unwrap_or(f64::NAN),
                m.lm_checksum
            );
            println!(
                "encoders: retrieval accuracy {:.3}, checksums {:016x} / {:016x}",
                m.retrieval_acc, m.visual_checksum, m.text_checksum
            );
        }
        Cmd::Train { phase } => {
            let outcome = match phase {
                1 => train_phase1(&cfg, &out)?,
                2 => train_phase2(&cfg, &out)?,
                other => {
                    return Err(PipelineError::Contract(format!(
                        "--phase must be 1 or 2, got {other}"
                    )))
                }
            };
            let first = outcome.records.first().map(|r| r.loss).unwrap_or(f64::NAN);
            let last = outcome.records.last().map(|r| r.loss).unwrap_or(f64::NAN);
            println!(
                "phase {phase}: {} steps, loss {first:.4} -> {last:.4}",
                outcome.records.len()
            );
            println!(
                "frozen checksums held: {:016x?} before and after",
                outcome.frozen_after
            );
        }
        Cmd::Eval { mode, beam } => {
            let report = evaluate(&cfg, &out, mode, beam)?;
            println!("mode {}: exact match {:.4} over {} items", report.mode, report.em, report.rows.len());
            for (kind, stats) in &report.kinds {
                println!("  {kind}: em {:.4} (n={})", stats.em, stats.count);
            }
            println!(
                "  bleu1 {:.4} bleu2 {:.4} rouge1 {:.4} rougeL {:.4} cider {:.4} meteor {:.4}",
                report.bleu1, report.bleu2, report.rouge1, report.rouge_l, report.cider, report.meteor
            );
        }
        Cmd::Answer {
            scene_id,
            query,
            mode,
            beam,
            trace,
        } => {
            let corpus = load_data(&out)?;
            let scene = corpus
                .scene(scene_id)
                .or_else(|| corpus.scenes.get(scene_id as usize))
                .ok_or_else(|| {
                    PipelineError::Contract(format!(
                        "unknown scene id {scene_id}; valid indices are 0..{} (ids in {}/data/scenes.jsonl)",
                        corpus.scenes.len(),
                        out.display()
                    ))
                })?;
            let src = out.join(PHASE2_DIR);
            if !src.join(ipn::bundle::WEIGHTS_FILE).exists() {
                return Err(PipelineError::Contract(format!(
                    "no checkpoint under {}; run train --phase 2 first",
                    src.display()
                )));
            }
            let (bundle, _) = ipn::bundle::load_bundle(&src, cfg.seed)?;
            let beam = beam.unwrap_or(cfg.beam_short);
            let a = answer(&bundle, scene, &query, mode, beam, cfg.max_short_answer)?;
            if trace {
                let show = |v: Option<f64>| {
                    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into())
                };
                println!("h_r norm: {}", show(a.trace.h_r_norm));
                println!("h_R norm: {}", show(a.trace.h_req_norm));
                println!("h_d norm: {}", show(a.trace.h_d_norm));
            }
            println!(
                "score {:.4} over {} tokens",
                a.result.score(),
                a.result.tokens.len()
            );
            println!("{}", a.text);
        }
        Cmd::Gradcheck => {
            let report = run_gradcheck(cfg.seed, 12)?;
            let mut failed: Option<String> = None;
            for g in &report.groups {
                println!(
                    "phase {} group {:10} max rel err {:.3e} {}",
                    g.phase,
                    g.group,
                    g.max_rel_err(),
                    if g.passed() { "pass" } else { "FAIL" }
                );
                if !g.passed() && failed.is_none() {
                    failed = Some(format!("phase {} group {}", g.phase, g.group));
                }
            }
            println!("{} entries checked", report.entries_checked);
            if let Some(which) = failed {
                eprintln!("gradient check failed: {which}");
                return Ok(ExitCode::from(EXIT_THRESHOLD));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
