//! Plain-text run configuration: one `key = value` per line, `#` starts a
//! comment, keys match [`PipelineConfig`] field names. Every effective
//! value — default, file, or flag — is echoed back out via
//! [`resolved_text`], so a run is reproducible from that file alone.

use std::path::Path;

use thiserror::Error;

use crate::pipeline::PipelineConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got '{text}'")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key '{key}' rejects value '{value}': {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
}

/// `(key, value)` pairs in file order, comments and blank lines removed.
pub fn parse_kv(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let (k, v) = stripped.split_once('=').ok_or(ConfigError::Malformed {
            line,
            text: stripped.to_string(),
        })?;
        out.push((line, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn set_field(
    cfg: &mut PipelineConfig,
    line: usize,
    key: &str,
    value: &str,
) -> Result<(), ConfigError> {
    macro_rules! parse {
        ($ty:ty) => {
            value
                .parse::<$ty>()
                .map_err(|e| ConfigError::BadValue {
                    line,
                    key: key.to_string(),
                    value: value.to_string(),
                    reason: e.to_string(),
                })?
        };
    }
    match key {
        "seed" => cfg.seed = parse!(u64),
        "scenes" => cfg.scenes = parse!(usize),
        "lm_scenes" => cfg.lm_scenes = parse!(usize),
        "lm_epochs" => cfg.lm_epochs = parse!(usize),
        "encoder_epochs" => cfg.encoder_epochs = parse!(usize),
        "phase1_captions" => cfg.phase1_captions = parse!(usize),
        "phase1_lr" => cfg.phase1_lr = parse!(f64),
        "phase1_epochs" => cfg.phase1_epochs = parse!(usize),
        "phase1_batch" => cfg.phase1_batch = parse!(usize),
        "phase2_lr" => cfg.phase2_lr = parse!(f64),
        "phase2_epochs" => cfg.phase2_epochs = parse!(usize),
        "phase2_batch" => cfg.phase2_batch = parse!(usize),
        "phase2_vqa_per_scene" => cfg.phase2_vqa_per_scene = parse!(usize),
        "phase2_detail_every" => cfg.phase2_detail_every = parse!(usize),
        "phase2_max_samples" => cfg.phase2_max_samples = parse!(usize),
        "eval_true_false" => cfg.eval_true_false = parse!(usize),
        "eval_four_choice" => cfg.eval_four_choice = parse!(usize),
        "eval_vqa_topical" => cfg.eval_vqa_topical = parse!(usize),
        "eval_vqa_existence" => cfg.eval_vqa_existence = parse!(usize),
        "eval_detail" => cfg.eval_detail = parse!(usize),
        "beam_short" => cfg.beam_short = parse!(usize),
        "beam_detail" => cfg.beam_detail = parse!(usize),
        "max_short_answer" => cfg.max_short_answer = parse!(usize),
        "max_detail_answer" => cfg.max_detail_answer = parse!(usize),
        _ => {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            })
        }
    }
    Ok(())
}

/// Applies a config file over `cfg` in place.
pub fn apply_file(cfg: &mut PipelineConfig, path: &Path) -> Result<(), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for (line, key, value) in parse_kv(&text)? {
        set_field(cfg, line, &key, &value)?;
    }
    Ok(())
}

/// The full effective configuration as a config file that reproduces it.
pub fn resolved_text(cfg: &PipelineConfig) -> String {
    format!(
        "seed = {}\n\
         scenes = {}\n\
         lm_scenes = {}\n\
         lm_epochs = {}\n\
         encoder_epochs = {}\n\
         phase1_captions = {}\n\
         phase1_lr = {}\n\
         phase1_epochs = {}\n\
         phase1_batch = {}\n\
         phase2_lr = {}\n\
         phase2_epochs = {}\n\
         phase2_batch = {}\n\
         phase2_vqa_per_scene = {}\n\
         phase2_detail_every = {}\n\
         phase2_max_samples = {}\n\
         eval_true_false = {}\n\
         eval_four_choice = {}\n\
         eval_vqa_topical = {}\n\
         eval_vqa_existence = {}\n\
         eval_detail = {}\n\
         beam_short = {}\n\
         beam_detail = {}\n\
         max_short_answer = {}\n\
         max_detail_answer = {}\n",
        cfg.seed,
        cfg.scenes,
        cfg.lm_scenes,
        cfg.lm_epochs,
        cfg.encoder_epochs,
        cfg.phase1_captions,
        cfg.phase1_lr,
        cfg.phase1_epochs,
        cfg.phase1_batch,
        cfg.phase2_lr,
        cfg.phase2_epochs,
        cfg.phase2_batch,
        cfg.phase2_vqa_per_scene,
        cfg.phase2_detail_every,
        cfg.phase2_max_samples,
        cfg.eval_true_false,
        cfg.eval_four_choice,
        cfg.eval_vqa_topical,
        cfg.eval_vqa_existence,
        cfg.eval_detail,
        cfg.beam_short,
        cfg.beam_detail,
        cfg.max_short_answer,
        cfg.max_detail_answer,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_overrides() {
        let mut cfg = PipelineConfig::default();
        let text = "\n# a comment\n  seed = 9   # trailing comment\nphase1_lr = 0.01\n";
        for (line, k, v) in parse_kv(text).unwrap() {
            set_field(&mut cfg, line, &k, &v).unwrap();
        }
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.phase1_lr, 0.01);
        // untouched fields keep their defaults
        assert_eq!(cfg.scenes, PipelineConfig::default().scenes);
    }

    #[test]
    fn unknown_key_and_bad_value_are_errors_with_line_numbers() {
        let mut cfg = PipelineConfig::default();
        let kv = parse_kv("bogus = 1").unwrap();
        assert!(matches!(
            set_field(&mut cfg, kv[0].0, &kv[0].1, &kv[0].2),
            Err(ConfigError::UnknownKey { line: 1, .. })
        ));
        let kv = parse_kv("\nseed = banana").unwrap();
        assert!(matches!(
            set_field(&mut cfg, kv[0].0, &kv[0].1, &kv[0].2),
            Err(ConfigError::BadValue { line: 2, .. })
        ));
        assert!(matches!(
            parse_kv("just words"),
            Err(ConfigError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn resolved_text_round_trips_exactly() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 1234;
        cfg.phase2_lr = 3e-3;
        cfg.eval_detail = 7;
        let text = resolved_text(&cfg);
        let mut back = PipelineConfig::default();
        for (line, k, v) in parse_kv(&text).unwrap() {
            set_field(&mut back, line, &k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }
}
