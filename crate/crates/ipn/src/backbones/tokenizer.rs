//! Word-level whitespace tokenizer over the closed toy vocabulary.

use std::collections::HashMap;
use std::path::Path;

use super::BackboneError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const IMG: usize = 4;
pub const IMGD: usize = 5;

pub const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<sep>", "<img>", "<img-d>"];

/// Word → id map plus its inverse. Ids 0..6 are the special tokens; plain
/// text never tokenizes to a special id.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
}

impl Tokenizer {
    /// Builds the vocabulary from every whitespace word in `texts`,
    /// specials first, then words sorted for a stable id assignment.
    pub fn build(texts: &[String]) -> Tokenizer {
        let mut words: Vec<String> = texts
            .iter()
            .flat_map(|t| t.split_whitespace())
            .filter(|w| !SPECIALS.contains(w))
            .map(|w| w.to_string())
            .collect();
        words.sort();
        words.dedup();
        let mut id_to_word: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_word.extend(words);
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Tokenizer {
            word_to_id,
            id_to_word,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.id_to_word.len()
    }

    /// Ids for plain text; special-token spellings are rejected rather than
    /// mapped so text can never smuggle protocol tokens in.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, BackboneError> {
        text.split_whitespace()
            .map(|w| {
                if SPECIALS.contains(&w) {
                    return Err(BackboneError::UnknownToken(w.to_string()));
                }
                self.word_to_id
                    .get(w)
                    .copied()
                    .ok_or_else(|| BackboneError::UnknownToken(w.to_string()))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String, BackboneError> {
        let words: Result<Vec<&str>, _> = ids
            .iter()
            .map(|&id| {
                self.id_to_word
                    .get(id)
                    .map(|s| s.as_str())
                    .ok_or(BackboneError::UnknownId(id, self.vocab_size()))
            })
            .collect();
        Ok(words?.join(" "))
    }

    /// One token per line; line number = id.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.id_to_word.join("\n") + "\n")
    }

    pub fn load(path: &Path) -> Result<Tokenizer, BackboneError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackboneError::BadVocabFile(e.to_string()))?;
        let id_to_word: Vec<String> = raw.lines().map(|l| l.to_string()).collect();
        for (i, spec) in SPECIALS.iter().enumerate() {
            if id_to_word.get(i).map(|s| s.as_str()) != Some(*spec) {
                return Err(BackboneError::BadVocabFile(format!(
                    "expected special '{spec}' at line {i}"
                )));
            }
        }
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Tokenizer {
            word_to_id,
            id_to_word,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        Tokenizer::build(&[
            "a red circle and a blue square".into(),
            "is this caption correct : true false".into(),
        ])
    }

    #[test]
    fn round_trip_identity_on_in_vocab_text() {
        let tok = toy();
        let text = "a blue circle and a red square";
        let ids = tok.tokenize(text).unwrap();
        assert_eq!(tok.detokenize(&ids).unwrap(), text);
    }

    #[test]
    fn plain_text_never_yields_special_ids() {
        let tok = toy();
        let ids = tok.tokenize("a red circle").unwrap();
        assert!(ids.iter().all(|&id| id >= SPECIALS.len()));
        assert!(tok.tokenize("<img> red").is_err());
    }

    #[test]
    fn unknown_word_is_an_error() {
        let tok = toy();
        assert!(matches!(
            tok.tokenize("a purple circle"),
            Err(BackboneError::UnknownToken(w)) if w == "purple"
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let tok = toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        tok.save(&path).unwrap();
        let loaded = Tokenizer::load(&path).unwrap();
        assert_eq!(loaded.vocab_size(), tok.vocab_size());
        assert_eq!(
            loaded.tokenize("true false").unwrap(),
            tok.tokenize("true false").unwrap()
        );
        // corrupting the specials header is detected
        std::fs::write(&path, "a\nb\nc\n").unwrap();
        assert!(Tokenizer::load(&path).is_err());
    }
}
