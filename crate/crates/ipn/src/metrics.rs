//! Evaluation measures: exact match for short answers, BLEU / ROUGE /
//! CIDEr / METEOR for long answers and descriptions.
//!
//! Everything here is a pure function of its text inputs; CIDEr carries
//! document-frequency statistics built once over the evaluation reference
//! set.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Kind;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("cider needs at least 2 reference documents, got {0}")]
    CorpusTooSmall(usize),
}

/// Surface normalization shared by exact match: lowercase, strip
/// punctuation, collapse whitespace, drop articles.
pub fn normalize_text(s: &str) -> String {
    let lowered = s.to_lowercase();
    let stripped: String = lowered
        .chars()
        .map(|c| if c.is_alphanumeric() || c == ' ' { c } else { ' ' })
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// 1 iff the normalized strings are equal.
pub fn exact_match(hypothesis: &str, reference: &str) -> u8 {
    (normalize_text(hypothesis) == normalize_text(reference)) as u8
}

fn tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut map = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *map.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    map
}

/// BLEU with clipped modified n-gram precision, geometric mean up to `n`,
/// and the brevity penalty. `n` is 1 or 2 in the evaluation harness.
pub fn bleu_n(hypothesis: &str, references: &[&str], n: usize) -> f64 {
    let hyp = tokens(hypothesis);
    if hyp.is_empty() {
        return 0.0;
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokens(r)).collect();
    let mut log_sum = 0.0;
    for k in 1..=n {
        let hyp_counts = ngram_counts(&hyp, k);
        let total: usize = hyp_counts.values().sum();
        if total == 0 {
            return 0.0;
        }
        let mut clipped = 0usize;
        for (gram, &count) in &hyp_counts {
            let max_ref = refs
                .iter()
                .map(|r| ngram_counts(r, k).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(max_ref);
        }
        if clipped == 0 {
            return 0.0;
        }
        log_sum += (clipped as f64 / total as f64).ln();
    }
    let precision = (log_sum / n as f64).exp();
    // effective reference length: closest to the hypothesis, shorter on ties
    let c = hyp.len() as f64;
    let r = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| ((len as f64 - c).abs() * 1e6) as i64 * 2 + (len > hyp.len()) as i64)
        .unwrap_or(0) as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * precision
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    /// Unigram overlap F1.
    One,
    /// Longest-common-subsequence F1.
    L,
}

pub fn rouge(hypothesis: &str, reference: &str, variant: RougeVariant) -> f64 {
    let hyp = tokens(hypothesis);
    let rf = tokens(reference);
    if hyp.is_empty() || rf.is_empty() {
        return 0.0;
    }
    let overlap = match variant {
        RougeVariant::One => {
            let hc = ngram_counts(&hyp, 1);
            let rc = ngram_counts(&rf, 1);
            hc.iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>()
        }
        RougeVariant::L => lcs_len(&hyp, &rf),
    };
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp.len() as f64;
    let r = overlap as f64 / rf.len() as f64;
    2.0 * p * r / (p + r)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// CIDEr document-frequency statistics over the evaluation reference set.
pub struct CiderStats {
    doc_freq: [HashMap<Vec<String>, f64>; 4],
    n_docs: f64,
}

impl CiderStats {
    /// Builds idf statistics; each reference document counts an n-gram at
    /// most once.
    pub fn new(reference_docs: &[&str]) -> Result<CiderStats, MetricError> {
        if reference_docs.len() < 2 {
            return Err(MetricError::CorpusTooSmall(reference_docs.len()));
        }
        let mut doc_freq: [HashMap<Vec<String>, f64>; 4] = Default::default();
        for doc in reference_docs {
            let toks = tokens(doc);
            for n in 1..=4 {
                for gram in ngram_counts(&toks, n).keys() {
                    *doc_freq[n - 1].entry(gram.clone()).or_insert(0.0) += 1.0;
                }
            }
        }
        Ok(CiderStats {
            doc_freq,
            n_docs: reference_docs.len() as f64,
        })
    }

    fn tfidf(&self, toks: &[String], n: usize) -> HashMap<Vec<String>, f64> {
        let counts = ngram_counts(toks, n);
        let total: usize = counts.values().sum();
        let mut vec = HashMap::new();
        if total == 0 {
            return vec;
        }
        for (gram, count) in counts {
            let df = self.doc_freq[n - 1].get(&gram).copied().unwrap_or(0.0);
            let idf = (self.n_docs / df.max(1.0)).ln();
            vec.insert(gram, (count as f64 / total as f64) * idf);
        }
        vec
    }
}

fn cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &x)| b.get(g).map(|&y| x * y))
        .sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// CIDEr: mean over n = 1..4 of tf-idf cosine similarity, times 10.
pub fn cider(hypothesis: &str, references: &[&str], stats: &CiderStats) -> f64 {
    let hyp = tokens(hypothesis);
    let mut total = 0.0;
    for n in 1..=4 {
        let hv = stats.tfidf(&hyp, n);
        let mut sim = 0.0;
        for r in references {
            let rv = stats.tfidf(&tokens(r), n);
            sim += cosine(&hv, &rv);
        }
        total += sim / references.len() as f64;
    }
    10.0 * total / 4.0
}

/// METEOR in its exact-unigram-match configuration: harmonic mean with
/// recall weight 0.9 and fragmentation penalty 0.5 * (chunks / matches)^3.
pub fn meteor_simplified(hypothesis: &str, reference: &str) -> f64 {
    let hyp = tokens(hypothesis);
    let rf = tokens(reference);
    if hyp.is_empty() || rf.is_empty() {
        return 0.0;
    }
    // one-to-one alignment: each hypothesis token takes the leftmost unused
    // identical reference token
    let mut used = vec![false; rf.len()];
    let mut align: Vec<Option<usize>> = Vec::with_capacity(hyp.len());
    for w in &hyp {
        let slot = rf
            .iter()
            .enumerate()
            .position(|(j, r)| !used[j] && r == w);
        if let Some(j) = slot {
            used[j] = true;
        }
        align.push(slot);
    }
    let m = align.iter().flatten().count();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 0usize;
    let mut prev: Option<usize> = None;
    for a in &align {
        match (*a, prev) {
            (Some(j), Some(p)) if j == p + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *a;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / rf.len() as f64;
    let f = p * r / (0.9 * r + 0.1 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

// ---- evaluation report --------------------------------------------------

/// One evaluated example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub kind: Kind,
    pub scene_id: u64,
    pub prompt: String,
    pub target: String,
    pub hypothesis: String,
    pub em: u8,
}

/// Per-kind aggregate block.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KindStats {
    pub count: usize,
    pub em: f64,
}

/// Aggregate scores plus the per-example rows they are recomputable from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub kinds: Vec<(Kind, KindStats)>,
    pub em: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub rouge1: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub meteor: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Aggregates rows: EM over everything, generative metrics over the
    /// generative kinds (vqa and detail), CIDEr idf over the reference set
    /// itself.
    pub fn from_rows(mode: &str, rows: Vec<EvalRow>) -> EvalReport {
        let mut kinds: Vec<(Kind, KindStats)> = Vec::new();
        for row in &rows {
            let entry = match kinds.iter_mut().find(|(k, _)| *k == row.kind) {
                Some((_, s)) => s,
                None => {
                    kinds.push((row.kind, KindStats::default()));
                    &mut kinds.last_mut().unwrap().1
                }
            };
            entry.count += 1;
            entry.em += row.em as f64;
        }
        for (_, s) in kinds.iter_mut() {
            if s.count > 0 {
                s.em /= s.count as f64;
            }
        }
        let em = if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| r.em as f64).sum::<f64>() / rows.len() as f64
        };
        let gen_rows: Vec<EvalRow> = rows
            .iter()
            .filter(|r| matches!(r.kind, Kind::Vqa | Kind::Detail))
            .cloned()
            .collect();
        let mut report = EvalReport {
            mode: mode.to_string(),
            kinds,
            em,
            bleu1: 0.0,
            bleu2: 0.0,
            rouge1: 0.0,
            rouge_l: 0.0,
            cider: 0.0,
            meteor: 0.0,
            rows,
        };
        if gen_rows.is_empty() {
            return report;
        }
        let refs: Vec<&str> = gen_rows.iter().map(|r| r.target.as_str()).collect();
        let stats = CiderStats::new(&refs).ok();
        let n = gen_rows.len() as f64;
        for row in &gen_rows {
            let refs = [row.target.as_str()];
            report.bleu1 += bleu_n(&row.hypothesis, &refs, 1);
            report.bleu2 += bleu_n(&row.hypothesis, &refs, 2);
            report.rouge1 += rouge(&row.hypothesis, &row.target, RougeVariant::One);
            report.rouge_l += rouge(&row.hypothesis, &row.target, RougeVariant::L);
            report.meteor += meteor_simplified(&row.hypothesis, &row.target);
            if let Some(stats) = &stats {
                report.cider += cider(&row.hypothesis, &refs, stats);
            }
        }
        for v in [
            &mut report.bleu1,
            &mut report.bleu2,
            &mut report.rouge1,
            &mut report.rouge_l,
            &mut report.cider,
            &mut report.meteor,
        ] {
            *v /= n;
        }
        report
    }

    /// Flat CSV of the per-example rows.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("kind,scene_id,em,prompt,target,hypothesis\n");
        for r in &self.rows {
            let esc = |s: &str| s.replace(',', ";");
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.kind,
                r.scene_id,
                r.em,
                esc(&r.prompt),
                esc(&r.target),
                esc(&r.hypothesis)
            ));
        }
        out
    }
}
