//! Fixture parity: every metric must reproduce the frozen scores in
//! tests/fixtures/metrics_fixture.json (computed once by an independent
//! script, tools/metrics_oracle.py) to 1e-6.

use ipn::metrics::{
    bleu_n, cider, exact_match, meteor_simplified, rouge, CiderStats, RougeVariant,
};
use serde::Deserialize;

#[derive(Deserialize)]
struct FixtureRow {
    hyp: String,
    r#ref: String,
    em: u8,
    bleu1: f64,
    bleu2: f64,
    rouge1: f64,
    rouge_l: f64,
    cider: f64,
    meteor: f64,
}

#[test]
fn fixture_scores_match_frozen_oracle_values() {
    let raw = include_str!("fixtures/metrics_fixture.json");
    let rows: Vec<FixtureRow> = serde_json::from_str(raw).unwrap();
    assert_eq!(rows.len(), 20, "fixture must hold 20 pairs");

    let refs: Vec<&str> = rows.iter().map(|r| r.r#ref.as_str()).collect();
    let stats = CiderStats::new(&refs).unwrap();

    let close = |got: f64, want: f64, name: &str, i: usize| {
        assert!(
            (got - want).abs() <= 1e-6,
            "pair {i} {name}: got {got}, fixture {want}"
        );
    };
    for (i, row) in rows.iter().enumerate() {
        let refs = [row.r#ref.as_str()];
        assert_eq!(exact_match(&row.hyp, &row.r#ref), row.em, "pair {i} em");
        close(bleu_n(&row.hyp, &refs, 1), row.bleu1, "bleu1", i);
        close(bleu_n(&row.hyp, &refs, 2), row.bleu2, "bleu2", i);
        close(rouge(&row.hyp, &row.r#ref, RougeVariant::One), row.rouge1, "rouge1", i);
        close(rouge(&row.hyp, &row.r#ref, RougeVariant::L), row.rouge_l, "rouge_l", i);
        close(cider(&row.hyp, &refs, &stats), row.cider, "cider", i);
        close(meteor_simplified(&row.hyp, &row.r#ref), row.meteor, "meteor", i);
    }
}

#[test]
fn fixture_contains_the_hand_derived_cases() {
    let raw = include_str!("fixtures/metrics_fixture.json");
    let rows: Vec<FixtureRow> = serde_json::from_str(raw).unwrap();
    // clipped unigram precision 2/7 (hypothesis longer than reference: no
    // brevity penalty)
    let clip = rows
        .iter()
        .find(|r| r.hyp == "the the the the the the the")
        .unwrap();
    assert!((clip.bleu1 - 2.0 / 7.0).abs() < 1e-12);
    // LCS F1 = 2/3
    let lcs = rows.iter().find(|r| r.hyp == "a b c").unwrap();
    assert!((lcs.rouge_l - 2.0 / 3.0).abs() < 1e-12);
    // full reversal: 4 chunks over 4 matches, penalty exactly 1/2
    let rev = rows
        .iter()
        .find(|r| r.hyp == "square blue triangle green")
        .unwrap();
    assert!((rev.meteor - 0.5).abs() < 1e-12);
}
