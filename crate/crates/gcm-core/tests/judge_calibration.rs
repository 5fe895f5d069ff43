//! The committed 50-example hand-labeled calibration set: the deterministic
//! judges must agree with every row.

use gcm_core::judge::judge_response;
use serde::Deserialize;

#[derive(Deserialize)]
struct Row {
    prompt: Vec<u32>,
    steered: Vec<u32>,
    baseline: Vec<u32>,
    concept: bool,
    relevance: bool,
    fluency: bool,
    success: bool,
}

fn fixture_rows() -> Vec<Row> {
    let text = include_str!("fixtures/judge_calibration.jsonl");
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("fixture row"))
        .collect()
}

#[test]
fn judge_agrees_with_all_fifty_hand_labels() {
    let rows = fixture_rows();
    assert_eq!(rows.len(), 50);
    let mut disagreements = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let v = judge_response(&row.prompt, &row.steered, &row.baseline).unwrap();
        if v.concept_pass != row.concept
            || v.relevance_pass != row.relevance
            || v.fluency_pass != row.fluency
            || v.success != row.success
        {
            disagreements.push(format!(
                "row {}: got ({},{},{},{}), labeled ({},{},{},{})",
                i + 1,
                v.concept_pass,
                v.relevance_pass,
                v.fluency_pass,
                v.success,
                row.concept,
                row.relevance,
                row.fluency,
                row.success
            ));
        }
    }
    assert!(
        disagreements.is_empty(),
        "judge disagreed on {} of 50 rows:\n{}",
        disagreements.len(),
        disagreements.join("\n")
    );
}

#[test]
fn verdict_ignores_baseline_argument() {
    let rows = fixture_rows();
    let row = &rows[0];
    let a = judge_response(&row.prompt, &row.steered, &row.baseline).unwrap();
    let b = judge_response(&row.prompt, &row.steered, &[]).unwrap();
    assert_eq!(a, b);
}
