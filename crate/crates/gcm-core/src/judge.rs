//! Deterministic concept / relevance / fluency judges for the mode-switch
//! task, with success binarized at the maximum grade on all three axes.

use crate::data::{Vocab, EOS, MODE_A, MODE_B, SEP};
use crate::error::{GcmError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub concept_pass: bool,
    pub relevance_pass: bool,
    pub fluency_pass: bool,
    pub success: bool,
}

/// Fraction of expected positions that must match for concept, and of
/// content tokens that must be query-mapped for relevance.
const MATCH_THRESHOLD: f64 = 0.8;

fn is_mode_prompt(prompt: &[u32]) -> bool {
    prompt.len() >= 4
        && (prompt[0] == MODE_A || prompt[0] == MODE_B)
        && prompt[1] == SEP
        && *prompt.last().unwrap() == SEP
        && prompt[2..prompt.len() - 1].iter().all(|&t| Vocab.is_content(t))
}

/// Judge one steered generation against its prompt. The baseline response is
/// recorded by callers for comparative reporting; the predicates here are
/// absolute:
///
/// - concept: the response is b-alphabet tokens then EOS, matching the
///   reverse b-mapping of the query at >= 80% of expected positions;
/// - relevance: >= 80% of content tokens map (under either alphabet) to a
///   query token;
/// - fluency: non-empty, EOS-terminated within twice the query length, and
///   free of mid-sequence control tokens.
pub fn judge_response(prompt: &[u32], steered: &[u32], _baseline: &[u32]) -> Result<JudgeVerdict> {
    if !is_mode_prompt(prompt) {
        return Err(GcmError::Input("not a mode-switch prompt".into()));
    }
    let vocab = Vocab;
    let query = &prompt[2..prompt.len() - 1];
    let k = query.len();

    if steered.is_empty() {
        return Ok(JudgeVerdict {
            concept_pass: false,
            relevance_pass: false,
            fluency_pass: false,
            success: false,
        });
    }

    let eos_pos = steered.iter().position(|&t| t == EOS);
    let content: &[u32] = match eos_pos {
        Some(i) => &steered[..i],
        None => steered,
    };

    // Fluency: terminates with EOS as the final token, within 2x query
    // length, no control tokens inside the content.
    let fluency_pass = eos_pos == Some(steered.len() - 1)
        && content.len() <= 2 * k
        && !content.is_empty()
        && content.iter().all(|&t| !vocab.is_control(t));

    // Concept: solely b-alphabet tokens followed by a terminal EOS, and the
    // reverse b-mapping of the query reproduced at >= 80% of its positions.
    let expected: Vec<u32> = query.iter().rev().map(|&q| vocab.to_b(q)).collect();
    let all_b = !content.is_empty() && content.iter().all(|&t| vocab.is_alpha_b(t));
    let matches = expected
        .iter()
        .enumerate()
        .filter(|(i, &e)| content.get(*i) == Some(&e))
        .count();
    let concept_pass = all_b
        && eos_pos == Some(steered.len() - 1)
        && matches as f64 / expected.len() as f64 >= MATCH_THRESHOLD;

    // Relevance: content tokens whose underlying content symbol occurs in
    // the query.
    let relevant = content
        .iter()
        .filter(|&&t| {
            vocab
                .to_content(t)
                .map(|c| query.contains(&c))
                .unwrap_or(false)
        })
        .count();
    let relevance_pass =
        !content.is_empty() && relevant as f64 / content.len() as f64 >= MATCH_THRESHOLD;

    let success = concept_pass && relevance_pass && fluency_pass;
    Ok(JudgeVerdict { concept_pass, relevance_pass, fluency_pass, success })
}

/// Mean success over a non-empty verdict list.
pub fn success_rate(verdicts: &[JudgeVerdict]) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(GcmError::Input("empty verdict list".into()));
    }
    Ok(verdicts.iter().filter(|v| v.success).count() as f64 / verdicts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_mode_switch, Split};

    #[test]
    fn gold_contrast_passes_gold_orig_fails_concept() {
        let ds = gen_mode_switch(50, 11, Split::HeldIn).unwrap();
        for p in &ds.pairs {
            let v = judge_response(&p.p_orig, &p.r_contrast, &p.r_orig).unwrap();
            assert!(v.concept_pass && v.relevance_pass && v.fluency_pass && v.success);
            let v = judge_response(&p.p_orig, &p.r_orig, &p.r_orig).unwrap();
            assert!(!v.concept_pass, "a-alphabet response must fail concept");
            assert!(v.relevance_pass && v.fluency_pass);
            assert!(!v.success);
        }
    }

    #[test]
    fn token_soup_without_eos_fails_fluency() {
        let ds = gen_mode_switch(1, 5, Split::HeldIn).unwrap();
        let p = &ds.pairs[0];
        let soup: Vec<u32> = (0..40).map(|i| 20 + (i % 16) as u32).collect();
        let v = judge_response(&p.p_orig, &soup, &p.r_orig).unwrap();
        assert!(!v.fluency_pass);
        assert!(!v.success);
    }

    #[test]
    fn empty_response_fails_everything_without_error() {
        let ds = gen_mode_switch(1, 6, Split::HeldIn).unwrap();
        let p = &ds.pairs[0];
        let v = judge_response(&p.p_orig, &[], &p.r_orig).unwrap();
        assert!(!v.concept_pass && !v.relevance_pass && !v.fluency_pass && !v.success);
    }

    #[test]
    fn success_rate_examples() {
        let win = JudgeVerdict {
            concept_pass: true,
            relevance_pass: true,
            fluency_pass: true,
            success: true,
        };
        let lose = JudgeVerdict { success: false, ..win };
        assert_eq!(success_rate(&[win; 4]).unwrap(), 1.0);
        assert_eq!(success_rate(&[lose; 3]).unwrap(), 0.0);
        assert_eq!(success_rate(&[win, win, win, lose]).unwrap(), 0.75);
        assert!(success_rate(&[]).is_err());
    }

    #[test]
    fn judges_are_pure() {
        let ds = gen_mode_switch(3, 8, Split::HeldIn).unwrap();
        let p = &ds.pairs[0];
        let a = judge_response(&p.p_orig, &p.r_contrast, &p.r_orig).unwrap();
        let b = judge_response(&p.p_orig, &p.r_contrast, &p.r_orig).unwrap();
        assert_eq!(a, b);
    }
}
