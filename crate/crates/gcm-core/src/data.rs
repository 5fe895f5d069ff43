//! The synthetic mode-switch task: contrastive pair generation, the fixed
//! vocabulary, capability probes, and JSONL persistence.
//!
//! A prompt is `[MODE_m, SEP, q_1..q_k, SEP]`. Under MODE_A the gold
//! response maps each query token through the a-alphabet in order; under
//! MODE_B it maps through the b-alphabet in reverse order. The two prompts
//! of a pair differ only at the mode token, so patching is position-aligned.

use crate::error::{GcmError, Result};
use crate::rng::fnv1a;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const N_CONTENT: usize = 16;

/// Fixed token ids, in declaration order.
pub const MODE_A: u32 = 0;
pub const MODE_B: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;
const CONTENT_BASE: u32 = 4;
const ALPHA_A_BASE: u32 = CONTENT_BASE + N_CONTENT as u32;
const ALPHA_B_BASE: u32 = ALPHA_A_BASE + N_CONTENT as u32;

/// Total vocabulary size: 4 control + 16 content + 16 a-alphabet + 16 b-alphabet.
pub const VOCAB_SIZE: usize = 4 + 3 * N_CONTENT;

/// The fixed vocabulary: control tokens, content tokens c1..c16, and the two
/// response alphabets a1..a16 / b1..b16 in bijection with the content tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vocab;

impl Vocab {
    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn content(&self, i: usize) -> u32 {
        debug_assert!(i < N_CONTENT);
        CONTENT_BASE + i as u32
    }

    pub fn is_content(&self, t: u32) -> bool {
        (CONTENT_BASE..ALPHA_A_BASE).contains(&t)
    }

    pub fn is_alpha_a(&self, t: u32) -> bool {
        (ALPHA_A_BASE..ALPHA_B_BASE).contains(&t)
    }

    pub fn is_alpha_b(&self, t: u32) -> bool {
        (ALPHA_B_BASE..ALPHA_B_BASE + N_CONTENT as u32).contains(&t)
    }

    pub fn is_control(&self, t: u32) -> bool {
        t < CONTENT_BASE
    }

    /// a-alphabet image of a content token.
    pub fn to_a(&self, content: u32) -> u32 {
        debug_assert!(self.is_content(content));
        content - CONTENT_BASE + ALPHA_A_BASE
    }

    /// b-alphabet image of a content token.
    pub fn to_b(&self, content: u32) -> u32 {
        debug_assert!(self.is_content(content));
        content - CONTENT_BASE + ALPHA_B_BASE
    }

    /// Content token whose alphabet image is `t`, if `t` is an a/b token.
    pub fn to_content(&self, t: u32) -> Option<u32> {
        if self.is_alpha_a(t) {
            Some(t - ALPHA_A_BASE + CONTENT_BASE)
        } else if self.is_alpha_b(t) {
            Some(t - ALPHA_B_BASE + CONTENT_BASE)
        } else {
            None
        }
    }

    pub fn token_str(&self, t: u32) -> String {
        match t {
            MODE_A => "MODE_A".into(),
            MODE_B => "MODE_B".into(),
            SEP => "SEP".into(),
            EOS => "EOS".into(),
            _ if self.is_content(t) => format!("c{}", t - CONTENT_BASE + 1),
            _ if self.is_alpha_a(t) => format!("a{}", t - ALPHA_A_BASE + 1),
            _ if self.is_alpha_b(t) => format!("b{}", t - ALPHA_B_BASE + 1),
            _ => format!("?{t}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    HeldIn,
    HeldOut,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::HeldIn => write!(f, "held_in"),
            Split::HeldOut => write!(f, "held_out"),
        }
    }
}

/// One contrastive record: aligned prompts differing at exactly one index,
/// with gold responses that respectively lack and exhibit the concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub p_orig: Vec<u32>,
    pub r_orig: Vec<u32>,
    pub p_contrast: Vec<u32>,
    pub r_contrast: Vec<u32>,
}

impl ContrastivePair {
    pub fn validate(&self) -> Result<()> {
        if self.p_orig.len() != self.p_contrast.len() {
            return Err(GcmError::Validation("prompts differ in length".into()));
        }
        let diffs = self
            .p_orig
            .iter()
            .zip(&self.p_contrast)
            .filter(|(a, b)| a != b)
            .count();
        if diffs != 1 {
            return Err(GcmError::Validation(format!(
                "prompts differ at {diffs} indices, expected exactly 1"
            )));
        }
        if self.r_orig == self.r_contrast {
            return Err(GcmError::Validation("responses must differ".into()));
        }
        for (name, r) in [("r_orig", &self.r_orig), ("r_contrast", &self.r_contrast)] {
            if r.last() != Some(&EOS) {
                return Err(GcmError::Validation(format!("{name} does not end with EOS")));
            }
        }
        Ok(())
    }

    /// Query tokens of the (shared) prompt body.
    pub fn query(&self) -> &[u32] {
        &self.p_orig[2..self.p_orig.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub pairs: Vec<ContrastivePair>,
    pub split: Split,
}

impl TaskDataset {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            p.validate()
                .map_err(|e| GcmError::Validation(format!("pair {i}: {e}")))?;
        }
        Ok(())
    }

    /// Stable content hash used to stamp score tables and manifests.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        for p in &self.pairs {
            for seq in [&p.p_orig, &p.r_orig, &p.p_contrast, &p.r_contrast] {
                for &t in seq.iter() {
                    bytes.extend_from_slice(&t.to_le_bytes());
                }
                bytes.push(0xff);
            }
        }
        bytes.extend_from_slice(self.split.to_string().as_bytes());
        format!("{:016x}", fnv1a(&bytes))
    }
}

/// Generate the mode-switch task. The query length k is drawn once per
/// dataset (so every prompt shares one template length, which steering-plan
/// construction requires): held-in datasets draw k from 3..=6 over the first
/// half of the content alphabet; held-out datasets draw k from 7..=8 over
/// the disjoint second half, giving both the length and content shift the
/// transfer evaluation needs.
pub fn gen_mode_switch(n: usize, seed: u64, split: Split) -> Result<TaskDataset> {
    if n < 1 {
        return Err(GcmError::Input("n must be >= 1".into()));
    }
    let vocab = Vocab;
    let mut rng = crate::rng::substream(seed, "gen-mode-switch");
    let (k_range, content_range) = match split {
        Split::HeldIn => (3..=6usize, 0..N_CONTENT / 2),
        Split::HeldOut => (7..=8usize, N_CONTENT / 2..N_CONTENT),
    };
    let k = rng.gen_range(k_range);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let query: Vec<u32> = (0..k)
            .map(|_| vocab.content(rng.gen_range(content_range.clone())))
            .collect();
        pairs.push(pair_from_query(&query));
    }
    let ds = TaskDataset { pairs, split };
    ds.validate()?;
    Ok(ds)
}

/// Build the gold pair for a given query.
pub fn pair_from_query(query: &[u32]) -> ContrastivePair {
    let vocab = Vocab;
    let mut p_orig = vec![MODE_A, SEP];
    p_orig.extend_from_slice(query);
    p_orig.push(SEP);
    let mut p_contrast = p_orig.clone();
    p_contrast[0] = MODE_B;

    let mut r_orig: Vec<u32> = query.iter().map(|&q| vocab.to_a(q)).collect();
    r_orig.push(EOS);
    let mut r_contrast: Vec<u32> = query.iter().rev().map(|&q| vocab.to_b(q)).collect();
    r_contrast.push(EOS);
    ContrastivePair { p_orig, r_orig, p_contrast, r_contrast }
}

/// A mode-free echo probe: `[SEP, q.., SEP]` answered by the in-order
/// a-mapping of the query. The prompts carry no mode token, so the measured
/// skill is the model's default mapping behavior rather than the steered
/// concept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoProbe {
    pub prompt: Vec<u32>,
    pub answer: Vec<u32>,
}

pub fn gen_echo_probes(n: usize, seed: u64) -> Vec<EchoProbe> {
    let vocab = Vocab;
    let mut rng = crate::rng::substream(seed, "gen-echo");
    (0..n)
        .map(|_| {
            let k = rng.gen_range(3..=6usize);
            let query: Vec<u32> = (0..k)
                .map(|_| vocab.content(rng.gen_range(0..N_CONTENT)))
                .collect();
            let mut prompt = vec![SEP];
            prompt.extend_from_slice(&query);
            prompt.push(SEP);
            let mut answer: Vec<u32> = query.iter().map(|&q| vocab.to_a(q)).collect();
            answer.push(EOS);
            EchoProbe { prompt, answer }
        })
        .collect()
}

/// Echo probes as JSONL: one `{"prompt": [...], "answer": [...]}` per line.
pub fn save_echo_jsonl(probes: &[EchoProbe], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in probes {
        serde_json::to_writer(
            &mut f,
            &serde_json::json!({ "prompt": p.prompt, "answer": p.answer }),
        )?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_echo_jsonl(path: &Path) -> Result<Vec<EchoProbe>> {
    #[derive(Deserialize)]
    struct Line {
        prompt: Vec<u32>,
        answer: Vec<u32>,
    }
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut probes = Vec::new();
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| GcmError::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        probes.push(EchoProbe { prompt: parsed.prompt, answer: parsed.answer });
    }
    Ok(probes)
}

// ── Persistence ─────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct PairLine {
    p_orig: Vec<u32>,
    r_orig: Vec<u32>,
    p_contrast: Vec<u32>,
    r_contrast: Vec<u32>,
    split: Split,
}

pub fn save_jsonl(dataset: &TaskDataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in &dataset.pairs {
        let line = PairLine {
            p_orig: p.p_orig.clone(),
            r_orig: p.r_orig.clone(),
            p_contrast: p.p_contrast.clone(),
            r_contrast: p.r_contrast.clone(),
            split: dataset.split,
        };
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<TaskDataset> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut pairs = Vec::new();
    let mut split = None;
    for (idx, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PairLine = serde_json::from_str(&line).map_err(|e| GcmError::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        match split {
            None => split = Some(parsed.split),
            Some(s) if s != parsed.split => {
                return Err(GcmError::Parse {
                    line: idx + 1,
                    msg: "mixed split tags in one file".into(),
                })
            }
            _ => {}
        }
        pairs.push(ContrastivePair {
            p_orig: parsed.p_orig,
            r_orig: parsed.r_orig,
            p_contrast: parsed.p_contrast,
            r_contrast: parsed.r_contrast,
        });
    }
    if pairs.is_empty() {
        eprintln!("warning: {} is empty; loaded an empty dataset", path.display());
    }
    let ds = TaskDataset { pairs, split: split.unwrap_or(Split::HeldIn) };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_differ_only_at_mode_position() {
        let ds = gen_mode_switch(50, 7, Split::HeldIn).unwrap();
        for p in &ds.pairs {
            let diffs: Vec<usize> = (0..p.p_orig.len())
                .filter(|&i| p.p_orig[i] != p.p_contrast[i])
                .collect();
            assert_eq!(diffs, vec![0]);
            assert_eq!(p.p_orig[0], MODE_A);
            assert_eq!(p.p_contrast[0], MODE_B);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_mode_switch(20, 42, Split::HeldIn).unwrap();
        let b = gen_mode_switch(20, 42, Split::HeldIn).unwrap();
        assert_eq!(a, b);
        let c = gen_mode_switch(20, 43, Split::HeldIn).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn held_out_is_disjoint_and_longer() {
        let ds = gen_mode_switch(50, 1, Split::HeldOut).unwrap();
        let vocab = Vocab;
        for p in &ds.pairs {
            let q = p.query();
            assert!(q.len() == 7 || q.len() == 8);
            for &t in q {
                assert!(t >= vocab.content(N_CONTENT / 2));
            }
        }
    }

    #[test]
    fn roundtrip_jsonl() {
        let ds = gen_mode_switch(10, 3, Split::HeldOut).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_jsonl(&ds, &path).unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(ds, loaded);
        // Byte-identical on re-save.
        let bytes1 = std::fs::read(&path).unwrap();
        save_jsonl(&loaded, &path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn load_rejects_two_index_difference() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        // Prompts differ at indices 0 and 2.
        std::fs::write(
            &path,
            r#"{"p_orig":[0,2,4,2],"r_orig":[20,3],"p_contrast":[1,2,5,2],"r_contrast":[36,3],"split":"held_in"}"#,
        )
        .unwrap();
        assert!(matches!(load_jsonl(&path), Err(GcmError::Validation(_))));
    }

    #[test]
    fn load_reports_line_number_for_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let good = r#"{"p_orig":[0,2,4,2],"r_orig":[20,3],"p_contrast":[1,2,4,2],"r_contrast":[36,3],"split":"held_in"}"#;
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match load_jsonl(&path) {
            Err(GcmError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_loads_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds = load_jsonl(&path).unwrap();
        assert!(ds.pairs.is_empty());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = gen_mode_switch(5, 1, Split::HeldIn).unwrap();
        let b = gen_mode_switch(5, 1, Split::HeldIn).unwrap();
        let c = gen_mode_switch(5, 2, Split::HeldIn).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
