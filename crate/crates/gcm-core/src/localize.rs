//! Rank attention heads by mediation strength: activation patching,
//! attribution patching, and knockouts, plus the probe and random baselines;
//! select the top-k% for steering.

use crate::data::{ContrastivePair, TaskDataset};
use crate::error::{GcmError, Result};
use crate::model::{
    grad_pair_objective, ActivationCache, HeadId, Intervention, InterventionMode,
    InterventionSpec, ModelConfig, ModelParams, Passes,
};
use rand::seq::SliceRandom;

use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizeMethod {
    ActPatch,
    AttribPatch,
    Knockout,
    ItiProbe,
    Random,
}

impl LocalizeMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            LocalizeMethod::ActPatch => "act_patch",
            LocalizeMethod::AttribPatch => "attrib_patch",
            LocalizeMethod::Knockout => "knockout",
            LocalizeMethod::ItiProbe => "iti_probe",
            LocalizeMethod::Random => "random",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "act_patch" | "actpatch" => Ok(LocalizeMethod::ActPatch),
            "attrib_patch" | "attribpatch" => Ok(LocalizeMethod::AttribPatch),
            "knockout" => Ok(LocalizeMethod::Knockout),
            "iti_probe" | "iti" => Ok(LocalizeMethod::ItiProbe),
            "random" => Ok(LocalizeMethod::Random),
            _ => Err(GcmError::Input(format!("unknown localizer '{tag}'"))),
        }
    }
}

/// Sign convention for the first-order IE estimate. The formula as printed
/// multiplies the gradient by (z_orig - z_contrast); the attribution
/// literature approximates the contrast-ward patch, which flips it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttributionSign {
    #[default]
    AsPrinted,
    PatchDirection,
}

/// Per-head mediation scores for one method over one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadScoreTable {
    pub method: LocalizeMethod,
    /// Indexed by `HeadId::index`.
    pub scores: Vec<f64>,
    pub seed: Option<u64>,
    pub dataset_fingerprint: String,
}

impl HeadScoreTable {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.scores.len() != config.total_heads() {
            return Err(GcmError::Validation(format!(
                "score table has {} entries, model has {} heads",
                self.scores.len(),
                config.total_heads()
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(GcmError::Validation("non-finite head score".into()));
        }
        Ok(())
    }
}

/// Top-fraction head selection in descending score order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSelection {
    pub heads: Vec<HeadId>,
    pub k: f64,
}

/// Select `ceil(k * L * H)` heads with the highest scores; ties break by
/// (layer, head) ascending, so the selection is monotone in k.
pub fn select_top_k(table: &HeadScoreTable, config: &ModelConfig, k: f64) -> Result<HeadSelection> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(GcmError::Input(format!("k must be in (0, 1], got {k}")));
    }
    table.validate(config)?;
    let total = config.total_heads();
    let n = (k * total as f64).ceil() as usize;
    let mut idx: Vec<usize> = (0..total).collect();
    idx.sort_by(|&a, &b| {
        table.scores[b]
            .total_cmp(&table.scores[a])
            .then_with(|| a.cmp(&b))
    });
    let heads = idx[..n.min(total)]
        .iter()
        .map(|&i| HeadId::from_index(i, config))
        .collect();
    Ok(HeadSelection { heads, k })
}

// ── Patching primitives ─────────────────────────────────────────────────────

/// Head-output activations of the contrast prompt (no interventions).
pub fn contrast_prompt_cache(params: &ModelParams, pair: &ContrastivePair) -> Result<ActivationCache> {
    let (_, cache) = params.forward_with_cache(&pair.p_contrast, &InterventionSpec::empty())?;
    Ok(cache)
}

fn replace_entries_from_cache(
    head: HeadId,
    cache: &ActivationCache,
    positions: usize,
) -> Vec<Intervention> {
    (0..positions)
        .map(|pos| Intervention {
            head,
            position: pos,
            vector: cache.get(head.layer, head.head, pos).to_vec(),
            mode: InterventionMode::Replace,
            scale: 1.0,
        })
        .collect()
}

/// Indirect effect of patching `head` from the contrast run into the
/// original prompt at every prompt position:
/// `log pi(r_contrast | p_orig, patched) - log pi(r_orig | p_orig, patched)`.
pub fn ie_activation_patch(
    params: &ModelParams,
    pair: &ContrastivePair,
    head: HeadId,
) -> Result<f64> {
    let cache = contrast_prompt_cache(params, pair)?;
    ie_activation_patch_cached(params, pair, head, &cache)
}

pub fn ie_activation_patch_cached(
    params: &ModelParams,
    pair: &ContrastivePair,
    head: HeadId,
    contrast_cache: &ActivationCache,
) -> Result<f64> {
    let spec = InterventionSpec {
        entries: replace_entries_from_cache(head, contrast_cache, pair.p_orig.len()),
        ..Default::default()
    };
    let mut passes = Passes::default();
    let (lc, lo) = params.score_pair(
        &pair.p_orig,
        &pair.r_contrast,
        &pair.r_orig,
        &spec,
        &mut passes,
    )?;
    Ok(lc - lo)
}

/// Knockout indirect effect: the head's output replaced by the zero vector
/// at every prompt position. The contrast prompt is not needed.
pub fn ie_knockout(params: &ModelParams, pair: &ContrastivePair, head: HeadId) -> Result<f64> {
    let zero = vec![0.0; params.config.d_head];
    let entries = (0..pair.p_orig.len())
        .map(|pos| Intervention {
            head,
            position: pos,
            vector: zero.clone(),
            mode: InterventionMode::Replace,
            scale: 1.0,
        })
        .collect();
    let spec = InterventionSpec { entries, ..Default::default() };
    let mut passes = Passes::default();
    let (lc, lo) = params.score_pair(
        &pair.p_orig,
        &pair.r_contrast,
        &pair.r_orig,
        &spec,
        &mut passes,
    )?;
    Ok(lc - lo)
}

/// First-order IE estimate for every head at once. One forward on the
/// contrast prompt, one packed forward and one backward on the original
/// prompt with both responses; the returned counter proves the budget.
pub fn ie_attribution_all_heads(
    params: &ModelParams,
    pair: &ContrastivePair,
    sign: AttributionSign,
) -> Result<(Vec<f64>, Passes)> {
    let mut passes = Passes::default();
    let cfg = &params.config;
    let prompt_len = pair.p_orig.len();

    // Forward 1: contrast prompt, caching z_contrast.
    let (_, z_contrast) = {
        let input = crate::model::SeqInput::causal(pair.p_contrast.clone());
        let (trace, cache) = params.forward_trace(&input, &InterventionSpec::empty(), &mut passes)?;
        (trace, cache)
    };

    // Forward 2 + backward 1: original prompt with both responses packed,
    // gradient of log pi(r_contrast) - log pi(r_orig) at every site.
    let (_j, site_grads, z_orig) = grad_pair_objective(
        params,
        &pair.p_orig,
        &pair.r_contrast,
        &pair.r_orig,
        &mut passes,
    )?;

    let mut scores = vec![0f64; cfg.total_heads()];
    for layer in 0..cfg.n_layers {
        for head in 0..cfg.n_heads {
            let mut acc = 0f64;
            for pos in 0..prompt_len {
                let g = site_grads.get(layer, head, pos);
                let zo = z_orig.get(layer, head, pos);
                let zc = z_contrast.get(layer, head, pos);
                for i in 0..cfg.d_head {
                    acc += g[i] as f64 * (zo[i] as f64 - zc[i] as f64);
                }
            }
            let idx = HeadId::new(layer, head).index(cfg);
            scores[idx] = match sign {
                AttributionSign::AsPrinted => acc,
                AttributionSign::PatchDirection => -acc,
            };
        }
    }
    Ok((scores, passes))
}

// ── Dataset-level rankings ──────────────────────────────────────────────────

fn mean_over_pairs<F>(params: &ModelParams, dataset: &TaskDataset, mut per_pair: F) -> Result<Vec<f64>>
where
    F: FnMut(&ModelParams, &ContrastivePair) -> Result<Vec<f64>>,
{
    if dataset.pairs.is_empty() {
        return Err(GcmError::Input("empty dataset".into()));
    }
    let total = params.config.total_heads();
    let mut sums = vec![0f64; total];
    for pair in &dataset.pairs {
        let scores = per_pair(params, pair)?;
        for (s, v) in sums.iter_mut().zip(scores) {
            *s += v;
        }
    }
    let n = dataset.pairs.len() as f64;
    Ok(sums.into_iter().map(|s| s / n).collect())
}

pub fn rank_activation_patching(
    params: &ModelParams,
    dataset: &TaskDataset,
) -> Result<HeadScoreTable> {
    let cfg = params.config;
    let scores = mean_over_pairs(params, dataset, |p, pair| {
        let cache = contrast_prompt_cache(p, pair)?;
        (0..cfg.total_heads())
            .map(|i| ie_activation_patch_cached(p, pair, HeadId::from_index(i, &cfg), &cache))
            .collect()
    })?;
    Ok(HeadScoreTable {
        method: LocalizeMethod::ActPatch,
        scores,
        seed: None,
        dataset_fingerprint: dataset.fingerprint(),
    })
}

pub fn rank_knockout(params: &ModelParams, dataset: &TaskDataset) -> Result<HeadScoreTable> {
    let cfg = params.config;
    let scores = mean_over_pairs(params, dataset, |p, pair| {
        (0..cfg.total_heads())
            .map(|i| ie_knockout(p, pair, HeadId::from_index(i, &cfg)))
            .collect()
    })?;
    Ok(HeadScoreTable {
        method: LocalizeMethod::Knockout,
        scores,
        seed: None,
        dataset_fingerprint: dataset.fingerprint(),
    })
}

pub fn rank_attribution(
    params: &ModelParams,
    dataset: &TaskDataset,
    sign: AttributionSign,
) -> Result<HeadScoreTable> {
    let scores = mean_over_pairs(params, dataset, |p, pair| {
        let (scores, passes) = ie_attribution_all_heads(p, pair, sign)?;
        debug_assert_eq!(passes, Passes { forwards: 2, backwards: 1 });
        Ok(scores)
    })?;
    Ok(HeadScoreTable {
        method: LocalizeMethod::AttribPatch,
        scores,
        seed: None,
        dataset_fingerprint: dataset.fingerprint(),
    })
}

/// Probe baseline: per head, a binary logistic regression on the head's
/// activation at the final token of each concatenated (prompt, response)
/// sequence, labeled by pair membership; the score is validation accuracy
/// on a seeded 4:1 split.
pub fn rank_iti_probe(
    params: &ModelParams,
    dataset: &TaskDataset,
    seed: u64,
) -> Result<HeadScoreTable> {
    if dataset.pairs.len() < 5 {
        return Err(GcmError::Input(format!(
            "probe ranking needs >= 5 pairs, got {}",
            dataset.pairs.len()
        )));
    }
    let cfg = &params.config;
    let spec = InterventionSpec::empty();

    // Final-token head activations for every member sequence.
    let mut features: Vec<ActivationCache> = Vec::with_capacity(dataset.pairs.len() * 2);
    let mut labels: Vec<f64> = Vec::with_capacity(dataset.pairs.len() * 2);
    let mut finals: Vec<usize> = Vec::new();
    for pair in &dataset.pairs {
        for (prompt, resp, label) in [
            (&pair.p_orig, &pair.r_orig, 0.0),
            (&pair.p_contrast, &pair.r_contrast, 1.0),
        ] {
            let mut tokens = prompt.clone();
            tokens.extend_from_slice(resp);
            let (_, cache) = params.forward_with_cache(&tokens, &spec)?;
            finals.push(tokens.len() - 1);
            features.push(cache);
            labels.push(label);
        }
    }

    let n = labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::substream(seed, "iti-split");
    order.shuffle(&mut rng);
    let n_train = n * 4 / 5;
    let (train_idx, val_idx) = order.split_at(n_train);

    let mut scores = vec![0f64; cfg.total_heads()];
    for layer in 0..cfg.n_layers {
        for head in 0..cfg.n_heads {
            let xs: Vec<&[f32]> = (0..n)
                .map(|m| features[m].get(layer, head, finals[m]))
                .collect();
            let acc = logistic_probe_val_accuracy(&xs, &labels, train_idx, val_idx);
            scores[HeadId::new(layer, head).index(cfg)] = acc;
        }
    }
    Ok(HeadScoreTable {
        method: LocalizeMethod::ItiProbe,
        scores,
        seed: Some(seed),
        dataset_fingerprint: dataset.fingerprint(),
    })
}

/// Full-batch gradient descent on logistic loss: 500 steps, lr 0.1, no
/// regularization, zero init. Returns validation accuracy.
fn logistic_probe_val_accuracy(
    xs: &[&[f32]],
    labels: &[f64],
    train_idx: &[usize],
    val_idx: &[usize],
) -> f64 {
    let d = xs[0].len();
    let mut w = vec![0f64; d];
    let mut b = 0f64;
    let lr = 0.1;
    let m = train_idx.len() as f64;
    for _ in 0..500 {
        let mut gw = vec![0f64; d];
        let mut gb = 0f64;
        for &i in train_idx {
            let z: f64 = xs[i].iter().zip(&w).map(|(&x, &wi)| x as f64 * wi).sum::<f64>() + b;
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - labels[i];
            for (g, &x) in gw.iter_mut().zip(xs[i]) {
                *g += err * x as f64;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g / m;
        }
        b -= lr * gb / m;
    }
    let mut hits = 0usize;
    for &i in val_idx {
        let z: f64 = xs[i].iter().zip(&w).map(|(&x, &wi)| x as f64 * wi).sum::<f64>() + b;
        let pred = if z > 0.0 { 1.0 } else { 0.0 };
        if pred == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / val_idx.len() as f64
}

/// Random baseline: scores are a seeded uniform random permutation rank.
pub fn rank_random(config: &ModelConfig, seed: u64) -> HeadScoreTable {
    let total = config.total_heads();
    let mut ranks: Vec<usize> = (0..total).collect();
    let mut rng = crate::rng::substream(seed, "random-heads");
    ranks.shuffle(&mut rng);
    HeadScoreTable {
        method: LocalizeMethod::Random,
        scores: ranks.into_iter().map(|r| r as f64).collect(),
        seed: Some(seed),
        dataset_fingerprint: String::new(),
    }
}

// ── CSV persistence ─────────────────────────────────────────────────────────

pub fn save_score_csv(table: &HeadScoreTable, config: &ModelConfig, path: &Path) -> Result<()> {
    table.validate(config)?;
    let mut out = String::from("method,layer,head,score,seed,dataset_fingerprint\n");
    for (i, &score) in table.scores.iter().enumerate() {
        let h = HeadId::from_index(i, config);
        let seed = table.seed.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            table.method.tag(),
            h.layer,
            h.head,
            score,
            seed,
            table.dataset_fingerprint
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_score_csv(path: &Path, config: &ModelConfig) -> Result<HeadScoreTable> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    if header != "method,layer,head,score,seed,dataset_fingerprint" {
        return Err(GcmError::Parse { line: 1, msg: format!("unexpected header '{header}'") });
    }
    let mut method = None;
    let mut seed = None;
    let mut fingerprint = String::new();
    let mut scores = vec![f64::NAN; config.total_heads()];
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(GcmError::Parse { line: idx + 1, msg: "expected 6 columns".into() });
        }
        let m = LocalizeMethod::from_tag(parts[0])
            .map_err(|e| GcmError::Parse { line: idx + 1, msg: e.to_string() })?;
        method = Some(m);
        let layer: usize = parts[1]
            .parse()
            .map_err(|_| GcmError::Parse { line: idx + 1, msg: "bad layer".into() })?;
        let head: usize = parts[2]
            .parse()
            .map_err(|_| GcmError::Parse { line: idx + 1, msg: "bad head".into() })?;
        let score: f64 = parts[3]
            .parse()
            .map_err(|_| GcmError::Parse { line: idx + 1, msg: "bad score".into() })?;
        if !parts[4].is_empty() {
            seed = Some(parts[4].parse().map_err(|_| GcmError::Parse {
                line: idx + 1,
                msg: "bad seed".into(),
            })?);
        }
        fingerprint = parts[5].to_string();
        let id = HeadId::new(layer, head);
        id.validate(config)
            .map_err(|e| GcmError::Parse { line: idx + 1, msg: e.to_string() })?;
        scores[id.index(config)] = score;
    }
    let table = HeadScoreTable {
        method: method.ok_or_else(|| GcmError::Validation("empty score table".into()))?,
        scores,
        seed,
        dataset_fingerprint: fingerprint,
    };
    table.validate(config)?;
    Ok(table)
}
