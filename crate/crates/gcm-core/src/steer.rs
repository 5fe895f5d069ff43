//! Build and apply steering interventions on a head selection: mean
//! steering (replace with the scaled mean contrast activation),
//! difference-in-means (add the scaled gap between contrast and original
//! means), and a trained low-rank orthonormal read/write edit.
//!
//! Plan vectors cover positions `0..template_len` where `template_len` is
//! the common prompt-prefix length of the build dataset; longer prompts
//! reuse the final vector at later positions, shorter prompts use what fits.

use crate::data::TaskDataset;
use crate::error::{GcmError, Result};
use crate::localize::HeadSelection;
use crate::model::{
    ActivationCache, HeadId, Intervention, InterventionMode, InterventionSpec, LowRankEdit,
    ModelParams, Passes, SeqInput,
};
use crate::tensor::Tensor2D;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerMethod {
    Mean,
    DiffMeans,
    Reft,
}

impl SteerMethod {
    pub fn tag(&self) -> &'static str {
        match self {
            SteerMethod::Mean => "mean",
            SteerMethod::DiffMeans => "diff_means",
            SteerMethod::Reft => "reft",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "mean" => Ok(SteerMethod::Mean),
            "diff_means" | "diffmeans" | "diff-means" => Ok(SteerMethod::DiffMeans),
            "reft" => Ok(SteerMethod::Reft),
            _ => Err(GcmError::Input(format!("unknown steerer '{tag}'"))),
        }
    }
}

/// One trained read/write module for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct ReftHeadModule {
    pub head: HeadId,
    /// Orthonormal rows, `[rank x d_head]`.
    pub r: Tensor2D,
    pub w: Tensor2D,
    pub b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReftModule {
    pub rank: usize,
    pub heads: Vec<ReftHeadModule>,
}

impl ReftModule {
    /// Frobenius norm of `R R^T - I` for one head module.
    pub fn orthonormality_error(r: &Tensor2D) -> f64 {
        let rank = r.rows;
        let mut acc = 0f64;
        for a in 0..rank {
            for b in 0..rank {
                let mut dot = 0f64;
                for i in 0..r.cols {
                    dot += r.at(a, i) as f64 * r.at(b, i) as f64;
                }
                let target = if a == b { 1.0 } else { 0.0 };
                acc += (dot - target).powi(2);
            }
        }
        acc.sqrt()
    }

    pub fn max_orthonormality_error(&self) -> f64 {
        self.heads
            .iter()
            .map(|h| Self::orthonormality_error(&h.r))
            .fold(0.0, f64::max)
    }
}

/// A built steering plan: method, scale, selected heads, and either static
/// per-(head, position) vectors or a trained module.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    pub method: SteerMethod,
    pub alpha: f32,
    pub heads: HeadSelection,
    /// Common prompt-template length P; vectors span positions 0..P.
    pub template_len: usize,
    pub d_head: usize,
    /// `vectors[i]` belongs to `heads.heads[i]`, flat `[template_len * d_head]`.
    /// Empty for functional reft plans.
    pub vectors: Vec<Vec<f32>>,
    pub normalized: bool,
    pub reft: Option<ReftModule>,
    /// Apply reft as an extracted additive vector instead of the functional
    /// edit (the alternate extraction mode).
    pub reft_extracted: bool,
}

impl SteeringPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(GcmError::Validation("alpha must be finite and > 0".into()));
        }
        let needs_vectors = !matches!(self.method, SteerMethod::Reft) || self.reft_extracted;
        if needs_vectors {
            if self.vectors.len() != self.heads.heads.len() {
                return Err(GcmError::Validation(
                    "one vector block required per selected head".into(),
                ));
            }
            for v in &self.vectors {
                if v.len() != self.template_len * self.d_head {
                    return Err(GcmError::Validation("vector block has wrong length".into()));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(GcmError::Validation("non-finite steering vector".into()));
                }
            }
        }
        if matches!(self.method, SteerMethod::Reft) && self.reft.is_none() {
            return Err(GcmError::Validation("reft plan without module".into()));
        }
        Ok(())
    }

    /// Compile the plan for a prompt of the given length. Positions past the
    /// template reuse the final template vector; shorter prompts truncate.
    pub fn to_spec(&self, prompt_len: usize) -> Result<InterventionSpec> {
        self.validate()?;
        let mut spec = InterventionSpec::empty();
        match (self.method, self.reft_extracted) {
            (SteerMethod::Mean, _) | (SteerMethod::DiffMeans, _) => {
                let mode = if self.method == SteerMethod::Mean {
                    InterventionMode::Replace
                } else {
                    InterventionMode::Add
                };
                for (hi, &head) in self.heads.heads.iter().enumerate() {
                    for pos in 0..prompt_len {
                        let src = pos.min(self.template_len - 1);
                        let v =
                            self.vectors[hi][src * self.d_head..(src + 1) * self.d_head].to_vec();
                        spec.entries.push(Intervention {
                            head,
                            position: pos,
                            vector: v,
                            mode,
                            scale: self.alpha,
                        });
                    }
                }
            }
            (SteerMethod::Reft, true) => {
                let module = self.reft.as_ref().expect("validated");
                for &head in self.heads.heads.iter() {
                    let v = extract_reft_vector(
                        module
                            .heads
                            .iter()
                            .find(|m| m.head == head)
                            .ok_or_else(|| GcmError::Validation("module missing head".into()))?,
                    );
                    for pos in 0..prompt_len {
                        spec.entries.push(Intervention {
                            head,
                            position: pos,
                            vector: v.clone(),
                            mode: InterventionMode::Add,
                            scale: self.alpha,
                        });
                    }
                }
            }
            (SteerMethod::Reft, false) => {
                let module = self.reft.as_ref().expect("validated");
                for m in &module.heads {
                    spec.edits.push(LowRankEdit {
                        head: m.head,
                        max_position: prompt_len,
                        r: m.r.clone(),
                        w: m.w.clone(),
                        b: m.b.clone(),
                        normalize: self.normalized,
                        scale: self.alpha,
                    });
                }
            }
        }
        Ok(spec)
    }
}

/// Alternate extraction: mean of the rows of `R^T W` (the write direction
/// aggregated over the read subspace).
pub fn extract_reft_vector(m: &ReftHeadModule) -> Vec<f32> {
    let dh = m.r.cols;
    let rank = m.r.rows;
    // M = R^T W, [d_head x d_head]; return the mean over its rows.
    let mut out = vec![0f32; dh];
    for j in 0..dh {
        let mut acc = 0f64;
        for i in 0..dh {
            // M[i][j] = sum_a R[a][i] * W[a][j]
            let mut mij = 0f64;
            for a in 0..rank {
                mij += m.r.at(a, i) as f64 * m.w.at(a, j) as f64;
            }
            acc += mij;
        }
        out[j] = (acc / dh as f64) as f32;
    }
    out
}

// ── Prompt-activation statistics ────────────────────────────────────────────

/// Head activations of every pair's prompts, plus the common template length
/// (the minimum prompt length over the dataset).
pub struct PromptCaches {
    pub orig: Vec<ActivationCache>,
    pub contrast: Vec<ActivationCache>,
    pub template_len: usize,
}

impl PromptCaches {
    pub fn collect(params: &ModelParams, dataset: &TaskDataset) -> Result<Self> {
        if dataset.pairs.is_empty() {
            return Err(GcmError::Input("empty dataset".into()));
        }
        let template_len = dataset.pairs[0].p_orig.len();
        if dataset.pairs.iter().any(|p| p.p_orig.len() != template_len) {
            return Err(GcmError::Input(
                "steering vectors need a common prompt template length, but the \
                 dataset mixes prompt lengths"
                    .into(),
            ));
        }
        let spec = InterventionSpec::empty();
        let mut orig = Vec::with_capacity(dataset.pairs.len());
        let mut contrast = Vec::with_capacity(dataset.pairs.len());
        for pair in &dataset.pairs {
            let (_, co) = params.forward_with_cache(&pair.p_orig, &spec)?;
            let (_, cc) = params.forward_with_cache(&pair.p_contrast, &spec)?;
            orig.push(co);
            contrast.push(cc);
        }
        Ok(PromptCaches { orig, contrast, template_len })
    }

    fn mean_at(&self, caches: &[ActivationCache], head: HeadId, pos: usize, d_head: usize) -> Vec<f32> {
        let mut acc = vec![0f64; d_head];
        for c in caches {
            let v = c.get(head.layer, head.head, pos);
            for (a, &x) in acc.iter_mut().zip(v) {
                *a += x as f64;
            }
        }
        let n = caches.len() as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }
}

/// Mean steering: replace each selected head's activation with the scaled
/// mean contrast activation at each template position.
pub fn build_mean_plan(
    params: &ModelParams,
    dataset: &TaskDataset,
    heads: &HeadSelection,
    alpha: f32,
) -> Result<SteeringPlan> {
    let caches = PromptCaches::collect(params, dataset)?;
    build_mean_plan_cached(&caches, params, heads, alpha)
}

pub fn build_mean_plan_cached(
    caches: &PromptCaches,
    params: &ModelParams,
    heads: &HeadSelection,
    alpha: f32,
) -> Result<SteeringPlan> {
    let dh = params.config.d_head;
    let p = caches.template_len;
    let vectors = heads
        .heads
        .iter()
        .map(|&h| {
            let mut block = Vec::with_capacity(p * dh);
            for pos in 0..p {
                block.extend(caches.mean_at(&caches.contrast, h, pos, dh));
            }
            block
        })
        .collect();
    let plan = SteeringPlan {
        method: SteerMethod::Mean,
        alpha,
        heads: heads.clone(),
        template_len: p,
        d_head: dh,
        vectors,
        normalized: false,
        reft: None,
        reft_extracted: false,
    };
    plan.validate()?;
    Ok(plan)
}

/// Difference-in-means steering: add the scaled gap between the mean
/// contrast and mean original activations.
pub fn build_diff_means_plan(
    params: &ModelParams,
    dataset: &TaskDataset,
    heads: &HeadSelection,
    alpha: f32,
) -> Result<SteeringPlan> {
    let caches = PromptCaches::collect(params, dataset)?;
    build_diff_means_plan_cached(&caches, params, heads, alpha)
}

pub fn build_diff_means_plan_cached(
    caches: &PromptCaches,
    params: &ModelParams,
    heads: &HeadSelection,
    alpha: f32,
) -> Result<SteeringPlan> {
    let dh = params.config.d_head;
    let p = caches.template_len;
    let vectors = heads
        .heads
        .iter()
        .map(|&h| {
            let mut block = Vec::with_capacity(p * dh);
            for pos in 0..p {
                let mc = caches.mean_at(&caches.contrast, h, pos, dh);
                let mo = caches.mean_at(&caches.orig, h, pos, dh);
                block.extend(mc.iter().zip(&mo).map(|(&c, &o)| c - o));
            }
            block
        })
        .collect();
    let plan = SteeringPlan {
        method: SteerMethod::DiffMeans,
        alpha,
        heads: heads.clone(),
        template_len: p,
        d_head: dh,
        vectors,
        normalized: false,
        reft: None,
        reft_extracted: false,
    };
    plan.validate()?;
    Ok(plan)
}

/// Rescale every applied edit vector to unit norm before alpha scaling.
/// Meant for reft plans; other methods are allowed with a warning (the
/// normalization ablation).
pub fn normalize_plan(mut plan: SteeringPlan) -> SteeringPlan {
    match plan.method {
        SteerMethod::Reft => {
            plan.normalized = true;
        }
        _ => {
            eprintln!(
                "warning: normalizing a {} plan (normalization is meant for reft)",
                plan.method.tag()
            );
            let dh = plan.d_head;
            for (hi, block) in plan.vectors.iter_mut().enumerate() {
                for pos in 0..plan.template_len {
                    let v = &mut block[pos * dh..(pos + 1) * dh];
                    let norm = v.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                    if norm <= 1e-12 {
                        eprintln!(
                            "warning: zero-norm steering vector at head index {hi} position {pos}; skipped"
                        );
                        continue;
                    }
                    for x in v.iter_mut() {
                        *x = (*x as f64 / norm) as f32;
                    }
                }
            }
            plan.normalized = true;
        }
    }
    plan
}

/// Steer one prompt: compile the plan and decode greedily.
pub fn apply_plan(
    params: &ModelParams,
    prompt: &[u32],
    plan: &SteeringPlan,
    max_new: usize,
    stop_token: Option<u32>,
) -> Result<Vec<u32>> {
    let spec = plan.to_spec(prompt.len())?;
    params.greedy_generate(prompt, &spec, max_new, stop_token)
}

// ── ReFT training ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ReftHyperparams {
    pub rank: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for ReftHyperparams {
    fn default() -> Self {
        ReftHyperparams {
            rank: 4,
            epochs: 40,
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct ReftTrainOutcome {
    pub module: ReftModule,
    /// Mean per-token NLL after each epoch.
    pub losses: Vec<f64>,
    /// Largest ||RR^T - I||_F observed after any re-orthonormalization.
    pub max_orthonormality_error: f64,
}

/// Orthonormalize the rows of `r` in place (modified Gram-Schmidt, f64).
fn reorthonormalize_rows(r: &mut Tensor2D) {
    let (rank, dh) = (r.rows, r.cols);
    let mut rows: Vec<Vec<f64>> = (0..rank)
        .map(|a| r.row(a).iter().map(|&v| v as f64).collect())
        .collect();
    for a in 0..rank {
        for b in 0..a {
            let dot: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).sum();
            let rb = rows[b].clone();
            for (x, y) in rows[a].iter_mut().zip(&rb) {
                *x -= dot * y;
            }
        }
        let norm = rows[a].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // Degenerate direction: reseed deterministically from the row index.
            for (i, x) in rows[a].iter_mut().enumerate() {
                *x = if i == a % dh { 1.0 } else { 0.0 };
            }
            for b in 0..a {
                let dot: f64 = rows[a].iter().zip(&rows[b]).map(|(x, y)| x * y).sum();
                let rb = rows[b].clone();
                for (x, y) in rows[a].iter_mut().zip(&rb) {
                    *x -= dot * y;
                }
            }
            let n2 = rows[a].iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in rows[a].iter_mut() {
                *x /= n2;
            }
            continue;
        }
        for x in rows[a].iter_mut() {
            *x /= norm;
        }
    }
    for a in 0..rank {
        for (i, &v) in rows[a].iter().enumerate() {
            *r.at_mut(a, i) = v as f32;
        }
    }
}

/// Train the low-rank edit on (p_orig, r_contrast) pairs with the base model
/// frozen: full-batch Adam on R/W/b per selected head, re-orthonormalizing R
/// after every step.
pub fn train_reft(
    params: &ModelParams,
    dataset: &TaskDataset,
    heads: &HeadSelection,
    hyper: &ReftHyperparams,
) -> Result<ReftTrainOutcome> {
    if dataset.pairs.is_empty() {
        return Err(GcmError::Input("empty dataset".into()));
    }
    let dh = params.config.d_head;
    if hyper.rank == 0 || hyper.rank > dh {
        return Err(GcmError::Input(format!(
            "rank must be in 1..={dh}, got {}",
            hyper.rank
        )));
    }

    // Init: random orthonormal R, zero W and b.
    let mut rng = crate::rng::substream(hyper.seed, "reft-init");
    let mut module = ReftModule {
        rank: hyper.rank,
        heads: heads
            .heads
            .iter()
            .map(|&head| {
                let mut r = Tensor2D::zeros(hyper.rank, dh);
                for v in r.data.iter_mut() {
                    *v = {
                        use rand::Rng;
                        rng.gen_range(-1.0f32..1.0)
                    };
                }
                reorthonormalize_rows(&mut r);
                ReftHeadModule { head, r, w: Tensor2D::zeros(hyper.rank, dh), b: vec![0.0; hyper.rank] }
            })
            .collect(),
    };

    let zero_like = |m: &ReftModule| -> Vec<(Tensor2D, Tensor2D, Vec<f32>)> {
        m.heads
            .iter()
            .map(|h| {
                (
                    Tensor2D::zeros(h.r.rows, h.r.cols),
                    Tensor2D::zeros(h.w.rows, h.w.cols),
                    vec![0.0; h.b.len()],
                )
            })
            .collect()
    };
    let mut m1 = zero_like(&module);
    let mut m2 = zero_like(&module);

    let total_tokens: usize = dataset.pairs.iter().map(|p| p.r_contrast.len()).sum();
    let scale = 1.0 / total_tokens as f64;
    let mut losses = Vec::with_capacity(hyper.epochs);
    let mut max_orth = module.max_orthonormality_error();
    let mut step = 0u64;

    for _epoch in 0..hyper.epochs {
        // Full-batch gradient over every (p_orig, r_contrast) pair.
        let mut grads = zero_like(&module);
        let mut sum_logp = 0f64;
        for pair in &dataset.pairs {
            let spec = InterventionSpec {
                edits: module
                    .heads
                    .iter()
                    .map(|h| LowRankEdit {
                        head: h.head,
                        max_position: pair.p_orig.len(),
                        r: h.r.clone(),
                        w: h.w.clone(),
                        b: h.b.clone(),
                        normalize: false,
                        scale: 1.0,
                    })
                    .collect(),
                ..Default::default()
            };
            let mut tokens = pair.p_orig.clone();
            tokens.extend_from_slice(&pair.r_contrast);
            let mut passes = Passes::default();
            let (trace, _) =
                params.forward_trace(&SeqInput::causal(tokens), &spec, &mut passes)?;
            let mut dlogits = Tensor2D::zeros(trace.logits.rows, trace.logits.cols);
            let p = pair.p_orig.len();
            sum_logp += crate::model::accumulate_response_dlogits(
                &trace.logits,
                p,
                &pair.r_contrast,
                -scale,
                &mut dlogits,
            );
            let result = params.backward_trace(&trace, &spec, &dlogits, &mut passes)?;
            for (g, eg) in grads.iter_mut().zip(&result.edit_grads) {
                for (a, &b) in g.0.data.iter_mut().zip(&eg.dr.data) {
                    *a += b;
                }
                for (a, &b) in g.1.data.iter_mut().zip(&eg.dw.data) {
                    *a += b;
                }
                for (a, &b) in g.2.iter_mut().zip(&eg.db) {
                    *a += b;
                }
            }
        }
        let loss = -sum_logp * scale;
        if !loss.is_finite() {
            return Err(GcmError::Training(format!(
                "reft training diverged (loss {loss}) at epoch {}",
                losses.len()
            )));
        }
        losses.push(loss);

        // Adam step per head module, then QR projection of R.
        step += 1;
        let bc1 = 1.0 - hyper.beta1.powi(step as i32);
        let bc2 = 1.0 - hyper.beta2.powi(step as i32);
        for (hi, h) in module.heads.iter_mut().enumerate() {
            let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
                for i in 0..p.len() {
                    let gi = g[i] as f64;
                    let mi = hyper.beta1 * m[i] as f64 + (1.0 - hyper.beta1) * gi;
                    let vi = hyper.beta2 * v[i] as f64 + (1.0 - hyper.beta2) * gi * gi;
                    m[i] = mi as f32;
                    v[i] = vi as f32;
                    p[i] =
                        (p[i] as f64 - hyper.lr * (mi / bc1) / ((vi / bc2).sqrt() + hyper.adam_eps))
                            as f32;
                }
            };
            update(&mut h.r.data, &grads[hi].0.data, &mut m1[hi].0.data, &mut m2[hi].0.data);
            update(&mut h.w.data, &grads[hi].1.data, &mut m1[hi].1.data, &mut m2[hi].1.data);
            update(&mut h.b, &grads[hi].2, &mut m1[hi].2, &mut m2[hi].2);
            reorthonormalize_rows(&mut h.r);
            max_orth = max_orth.max(ReftModule::orthonormality_error(&h.r));
        }
    }

    Ok(ReftTrainOutcome { module, losses, max_orthonormality_error: max_orth })
}

// ── Plan persistence ────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct ReftHeadFile {
    r: String,
    w: String,
    b: String,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    method: SteerMethod,
    alpha: f32,
    k: f64,
    heads: Vec<(usize, usize)>,
    normalized: bool,
    rank: Option<usize>,
    template_len: usize,
    d_head: usize,
    reft_extracted: bool,
    /// Base64 little-endian f32 blocks, keyed "layer:head".
    vectors: BTreeMap<String, String>,
    reft: Option<BTreeMap<String, ReftHeadFile>>,
}

fn f32s_to_b64(v: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

fn b64_to_f32s(s: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| GcmError::Validation(format!("bad base64 block: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(GcmError::Validation("vector block not a multiple of 4 bytes".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_plan(plan: &SteeringPlan, path: &Path) -> Result<()> {
    plan.validate()?;
    let mut vectors = BTreeMap::new();
    for (hi, h) in plan.heads.heads.iter().enumerate() {
        if hi < plan.vectors.len() {
            vectors.insert(format!("{}:{}", h.layer, h.head), f32s_to_b64(&plan.vectors[hi]));
        }
    }
    let reft = plan.reft.as_ref().map(|m| {
        m.heads
            .iter()
            .map(|h| {
                (
                    format!("{}:{}", h.head.layer, h.head.head),
                    ReftHeadFile {
                        r: f32s_to_b64(&h.r.data),
                        w: f32s_to_b64(&h.w.data),
                        b: f32s_to_b64(&h.b),
                    },
                )
            })
            .collect()
    });
    let file = PlanFile {
        method: plan.method,
        alpha: plan.alpha,
        k: plan.heads.k,
        heads: plan.heads.heads.iter().map(|h| (h.layer, h.head)).collect(),
        normalized: plan.normalized,
        rank: plan.reft.as_ref().map(|m| m.rank),
        template_len: plan.template_len,
        d_head: plan.d_head,
        reft_extracted: plan.reft_extracted,
        vectors,
        reft,
    };
    let mut out = serde_json::to_string_pretty(&file)?;
    out.push('\n');
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_plan(path: &Path) -> Result<SteeringPlan> {
    let text = std::fs::read_to_string(path)?;
    let file: PlanFile = serde_json::from_str(&text)?;
    let heads: Vec<HeadId> = file.heads.iter().map(|&(l, h)| HeadId::new(l, h)).collect();
    let mut vectors = Vec::new();
    for h in &heads {
        let key = format!("{}:{}", h.layer, h.head);
        if let Some(b64) = file.vectors.get(&key) {
            vectors.push(b64_to_f32s(b64)?);
        }
    }
    let reft = match (&file.reft, file.rank) {
        (Some(map), Some(rank)) => {
            let mut hmods = Vec::new();
            for h in &heads {
                let key = format!("{}:{}", h.layer, h.head);
                let entry = map
                    .get(&key)
                    .ok_or_else(|| GcmError::Validation(format!("plan missing module {key}")))?;
                let r = Tensor2D::from_vec(rank, file.d_head, b64_to_f32s(&entry.r)?)?;
                let w = Tensor2D::from_vec(rank, file.d_head, b64_to_f32s(&entry.w)?)?;
                let b = b64_to_f32s(&entry.b)?;
                hmods.push(ReftHeadModule { head: *h, r, w, b });
            }
            Some(ReftModule { rank, heads: hmods })
        }
        _ => None,
    };
    let plan = SteeringPlan {
        method: file.method,
        alpha: file.alpha,
        heads: HeadSelection { heads, k: file.k },
        template_len: file.template_len,
        d_head: file.d_head,
        vectors,
        normalized: file.normalized,
        reft,
        reft_extracted: file.reft_extracted,
    };
    plan.validate()?;
    Ok(plan)
}
