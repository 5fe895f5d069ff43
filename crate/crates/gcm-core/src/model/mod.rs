//! Decoder-only toy transformer with per-head intervention hooks, activation
//! caching, teacher-forced scoring, greedy generation, and training.
//!
//! Architecture: learned positional embeddings, pre-layernorm blocks, causal
//! attention, GELU MLP, final layernorm, linear unembedding. The intervention
//! site is the per-head output z in R^{d_head} after the attention-weighted
//! value mix and before the output projection Wo (a post-projection site is
//! available as a config switch on the spec).

mod backward;
mod checkpoint;
mod forward;
#[cfg(test)]
mod tests;
mod train;

pub use backward::{
    accumulate_response_dlogits, grad_logprob_response, grad_pair_objective, BackwardResult,
    EditGrads,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{AttnMask, ForwardTrace, SeqInput};
pub use train::{train_toy, TrainOutcome, TrainSeq, TrainingHyperparams};

use crate::error::{GcmError, Result};
use crate::tensor::Tensor2D;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Shape of the model; fixes the head index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// The default desk-scale configuration used by the trained fixture.
    pub fn toy_default(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 128,
            vocab_size,
            max_seq_len: 32,
        }
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let all_positive = self.n_layers > 0
            && self.n_heads > 0
            && self.d_model > 0
            && self.d_head > 0
            && self.d_mlp > 0
            && self.vocab_size > 0
            && self.max_seq_len > 0;
        if !all_positive {
            return Err(GcmError::Validation("config dims must be positive".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(GcmError::Validation(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }
}

/// One attention head, totally ordered by `(layer, head)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }

    pub fn index(&self, config: &ModelConfig) -> usize {
        self.layer * config.n_heads + self.head
    }

    pub fn from_index(idx: usize, config: &ModelConfig) -> Self {
        HeadId { layer: idx / config.n_heads, head: idx % config.n_heads }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.layer >= config.n_layers || self.head >= config.n_heads {
            return Err(GcmError::Input(format!(
                "head ({}, {}) out of range for {}x{} model",
                self.layer, self.head, config.n_layers, config.n_heads
            )));
        }
        Ok(())
    }
}

/// Per-layer weight blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f32>,
    pub ln1_bias: Vec<f32>,
    pub wq: Tensor2D,
    pub bq: Vec<f32>,
    pub wk: Tensor2D,
    pub bk: Vec<f32>,
    pub wv: Tensor2D,
    pub bv: Vec<f32>,
    pub wo: Tensor2D,
    pub bo: Vec<f32>,
    pub ln2_gain: Vec<f32>,
    pub ln2_bias: Vec<f32>,
    pub w1: Tensor2D,
    pub b1: Vec<f32>,
    pub w2: Tensor2D,
    pub b2: Vec<f32>,
}

/// All transformer weights. The same container doubles as a gradient and
/// optimizer-moment buffer (identical block structure).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_embed: Tensor2D,
    pub pos_embed: Tensor2D,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Vec<f32>,
    pub lnf_bias: Vec<f32>,
    pub unembed: Tensor2D,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layer = || LayerParams {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            wq: Tensor2D::zeros(d, d),
            bq: vec![0.0; d],
            wk: Tensor2D::zeros(d, d),
            bk: vec![0.0; d],
            wv: Tensor2D::zeros(d, d),
            bv: vec![0.0; d],
            wo: Tensor2D::zeros(d, d),
            bo: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            w1: Tensor2D::zeros(d, config.d_mlp),
            b1: vec![0.0; config.d_mlp],
            w2: Tensor2D::zeros(config.d_mlp, d),
            b2: vec![0.0; d],
        };
        Ok(ModelParams {
            config,
            tok_embed: Tensor2D::zeros(config.vocab_size, d),
            pos_embed: Tensor2D::zeros(config.max_seq_len, d),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            lnf_gain: vec![0.0; d],
            lnf_bias: vec![0.0; d],
            unembed: Tensor2D::zeros(d, config.vocab_size),
        })
    }

    /// Gaussian init (std 0.02), layernorm gains at 1. Seeded, deterministic.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = crate::rng::substream(seed, "model-init");
        let mut gauss = move || {
            // Box-Muller from two uniforms.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * 0.02) as f32
        };
        for block in p.blocks_mut() {
            for v in block.iter_mut() {
                *v = gauss();
            }
        }
        for layer in &mut p.layers {
            layer.ln1_gain.fill(1.0);
            layer.ln1_bias.fill(0.0);
            layer.ln2_gain.fill(1.0);
            layer.ln2_bias.fill(0.0);
            layer.bq.fill(0.0);
            layer.bk.fill(0.0);
            layer.bv.fill(0.0);
            layer.bo.fill(0.0);
            layer.b1.fill(0.0);
            layer.b2.fill(0.0);
        }
        p.lnf_gain.fill(1.0);
        p.lnf_bias.fill(0.0);
        Ok(p)
    }

    /// All weight blocks in declaration order (the checkpoint order).
    pub fn blocks(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = vec![&self.tok_embed.data, &self.pos_embed.data];
        for l in &self.layers {
            out.extend([
                l.ln1_gain.as_slice(),
                l.ln1_bias.as_slice(),
                l.wq.data.as_slice(),
                l.bq.as_slice(),
                l.wk.data.as_slice(),
                l.bk.as_slice(),
                l.wv.data.as_slice(),
                l.bv.as_slice(),
                l.wo.data.as_slice(),
                l.bo.as_slice(),
                l.ln2_gain.as_slice(),
                l.ln2_bias.as_slice(),
                l.w1.data.as_slice(),
                l.b1.as_slice(),
                l.w2.data.as_slice(),
                l.b2.as_slice(),
            ]);
        }
        out.push(&self.lnf_gain);
        out.push(&self.lnf_bias);
        out.push(&self.unembed.data);
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = vec![&mut self.tok_embed.data, &mut self.pos_embed.data];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(&mut l.wq.data);
            out.push(&mut l.bq);
            out.push(&mut l.wk.data);
            out.push(&mut l.bk);
            out.push(&mut l.wv.data);
            out.push(&mut l.bv);
            out.push(&mut l.wo.data);
            out.push(&mut l.bo);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(&mut l.w1.data);
            out.push(&mut l.b1);
            out.push(&mut l.w2.data);
            out.push(&mut l.b2);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.unembed.data);
        out
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn validate_finite(&self) -> Result<()> {
        for (i, block) in self.blocks().iter().enumerate() {
            if block.iter().any(|v| !v.is_finite()) {
                return Err(GcmError::Validation(format!("non-finite value in block {i}")));
            }
        }
        Ok(())
    }
}

/// Per-(layer, head, position) head-output vectors. Also reused for the
/// site gradients produced by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache {
    pub n_layers: usize,
    pub n_heads: usize,
    pub seq_len: usize,
    pub d_head: usize,
    data: Vec<f32>,
}

impl ActivationCache {
    pub fn zeros(config: &ModelConfig, seq_len: usize) -> Self {
        ActivationCache {
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            seq_len,
            d_head: config.d_head,
            data: vec![0.0; config.n_layers * config.n_heads * seq_len * config.d_head],
        }
    }

    #[inline]
    fn offset(&self, layer: usize, head: usize, pos: usize) -> usize {
        ((layer * self.n_heads + head) * self.seq_len + pos) * self.d_head
    }

    #[inline]
    pub fn get(&self, layer: usize, head: usize, pos: usize) -> &[f32] {
        let o = self.offset(layer, head, pos);
        &self.data[o..o + self.d_head]
    }

    #[inline]
    pub fn set(&mut self, layer: usize, head: usize, pos: usize, v: &[f32]) {
        let o = self.offset(layer, head, pos);
        self.data[o..o + self.d_head].copy_from_slice(v);
    }

    #[inline]
    pub fn add_into(&mut self, layer: usize, head: usize, pos: usize, v: &[f32]) {
        let o = self.offset(layer, head, pos);
        for (d, &s) in self.data[o..o + self.d_head].iter_mut().zip(v) {
            *d += s;
        }
    }

    pub fn validate_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(GcmError::Validation("non-finite activation".into()))
        }
    }
}

/// Where an intervention vector lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InterventionSite {
    /// Per-head output z in R^{d_head}, before the output projection.
    #[default]
    HeadOutput,
    /// The head's post-projection contribution slice, in R^{d_model}.
    HeadContribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterventionMode {
    Replace,
    Add,
}

/// One (head, position) edit: `z <- scale*vector` or `z <- z + scale*vector`.
#[derive(Debug, Clone, PartialEq)]
pub struct Intervention {
    pub head: HeadId,
    pub position: usize,
    pub vector: Vec<f32>,
    pub mode: InterventionMode,
    pub scale: f32,
}

/// A trained low-rank read/write edit hooked at one head, applied at every
/// position below `max_position`: `z <- z + scale * R^T (W z + b - R z)`,
/// optionally with the edit vector rescaled to unit norm first.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankEdit {
    pub head: HeadId,
    pub max_position: usize,
    pub r: Tensor2D,
    pub w: Tensor2D,
    pub b: Vec<f32>,
    pub normalize: bool,
    pub scale: f32,
}

/// Everything hooked into one forward call. An empty spec is a no-op.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterventionSpec {
    pub site: InterventionSite,
    pub entries: Vec<Intervention>,
    pub edits: Vec<LowRankEdit>,
}

impl InterventionSpec {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.edits.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig, seq_len: usize) -> Result<()> {
        let unit = match self.site {
            InterventionSite::HeadOutput => config.d_head,
            InterventionSite::HeadContribution => config.d_model,
        };
        for e in &self.entries {
            e.head.validate(config)?;
            if e.position >= seq_len {
                return Err(GcmError::Input(format!(
                    "intervention position {} >= sequence length {}",
                    e.position, seq_len
                )));
            }
            if e.vector.len() != unit {
                return Err(GcmError::Input(format!(
                    "intervention vector length {} != site unit {}",
                    e.vector.len(),
                    unit
                )));
            }
            if !e.scale.is_finite() || e.scale < 0.0 {
                return Err(GcmError::Input("scale must be finite and >= 0".into()));
            }
        }
        for e in &self.edits {
            e.head.validate(config)?;
            if e.r.cols != config.d_head || e.w.cols != config.d_head {
                return Err(GcmError::Input("edit read/write width != d_head".into()));
            }
            if e.r.rows != e.w.rows || e.b.len() != e.r.rows {
                return Err(GcmError::Input("edit rank mismatch across R/W/b".into()));
            }
            if e.r.rows > config.d_head {
                return Err(GcmError::Input("edit rank exceeds d_head".into()));
            }
        }
        Ok(())
    }

    /// Highest position any entry touches, for prompt-only checks.
    pub fn max_entry_position(&self) -> Option<usize> {
        self.entries.iter().map(|e| e.position).max()
    }
}

/// Forward/backward pass counter used to verify compute budgets.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct Passes {
    pub forwards: u64,
    pub backwards: u64,
}
