//! Forward pass over a (possibly branch-packed) token sequence, with the
//! intervention hook at the per-head output site and full activation trace
//! for the manual backward.

use super::{
    ActivationCache, InterventionSite, InterventionSpec, InterventionMode, ModelParams, Passes,
};
use crate::error::{GcmError, Result};
use crate::tensor::{
    gelu, layernorm, matmul, softmax_into, log_softmax_f64, Tensor2D, Tensor3D, LAYERNORM_EPS,
};

/// Attention visibility structure over packed positions.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnMask {
    /// Plain causal: position i attends to j <= i.
    Causal,
    /// Shared-prefix packing: segment 0 is visible to everyone (causally);
    /// other segments only see themselves plus segment 0.
    Segmented(Vec<u16>),
}

impl AttnMask {
    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        match self {
            AttnMask::Causal => j <= i,
            AttnMask::Segmented(seg) => j <= i && (seg[j] == 0 || seg[j] == seg[i]),
        }
    }
}

/// One forward input: tokens, their position ids, and the mask.
#[derive(Debug, Clone)]
pub struct SeqInput {
    pub tokens: Vec<u32>,
    pub pos_ids: Vec<usize>,
    pub mask: AttnMask,
}

impl SeqInput {
    pub fn causal(tokens: Vec<u32>) -> Self {
        let pos_ids = (0..tokens.len()).collect();
        SeqInput { tokens, pos_ids, mask: AttnMask::Causal }
    }

    /// Pack `prompt` once with two teacher-forced response branches. Both
    /// branches restart position ids at the prompt boundary and attend to the
    /// shared prompt but not to each other.
    pub fn packed_pair(prompt: &[u32], resp_a: &[u32], resp_b: &[u32]) -> Self {
        let p = prompt.len();
        let mut tokens = Vec::with_capacity(p + resp_a.len() + resp_b.len());
        let mut pos_ids = Vec::with_capacity(tokens.capacity());
        let mut seg = Vec::with_capacity(tokens.capacity());
        tokens.extend_from_slice(prompt);
        pos_ids.extend(0..p);
        seg.extend(std::iter::repeat(0u16).take(p));
        for (s, resp) in [(1u16, resp_a), (2u16, resp_b)] {
            tokens.extend_from_slice(resp);
            pos_ids.extend(p..p + resp.len());
            seg.extend(std::iter::repeat(s).take(resp.len()));
        }
        SeqInput { tokens, pos_ids, mask: AttnMask::Segmented(seg) }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub(super) struct EditApplication {
    pub edit_idx: usize,
    pub position: usize,
    /// Read vector u = Wz + b - Rz at the pre-edit z.
    pub u: Vec<f32>,
    /// Pre-edit z at the site (needed for dR and dW).
    pub z_pre: Vec<f32>,
}

pub(super) struct LayerTrace {
    pub x_in: Tensor2D,
    pub ln1_out: Tensor2D,
    pub q: Tensor2D,
    pub k: Tensor2D,
    pub v: Tensor2D,
    pub probs: Tensor3D,
    pub z_post: Tensor2D,
    pub edit_apps: Vec<EditApplication>,
    pub x_mid: Tensor2D,
    pub ln2_out: Tensor2D,
    pub h_pre: Tensor2D,
    pub h_act: Tensor2D,
}

/// Saved activations from one forward call; the backward pass consumes this.
pub struct ForwardTrace {
    pub(super) input: SeqInput,
    pub(super) layers: Vec<LayerTrace>,
    pub(super) final_in: Tensor2D,
    pub(super) lnf_out: Tensor2D,
    pub logits: Tensor2D,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.input.tokens.len()
    }
}

fn linear(x: &Tensor2D, w: &Tensor2D, b: &[f32]) -> Result<Tensor2D> {
    let mut out = matmul(x, w)?;
    for r in 0..out.rows {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

impl ModelParams {
    fn validate_input(&self, input: &SeqInput) -> Result<()> {
        let cfg = &self.config;
        if input.tokens.is_empty() {
            return Err(GcmError::Input("empty token sequence".into()));
        }
        if input.tokens.len() != input.pos_ids.len() {
            return Err(GcmError::Input("tokens/pos_ids length mismatch".into()));
        }
        for &t in &input.tokens {
            if t as usize >= cfg.vocab_size {
                return Err(GcmError::Input(format!("token id {t} out of vocab")));
            }
        }
        for &p in &input.pos_ids {
            if p >= cfg.max_seq_len {
                return Err(GcmError::Input(format!(
                    "position {p} exceeds max_seq_len {}",
                    cfg.max_seq_len
                )));
            }
        }
        Ok(())
    }

    /// Full forward with trace. The one place a forward pass happens.
    pub fn forward_trace(
        &self,
        input: &SeqInput,
        spec: &InterventionSpec,
        passes: &mut Passes,
    ) -> Result<(ForwardTrace, ActivationCache)> {
        self.validate_input(input)?;
        spec.validate(&self.config, input.len())?;
        passes.forwards += 1;

        let cfg = &self.config;
        let t_len = input.len();
        let (d, dh, nh) = (cfg.d_model, cfg.d_head, cfg.n_heads);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut cache = ActivationCache::zeros(cfg, t_len);

        let mut x = Tensor2D::zeros(t_len, d);
        for i in 0..t_len {
            let tok = self.tok_embed.row(input.tokens[i] as usize);
            let pos = self.pos_embed.row(input.pos_ids[i]);
            for (o, (&a, &b)) in x.row_mut(i).iter_mut().zip(tok.iter().zip(pos)) {
                *o = a + b;
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for (li, lp) in self.layers.iter().enumerate() {
            let x_in = x.clone();
            let mut ln1_out = Tensor2D::zeros(t_len, d);
            for i in 0..t_len {
                let row = layernorm(x_in.row(i), &lp.ln1_gain, &lp.ln1_bias, LAYERNORM_EPS)?;
                ln1_out.row_mut(i).copy_from_slice(&row);
            }
            let q = linear(&ln1_out, &lp.wq, &lp.bq)?;
            let k = linear(&ln1_out, &lp.wk, &lp.bk)?;
            let v = linear(&ln1_out, &lp.wv, &lp.bv)?;

            let mut probs = Tensor3D::zeros(nh, t_len, t_len);
            let mut z_pre = Tensor2D::zeros(t_len, d);
            let mut scores = vec![0f32; t_len];
            for h in 0..nh {
                let col = h * dh;
                for i in 0..t_len {
                    for (j, s) in scores.iter_mut().enumerate().take(t_len) {
                        if input.mask.allowed(i, j) {
                            let qi = &q.row(i)[col..col + dh];
                            let kj = &k.row(j)[col..col + dh];
                            *s = crate::tensor::dot_f64(qi, kj) as f32 * scale;
                        } else {
                            *s = f32::NEG_INFINITY;
                        }
                    }
                    let prow = {
                        let base = (h * t_len + i) * t_len;
                        &mut probs.data[base..base + t_len]
                    };
                    softmax_into(&scores, prow);
                    // z_h[i] = sum_j probs[i][j] * v_h[j]
                    let zrow = &mut z_pre.row_mut(i)[col..col + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        if p != 0.0 {
                            let vj = &v.row(j)[col..col + dh];
                            for (zo, &vv) in zrow.iter_mut().zip(vj) {
                                *zo += p * vv;
                            }
                        }
                    }
                }
            }

            // Intervention hook at the head-output site.
            let mut z_post = z_pre.clone();
            if spec.site == InterventionSite::HeadOutput {
                for e in &spec.entries {
                    if e.head.layer != li {
                        continue;
                    }
                    let col = e.head.head * dh;
                    let slot = &mut z_post.row_mut(e.position)[col..col + dh];
                    match e.mode {
                        InterventionMode::Replace => {
                            for (s, &vv) in slot.iter_mut().zip(&e.vector) {
                                *s = e.scale * vv;
                            }
                        }
                        InterventionMode::Add => {
                            for (s, &vv) in slot.iter_mut().zip(&e.vector) {
                                *s += e.scale * vv;
                            }
                        }
                    }
                }
            }
            let mut edit_apps = Vec::new();
            for (ei, edit) in spec.edits.iter().enumerate() {
                if edit.head.layer != li {
                    continue;
                }
                let col = edit.head.head * dh;
                let rank = edit.r.rows;
                for pos in 0..edit.max_position.min(t_len) {
                    let z_now: Vec<f32> = z_post.row(pos)[col..col + dh].to_vec();
                    // u = W z + b - R z
                    let mut u = vec![0f32; rank];
                    for a in 0..rank {
                        let mut acc = edit.b[a] as f64;
                        let wr = edit.w.row(a);
                        let rr = edit.r.row(a);
                        for i in 0..dh {
                            acc += (wr[i] as f64 - rr[i] as f64) * z_now[i] as f64;
                        }
                        u[a] = acc as f32;
                    }
                    // e = R^T u
                    let mut evec = vec![0f32; dh];
                    for a in 0..rank {
                        let rr = edit.r.row(a);
                        for i in 0..dh {
                            evec[i] += rr[i] * u[a];
                        }
                    }
                    if edit.normalize {
                        let norm =
                            evec.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt() as f32;
                        if norm <= 1e-12 {
                            continue; // zero-norm edit: skip this position
                        }
                        for v in evec.iter_mut() {
                            *v /= norm;
                        }
                    }
                    let slot = &mut z_post.row_mut(pos)[col..col + dh];
                    for (s, &ev) in slot.iter_mut().zip(&evec) {
                        *s += edit.scale * ev;
                    }
                    edit_apps.push(EditApplication { edit_idx: ei, position: pos, u, z_pre: z_now });
                }
            }

            for h in 0..nh {
                let col = h * dh;
                for pos in 0..t_len {
                    cache.set(li, h, pos, &z_post.row(pos)[col..col + dh]);
                }
            }

            let mut attn_out = if spec.site == InterventionSite::HeadContribution
                && spec.entries.iter().any(|e| e.head.layer == li)
            {
                // Per-head contribution slices, intervened post-projection.
                let mut out = Tensor2D::zeros(t_len, d);
                for h in 0..nh {
                    let col = h * dh;
                    let mut contrib = Tensor2D::zeros(t_len, d);
                    for i in 0..t_len {
                        let zr = &z_post.row(i)[col..col + dh];
                        for (kk, &zv) in zr.iter().enumerate() {
                            let wrow = self.layers[li].wo.row(col + kk);
                            for (o, &wv) in contrib.row_mut(i).iter_mut().zip(wrow) {
                                *o += zv * wv;
                            }
                        }
                    }
                    for e in &spec.entries {
                        if e.head.layer != li || e.head.head != h {
                            continue;
                        }
                        let slot = contrib.row_mut(e.position);
                        match e.mode {
                            InterventionMode::Replace => {
                                for (s, &vv) in slot.iter_mut().zip(&e.vector) {
                                    *s = e.scale * vv;
                                }
                            }
                            InterventionMode::Add => {
                                for (s, &vv) in slot.iter_mut().zip(&e.vector) {
                                    *s += e.scale * vv;
                                }
                            }
                        }
                    }
                    for i in 0..t_len * d {
                        out.data[i] += contrib.data[i];
                    }
                }
                out
            } else {
                matmul(&z_post, &lp.wo)?
            };
            for i in 0..t_len {
                for (o, &bv) in attn_out.row_mut(i).iter_mut().zip(&lp.bo) {
                    *o += bv;
                }
            }

            let mut x_mid = x_in.clone();
            for i in 0..t_len * d {
                x_mid.data[i] += attn_out.data[i];
            }

            let mut ln2_out = Tensor2D::zeros(t_len, d);
            for i in 0..t_len {
                let row = layernorm(x_mid.row(i), &lp.ln2_gain, &lp.ln2_bias, LAYERNORM_EPS)?;
                ln2_out.row_mut(i).copy_from_slice(&row);
            }
            let h_pre = linear(&ln2_out, &lp.w1, &lp.b1)?;
            let mut h_act = h_pre.clone();
            for v in h_act.data.iter_mut() {
                *v = gelu(*v);
            }
            let mlp_out = linear(&h_act, &lp.w2, &lp.b2)?;

            let mut x_next = x_mid.clone();
            for i in 0..t_len * d {
                x_next.data[i] += mlp_out.data[i];
            }

            layers.push(LayerTrace {
                x_in,
                ln1_out,
                q,
                k,
                v,
                probs,
                z_post,
                edit_apps,
                x_mid,
                ln2_out,
                h_pre,
                h_act,
            });
            x = x_next;
        }

        let final_in = x;
        let mut lnf_out = Tensor2D::zeros(t_len, d);
        for i in 0..t_len {
            let row = layernorm(final_in.row(i), &self.lnf_gain, &self.lnf_bias, LAYERNORM_EPS)?;
            lnf_out.row_mut(i).copy_from_slice(&row);
        }
        let logits = matmul(&lnf_out, &self.unembed)?;

        Ok((
            ForwardTrace { input: input.clone(), layers, final_in, lnf_out, logits },
            cache,
        ))
    }

    /// Causal forward: logits per position plus the post-intervention cache.
    pub fn forward_with_cache(
        &self,
        tokens: &[u32],
        spec: &InterventionSpec,
    ) -> Result<(Tensor2D, ActivationCache)> {
        let mut passes = Passes::default();
        let (trace, cache) =
            self.forward_trace(&SeqInput::causal(tokens.to_vec()), spec, &mut passes)?;
        Ok((trace.logits, cache))
    }

    fn check_prompt_only(&self, spec: &InterventionSpec, prompt_len: usize) -> Result<()> {
        if let Some(maxp) = spec.max_entry_position() {
            if maxp >= prompt_len {
                return Err(GcmError::Input(format!(
                    "intervention at position {maxp} but prompt has length {prompt_len}"
                )));
            }
        }
        for e in &spec.edits {
            if e.max_position > prompt_len {
                return Err(GcmError::Input("edit extends past prompt".into()));
            }
        }
        Ok(())
    }

    /// Teacher-forced log probability of `response` given `prompt`, with
    /// interventions applied at prompt positions only.
    pub fn logprob_response(
        &self,
        prompt: &[u32],
        response: &[u32],
        spec: &InterventionSpec,
    ) -> Result<f64> {
        let mut passes = Passes::default();
        self.logprob_response_counted(prompt, response, spec, &mut passes)
    }

    pub fn logprob_response_counted(
        &self,
        prompt: &[u32],
        response: &[u32],
        spec: &InterventionSpec,
        passes: &mut Passes,
    ) -> Result<f64> {
        if response.is_empty() {
            return Err(GcmError::Input("empty response".into()));
        }
        if prompt.is_empty() {
            return Err(GcmError::Input("empty prompt".into()));
        }
        self.check_prompt_only(spec, prompt.len())?;
        let mut tokens = Vec::with_capacity(prompt.len() + response.len());
        tokens.extend_from_slice(prompt);
        tokens.extend_from_slice(response);
        if tokens.len() > self.config.max_seq_len {
            return Err(GcmError::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        let (trace, _) = self.forward_trace(&SeqInput::causal(tokens), spec, passes)?;
        let p = prompt.len();
        let mut total = 0f64;
        for (i, &tok) in response.iter().enumerate() {
            let row = trace.logits.row(p - 1 + i);
            total += log_softmax_f64(row)[tok as usize];
        }
        Ok(total)
    }

    /// Score two responses against one prompt in a single packed forward.
    /// Returns `(logprob_a, logprob_b)`.
    pub fn score_pair(
        &self,
        prompt: &[u32],
        resp_a: &[u32],
        resp_b: &[u32],
        spec: &InterventionSpec,
        passes: &mut Passes,
    ) -> Result<(f64, f64)> {
        if resp_a.is_empty() || resp_b.is_empty() {
            return Err(GcmError::Input("empty response".into()));
        }
        if prompt.is_empty() {
            return Err(GcmError::Input("empty prompt".into()));
        }
        self.check_prompt_only(spec, prompt.len())?;
        let p = prompt.len();
        if p + resp_a.len().max(resp_b.len()) > self.config.max_seq_len {
            return Err(GcmError::Input("sequence exceeds max_seq_len".into()));
        }
        let input = SeqInput::packed_pair(prompt, resp_a, resp_b);
        let (trace, _) = self.forward_trace(&input, spec, passes)?;
        let score_branch = |start: usize, resp: &[u32]| -> f64 {
            let mut total = log_softmax_f64(trace.logits.row(p - 1))[resp[0] as usize];
            for i in 1..resp.len() {
                total += log_softmax_f64(trace.logits.row(start + i - 1))[resp[i] as usize];
            }
            total
        };
        let la = score_branch(p, resp_a);
        let lb = score_branch(p + resp_a.len(), resp_b);
        Ok((la, lb))
    }

    /// Greedy decoding; ties break toward the lowest token id. Interventions
    /// stay pinned at their prompt positions for every decode step. Returns
    /// the generated continuation (including the stop token when produced).
    pub fn greedy_generate(
        &self,
        prompt: &[u32],
        spec: &InterventionSpec,
        max_new: usize,
        stop_token: Option<u32>,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(GcmError::Input("empty prompt".into()));
        }
        if prompt.len() + max_new > self.config.max_seq_len {
            return Err(GcmError::Input(format!(
                "prompt {} + max_new {} exceeds max_seq_len {}",
                prompt.len(),
                max_new,
                self.config.max_seq_len
            )));
        }
        self.check_prompt_only(spec, prompt.len())?;
        let mut tokens = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let (logits, _) = self.forward_with_cache(&tokens, spec)?;
            let last = logits.row(logits.rows - 1);
            let mut best = 0usize;
            let mut best_v = f32::NEG_INFINITY;
            for (i, &v) in last.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            let tok = best as u32;
            tokens.push(tok);
            out.push(tok);
            if Some(tok) == stop_token {
                break;
            }
        }
        Ok(out)
    }
}
