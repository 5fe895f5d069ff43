//! Manual reverse pass over the fixed architecture. One schedule handles
//! training (parameter gradients), attribution (gradients at the head-output
//! sites), and low-rank edit training (gradients into R/W/b), all driven by
//! an upstream gradient on the logits.

use super::forward::{ForwardTrace, SeqInput};
use super::{
    ActivationCache, InterventionMode, InterventionSite, InterventionSpec, ModelParams, Passes,
};
use crate::error::{GcmError, Result};
use crate::tensor::{
    gelu_grad, layernorm_backward, log_softmax_f64, matmul_at, matmul_bt, Tensor2D, LAYERNORM_EPS,
};

/// Gradients for one low-rank edit, aligned with the spec's edit list.
#[derive(Debug, Clone)]
pub struct EditGrads {
    pub dr: Tensor2D,
    pub dw: Tensor2D,
    pub db: Vec<f32>,
}

pub struct BackwardResult {
    pub param_grads: ModelParams,
    /// d(objective)/d(z) at every post-intervention head-output site.
    pub site_grads: ActivationCache,
    pub edit_grads: Vec<EditGrads>,
}

fn colsum_into(g: &Tensor2D, out: &mut [f32]) {
    for (c, o) in out.iter_mut().enumerate() {
        let mut acc = 0f64;
        for r in 0..g.rows {
            acc += g.at(r, c) as f64;
        }
        *o += acc as f32;
    }
}

fn add_assign(dst: &mut Tensor2D, src: &Tensor2D) {
    for (d, &s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

impl ModelParams {
    /// Reverse pass given `d(objective)/d(logits)`. Requires the matching
    /// forward trace; a trace with a different shape is a usage error.
    pub fn backward_trace(
        &self,
        trace: &ForwardTrace,
        spec: &InterventionSpec,
        dlogits: &Tensor2D,
        passes: &mut Passes,
    ) -> Result<BackwardResult> {
        if spec.site != InterventionSite::HeadOutput {
            return Err(GcmError::Input(
                "backward supports the head-output intervention site only".into(),
            ));
        }
        let cfg = &self.config;
        let t_len = trace.seq_len();
        if dlogits.rows != t_len || dlogits.cols != cfg.vocab_size {
            return Err(GcmError::Shape(format!(
                "dlogits {}x{} does not match recorded forward ({}x{})",
                dlogits.rows, dlogits.cols, t_len, cfg.vocab_size
            )));
        }
        if trace.layers.len() != cfg.n_layers {
            return Err(GcmError::Input("trace does not match this model".into()));
        }
        passes.backwards += 1;

        let (d, dh, nh) = (cfg.d_model, cfg.d_head, cfg.n_heads);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut grads = ModelParams::zeros(*cfg)?;
        let mut site_grads = ActivationCache::zeros(cfg, t_len);
        let mut edit_grads: Vec<EditGrads> = spec
            .edits
            .iter()
            .map(|e| EditGrads {
                dr: Tensor2D::zeros(e.r.rows, e.r.cols),
                dw: Tensor2D::zeros(e.w.rows, e.w.cols),
                db: vec![0.0; e.b.len()],
            })
            .collect();

        // Unembedding and final layernorm.
        let mut d_lnf_out = matmul_bt(dlogits, &self.unembed)?;
        {
            let g_unembed = matmul_at(&trace.lnf_out, dlogits)?;
            add_assign(&mut grads.unembed, &g_unembed);
        }
        let mut dx = Tensor2D::zeros(t_len, d);
        for i in 0..t_len {
            let (gx, ggain, gbias) = layernorm_backward(
                trace.final_in.row(i),
                &self.lnf_gain,
                LAYERNORM_EPS,
                d_lnf_out.row(i),
            )?;
            dx.row_mut(i).copy_from_slice(&gx);
            for (a, &b) in grads.lnf_gain.iter_mut().zip(&ggain) {
                *a += b;
            }
            for (a, &b) in grads.lnf_bias.iter_mut().zip(&gbias) {
                *a += b;
            }
        }
        d_lnf_out.data.clear();

        for li in (0..cfg.n_layers).rev() {
            let lp = &self.layers[li];
            let lt = &trace.layers[li];
            let gl = &mut grads.layers[li];

            // x_next = x_mid + mlp_out
            let d_mlp_out = dx;
            let mut d_x_mid = d_mlp_out.clone();

            // MLP
            let mut d_h_act = matmul_bt(&d_mlp_out, &lp.w2)?;
            {
                let g_w2 = matmul_at(&lt.h_act, &d_mlp_out)?;
                add_assign(&mut gl.w2, &g_w2);
                colsum_into(&d_mlp_out, &mut gl.b2);
            }
            for (g, &x) in d_h_act.data.iter_mut().zip(&lt.h_pre.data) {
                *g *= gelu_grad(x);
            }
            let d_h_pre = d_h_act;
            {
                let g_w1 = matmul_at(&lt.ln2_out, &d_h_pre)?;
                add_assign(&mut gl.w1, &g_w1);
                colsum_into(&d_h_pre, &mut gl.b1);
            }
            let d_ln2_out = matmul_bt(&d_h_pre, &lp.w1)?;
            for i in 0..t_len {
                let (gx, ggain, gbias) = layernorm_backward(
                    lt.x_mid.row(i),
                    &lp.ln2_gain,
                    LAYERNORM_EPS,
                    d_ln2_out.row(i),
                )?;
                for (a, &b) in d_x_mid.row_mut(i).iter_mut().zip(&gx) {
                    *a += b;
                }
                for (a, &b) in gl.ln2_gain.iter_mut().zip(&ggain) {
                    *a += b;
                }
                for (a, &b) in gl.ln2_bias.iter_mut().zip(&gbias) {
                    *a += b;
                }
            }

            // x_mid = x_in + attn_out
            let d_attn_out = d_x_mid;
            let mut d_x_in = d_attn_out.clone();

            let mut d_z = matmul_bt(&d_attn_out, &lp.wo)?;
            {
                let g_wo = matmul_at(&lt.z_post, &d_attn_out)?;
                add_assign(&mut gl.wo, &g_wo);
                colsum_into(&d_attn_out, &mut gl.bo);
            }

            // Record site gradients (w.r.t. the post-intervention z).
            for h in 0..nh {
                let col = h * dh;
                for pos in 0..t_len {
                    site_grads.set(li, h, pos, &d_z.row(pos)[col..col + dh]);
                }
            }

            // Backward through edits, in reverse application order.
            for app in lt.edit_apps.iter().rev() {
                let edit = &spec.edits[app.edit_idx];
                if edit.normalize {
                    return Err(GcmError::Input(
                        "backward through a normalized edit is unsupported (train unnormalized)"
                            .into(),
                    ));
                }
                let eg = &mut edit_grads[app.edit_idx];
                let col = edit.head.head * dh;
                let rank = edit.r.rows;
                let s = edit.scale as f64;
                let g: Vec<f64> = d_z.row(app.position)[col..col + dh]
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                // du_a = s * (R g)_a
                let mut du = vec![0f64; rank];
                for a in 0..rank {
                    let rr = edit.r.row(a);
                    let mut acc = 0f64;
                    for i in 0..dh {
                        acc += rr[i] as f64 * g[i];
                    }
                    du[a] = s * acc;
                }
                for a in 0..rank {
                    eg.db[a] += du[a] as f32;
                    let u_a = app.u[a] as f64;
                    for i in 0..dh {
                        let z_i = app.z_pre[i] as f64;
                        *eg.dw.at_mut(a, i) += (du[a] * z_i) as f32;
                        *eg.dr.at_mut(a, i) += (s * g[i] * u_a - du[a] * z_i) as f32;
                    }
                }
                // dz_j = g_j + sum_a du_a * (W - R)_{a j}
                let slot = &mut d_z.row_mut(app.position)[col..col + dh];
                for j in 0..dh {
                    let mut acc = g[j];
                    for a in 0..rank {
                        acc += du[a] * (edit.w.at(a, j) as f64 - edit.r.at(a, j) as f64);
                    }
                    slot[j] = acc as f32;
                }
            }

            // Replace-mode entries cut the gradient to the original z.
            for e in &spec.entries {
                if e.head.layer == li && e.mode == InterventionMode::Replace {
                    let col = e.head.head * dh;
                    d_z.row_mut(e.position)[col..col + dh].fill(0.0);
                }
            }

            // Attention mix and scores.
            let mut d_q = Tensor2D::zeros(t_len, d);
            let mut d_k = Tensor2D::zeros(t_len, d);
            let mut d_v = Tensor2D::zeros(t_len, d);
            let mut d_probs_row = vec![0f32; t_len];
            let mut d_scores_row = vec![0f32; t_len];
            for h in 0..nh {
                let col = h * dh;
                for i in 0..t_len {
                    let prow = {
                        let base = (h * t_len + i) * t_len;
                        &lt.probs.data[base..base + t_len]
                    };
                    let dzi = &d_z.row(i)[col..col + dh];
                    for j in 0..t_len {
                        if prow[j] != 0.0 {
                            let vj = &lt.v.row(j)[col..col + dh];
                            d_probs_row[j] = crate::tensor::dot_f64(dzi, vj) as f32;
                            // d_v_h[j] += probs[i][j] * d_z_h[i]
                            let dvj = &mut d_v.row_mut(j)[col..col + dh];
                            for (o, &a) in dvj.iter_mut().zip(dzi) {
                                *o += prow[j] * a;
                            }
                        } else {
                            d_probs_row[j] = 0.0;
                        }
                    }
                    // softmax backward on this row
                    let dot: f64 = prow
                        .iter()
                        .zip(&d_probs_row)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum();
                    for j in 0..t_len {
                        d_scores_row[j] =
                            (prow[j] as f64 * (d_probs_row[j] as f64 - dot)) as f32;
                    }
                    // scores[i][j] = scale * q_h[i].k_h[j]
                    let qi: Vec<f32> = lt.q.row(i)[col..col + dh].to_vec();
                    let dqi = &mut d_q.row_mut(i)[col..col + dh];
                    for j in 0..t_len {
                        let ds = d_scores_row[j];
                        if ds != 0.0 {
                            let kj = &lt.k.row(j)[col..col + dh];
                            for (o, &b) in dqi.iter_mut().zip(kj) {
                                *o += scale * ds * b;
                            }
                            let dkj = &mut d_k.row_mut(j)[col..col + dh];
                            for (o, &a) in dkj.iter_mut().zip(&qi) {
                                *o += scale * ds * a;
                            }
                        }
                    }
                }
            }

            // Projections back to ln1_out.
            {
                let g_wq = matmul_at(&lt.ln1_out, &d_q)?;
                add_assign(&mut gl.wq, &g_wq);
                colsum_into(&d_q, &mut gl.bq);
                let g_wk = matmul_at(&lt.ln1_out, &d_k)?;
                add_assign(&mut gl.wk, &g_wk);
                colsum_into(&d_k, &mut gl.bk);
                let g_wv = matmul_at(&lt.ln1_out, &d_v)?;
                add_assign(&mut gl.wv, &g_wv);
                colsum_into(&d_v, &mut gl.bv);
            }
            let mut d_ln1_out = matmul_bt(&d_q, &lp.wq)?;
            add_assign(&mut d_ln1_out, &matmul_bt(&d_k, &lp.wk)?);
            add_assign(&mut d_ln1_out, &matmul_bt(&d_v, &lp.wv)?);

            for i in 0..t_len {
                let (gx, ggain, gbias) = layernorm_backward(
                    lt.x_in.row(i),
                    &lp.ln1_gain,
                    LAYERNORM_EPS,
                    d_ln1_out.row(i),
                )?;
                for (a, &b) in d_x_in.row_mut(i).iter_mut().zip(&gx) {
                    *a += b;
                }
                for (a, &b) in gl.ln1_gain.iter_mut().zip(&ggain) {
                    *a += b;
                }
                for (a, &b) in gl.ln1_bias.iter_mut().zip(&gbias) {
                    *a += b;
                }
            }

            dx = d_x_in;
        }

        // Embeddings.
        for i in 0..t_len {
            let tok = trace.input.tokens[i] as usize;
            let pos = trace.input.pos_ids[i];
            let row = dx.row(i).to_vec();
            for (a, &b) in grads.tok_embed.row_mut(tok).iter_mut().zip(&row) {
                *a += b;
            }
            for (a, &b) in grads.pos_embed.row_mut(pos).iter_mut().zip(&row) {
                *a += b;
            }
        }

        Ok(BackwardResult { param_grads: grads, site_grads, edit_grads })
    }
}

/// `d(log pi(response | prompt))/d(logits)` rows for a causal sequence:
/// `onehot(token) - softmax(row)` at each scoring row.
pub(super) fn dlogits_for_response(
    logits: &Tensor2D,
    prompt_len: usize,
    response: &[u32],
    sign: f64,
    dlogits: &mut Tensor2D,
    row_offset: impl Fn(usize) -> usize,
) -> f64 {
    let mut total = 0f64;
    for (i, &tok) in response.iter().enumerate() {
        let row_idx = if i == 0 { prompt_len - 1 } else { row_offset(i) };
        let lsm = log_softmax_f64(logits.row(row_idx));
        total += lsm[tok as usize];
        let drow = dlogits.row_mut(row_idx);
        for (c, &l) in lsm.iter().enumerate() {
            let sm = l.exp();
            let onehot = if c == tok as usize { 1.0 } else { 0.0 };
            drow[c] += (sign * (onehot - sm)) as f32;
        }
    }
    total
}

/// Accumulate `d(sign * log pi(response))/d(logits)` for a causal layout
/// where scoring rows run from `prompt_len - 1`. Returns `log pi(response)`.
pub fn accumulate_response_dlogits(
    logits: &Tensor2D,
    prompt_len: usize,
    response: &[u32],
    sign: f64,
    dlogits: &mut Tensor2D,
) -> f64 {
    dlogits_for_response(logits, prompt_len, response, sign, dlogits, |i| prompt_len - 1 + i)
}

/// Teacher-forced log-probability and its gradient w.r.t. every parameter
/// block. The reference implementation for gradient-fidelity checks.
pub fn grad_logprob_response(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    spec: &InterventionSpec,
) -> Result<(f64, ModelParams)> {
    if response.is_empty() {
        return Err(GcmError::Input("empty response".into()));
    }
    let mut passes = Passes::default();
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(response);
    let input = SeqInput::causal(tokens);
    let (trace, _) = params.forward_trace(&input, spec, &mut passes)?;
    let mut dlogits = Tensor2D::zeros(trace.logits.rows, trace.logits.cols);
    let p = prompt.len();
    let total =
        dlogits_for_response(&trace.logits, p, response, 1.0, &mut dlogits, |i| p - 1 + i);
    let result = params.backward_trace(&trace, spec, &dlogits, &mut passes)?;
    Ok((total, result.param_grads))
}

/// The pair objective `J = log pi(resp_plus) - log pi(resp_minus)` given one
/// prompt, computed in a single packed forward, with `dJ/dz` at every
/// head-output site from a single backward.
/// Returns `(J, site_grads, head_activations)`.
pub fn grad_pair_objective(
    params: &ModelParams,
    prompt: &[u32],
    resp_plus: &[u32],
    resp_minus: &[u32],
    passes: &mut Passes,
) -> Result<(f64, ActivationCache, ActivationCache)> {
    if resp_plus.is_empty() || resp_minus.is_empty() {
        return Err(GcmError::Input("empty response".into()));
    }
    let p = prompt.len();
    let input = SeqInput::packed_pair(prompt, resp_plus, resp_minus);
    let spec = InterventionSpec::empty();
    let (trace, cache) = params.forward_trace(&input, &spec, passes)?;
    let mut dlogits = Tensor2D::zeros(trace.logits.rows, trace.logits.cols);
    let lp = dlogits_for_response(&trace.logits, p, resp_plus, 1.0, &mut dlogits, |i| p + i - 1);
    let lm = dlogits_for_response(&trace.logits, p, resp_minus, -1.0, &mut dlogits, |i| {
        p + resp_plus.len() + i - 1
    });
    let result = params.backward_trace(&trace, &spec, &dlogits, passes)?;
    Ok((lp - lm, result.site_grads, cache))
}
