//! Slow straight-line f64 reference implementation of the forward pass and
//! teacher-forced scoring. Written independently of the production kernels
//! (its own loops, no shared helpers) so tests can use it as a second route:
//! finite-difference probes evaluate through it without f32 rounding noise,
//! and its logits cross-check the production forward.

use crate::error::{GcmError, Result};
use crate::model::{InterventionMode, InterventionSite, InterventionSpec, ModelParams};
use crate::tensor::LAYERNORM_EPS;

fn layernorm64(x: &[f64], gain: &[f32], bias: &[f32]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LAYERNORM_EPS as f64).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) * inv * gain[i] as f64 + bias[i] as f64)
        .collect()
}

fn gelu64(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Full-precision forward: logits per position.
pub fn forward_logits_f64(
    params: &ModelParams,
    tokens: &[u32],
    spec: &InterventionSpec,
) -> Result<Vec<Vec<f64>>> {
    if spec.site != InterventionSite::HeadOutput {
        return Err(GcmError::Input("reference forward supports the head-output site".into()));
    }
    let cfg = &params.config;
    let t_len = tokens.len();
    let (d, dh, nh) = (cfg.d_model, cfg.d_head, cfg.n_heads);

    let mut x: Vec<Vec<f64>> = (0..t_len)
        .map(|i| {
            let tok = params.tok_embed.row(tokens[i] as usize);
            let pos = params.pos_embed.row(i);
            (0..d).map(|c| tok[c] as f64 + pos[c] as f64).collect()
        })
        .collect();

    for (li, lp) in params.layers.iter().enumerate() {
        let ln1: Vec<Vec<f64>> =
            x.iter().map(|row| layernorm64(row, &lp.ln1_gain, &lp.ln1_bias)).collect();
        let proj = |w: &crate::tensor::Tensor2D, b: &[f32]| -> Vec<Vec<f64>> {
            ln1.iter()
                .map(|row| {
                    (0..d)
                        .map(|c| {
                            let mut acc = b[c] as f64;
                            for (r, &v) in row.iter().enumerate() {
                                acc += v * w.at(r, c) as f64;
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        let q = proj(&lp.wq, &lp.bq);
        let k = proj(&lp.wk, &lp.bk);
        let v = proj(&lp.wv, &lp.bv);

        let mut z: Vec<Vec<f64>> = vec![vec![0.0; d]; t_len];
        let scale = 1.0 / (dh as f64).sqrt();
        for h in 0..nh {
            let col = h * dh;
            for i in 0..t_len {
                let mut scores = Vec::with_capacity(i + 1);
                for j in 0..=i {
                    let mut acc = 0f64;
                    for c in 0..dh {
                        acc += q[i][col + c] * k[j][col + c];
                    }
                    scores.push(acc * scale);
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    let p = e / sum;
                    for c in 0..dh {
                        z[i][col + c] += p * v[j][col + c];
                    }
                }
            }
        }

        for e in &spec.entries {
            if e.head.layer != li || e.position >= t_len {
                continue;
            }
            let col = e.head.head * dh;
            for c in 0..dh {
                match e.mode {
                    InterventionMode::Replace => {
                        z[e.position][col + c] = e.scale as f64 * e.vector[c] as f64;
                    }
                    InterventionMode::Add => {
                        z[e.position][col + c] += e.scale as f64 * e.vector[c] as f64;
                    }
                }
            }
        }
        for edit in &spec.edits {
            if edit.head.layer != li {
                continue;
            }
            let col = edit.head.head * dh;
            let rank = edit.r.rows;
            for pos in 0..edit.max_position.min(t_len) {
                let zv: Vec<f64> = (0..dh).map(|c| z[pos][col + c]).collect();
                let mut u = vec![0f64; rank];
                for a in 0..rank {
                    let mut acc = edit.b[a] as f64;
                    for c in 0..dh {
                        acc += (edit.w.at(a, c) as f64 - edit.r.at(a, c) as f64) * zv[c];
                    }
                    u[a] = acc;
                }
                let mut evec = vec![0f64; dh];
                for a in 0..rank {
                    for c in 0..dh {
                        evec[c] += edit.r.at(a, c) as f64 * u[a];
                    }
                }
                if edit.normalize {
                    let norm = evec.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm <= 1e-12 {
                        continue;
                    }
                    for v in evec.iter_mut() {
                        *v /= norm;
                    }
                }
                for c in 0..dh {
                    z[pos][col + c] += edit.scale as f64 * evec[c];
                }
            }
        }

        for i in 0..t_len {
            let mut attn = vec![0f64; d];
            for (r, &zv) in z[i].iter().enumerate() {
                for c in 0..d {
                    attn[c] += zv * lp.wo.at(r, c) as f64;
                }
            }
            for c in 0..d {
                x[i][c] += attn[c] + lp.bo[c] as f64;
            }
            let ln2 = layernorm64(&x[i], &lp.ln2_gain, &lp.ln2_bias);
            let mut hid = vec![0f64; cfg.d_mlp];
            for (m, h) in hid.iter_mut().enumerate() {
                let mut acc = lp.b1[m] as f64;
                for (r, &v) in ln2.iter().enumerate() {
                    acc += v * lp.w1.at(r, m) as f64;
                }
                *h = gelu64(acc);
            }
            for c in 0..d {
                let mut acc = lp.b2[c] as f64;
                for (m, &h) in hid.iter().enumerate() {
                    acc += h * lp.w2.at(m, c) as f64;
                }
                x[i][c] += acc;
            }
        }
    }

    let mut logits = Vec::with_capacity(t_len);
    for row in &x {
        let lnf = layernorm64(row, &params.lnf_gain, &params.lnf_bias);
        let mut out = vec![0f64; cfg.vocab_size];
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0f64;
            for (r, &v) in lnf.iter().enumerate() {
                acc += v * params.unembed.at(r, c) as f64;
            }
            *o = acc;
        }
        logits.push(out);
    }
    Ok(logits)
}

/// Teacher-forced log-probability through the f64 reference forward.
pub fn logprob_response_f64(
    params: &ModelParams,
    prompt: &[u32],
    response: &[u32],
    spec: &InterventionSpec,
) -> Result<f64> {
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(response);
    let logits = forward_logits_f64(params, &tokens, spec)?;
    let mut total = 0f64;
    for (i, &t) in response.iter().enumerate() {
        let row = &logits[prompt.len() - 1 + i];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += row[t as usize] - lse;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::VOCAB_SIZE;
    use crate::model::{InterventionSpec, ModelConfig, ModelParams};

    #[test]
    fn reference_and_production_forward_agree() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_head: 8,
            d_mlp: 32,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 16,
        };
        let params = ModelParams::random(cfg, 77).unwrap();
        let toks: Vec<u32> = vec![0, 2, 4, 9, 5, 2];
        let spec = InterventionSpec::empty();
        let (logits, _) = params.forward_with_cache(&toks, &spec).unwrap();
        let reference = forward_logits_f64(&params, &toks, &spec).unwrap();
        for i in 0..toks.len() {
            for c in 0..cfg.vocab_size {
                let a = logits.at(i, c) as f64;
                let b = reference[i][c];
                assert!((a - b).abs() < 1e-4, "({i},{c}): {a} vs {b}");
            }
        }
    }
}
