//! Next-token training for the toy model: Adam on the manual backward, with
//! seeded shuffling, gradient clipping, and greedy exact-match validation.

use super::backward::dlogits_for_response;
use super::forward::SeqInput;
use super::{InterventionSpec, ModelConfig, ModelParams, Passes};
use crate::error::{GcmError, Result};
use crate::tensor::Tensor2D;
use rand::seq::SliceRandom;

/// One training sequence: concatenated (prompt, response) tokens; the loss
/// covers predictions of tokens at `loss_from..`.
#[derive(Debug, Clone)]
pub struct TrainSeq {
    pub tokens: Vec<u32>,
    pub loss_from: usize,
}

impl TrainSeq {
    pub fn new(tokens: Vec<u32>, loss_from: usize) -> Self {
        TrainSeq { tokens, loss_from }
    }

    fn prompt(&self) -> &[u32] {
        &self.tokens[..self.loss_from]
    }

    fn gold(&self) -> &[u32] {
        &self.tokens[self.loss_from..]
    }
}

#[derive(Debug, Clone)]
pub struct TrainingHyperparams {
    pub max_epochs: usize,
    /// Peak learning rate; epochs warm up to it, then cosine-decay to 5%.
    pub lr: f64,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Fraction of sequences sampled (seeded) into the validation slice.
    pub val_fraction: f64,
    pub val_min: usize,
    /// Check the validation slice every this many epochs.
    pub check_every: usize,
    /// Greedy exact-match fraction required of the returned checkpoint.
    pub target_exact_match: f64,
    /// Token that terminates greedy decoding during validation.
    pub stop_token: Option<u32>,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            max_epochs: 100,
            lr: 1e-2,
            warmup_epochs: 2,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_size: 32,
            grad_clip: 1.0,
            seed: 0,
            val_fraction: 0.05,
            val_min: 64,
            check_every: 2,
            target_exact_match: 0.99,
            stop_token: None,
        }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
    pub val_exact_match: f64,
}

fn batch_loss_and_grads(
    params: &ModelParams,
    seqs: &[&TrainSeq],
) -> Result<(f64, ModelParams)> {
    let spec = InterventionSpec::empty();
    let mut passes = Passes::default();
    let total_tokens: usize = seqs.iter().map(|s| s.tokens.len() - s.loss_from).sum();
    let scale = 1.0 / total_tokens as f64;
    let mut grads = ModelParams::zeros(params.config)?;
    let mut sum_logp = 0f64;
    for seq in seqs {
        let input = SeqInput::causal(seq.tokens.clone());
        let (trace, _) = params.forward_trace(&input, &spec, &mut passes)?;
        let mut dlogits = Tensor2D::zeros(trace.logits.rows, trace.logits.cols);
        let p = seq.loss_from;
        // d(loss)/dlogits with loss = -sum(logp)/total_tokens
        sum_logp +=
            dlogits_for_response(&trace.logits, p, seq.gold(), -scale, &mut dlogits, |i| {
                p - 1 + i
            });
        let result = params.backward_trace(&trace, &spec, &dlogits, &mut passes)?;
        for (g, b) in grads.blocks_mut().into_iter().zip(result.param_grads.blocks()) {
            for (a, &v) in g.iter_mut().zip(b) {
                *a += v;
            }
        }
    }
    Ok((-sum_logp * scale, grads))
}

fn eval_loss(params: &ModelParams, seqs: &[TrainSeq]) -> Result<f64> {
    let spec = InterventionSpec::empty();
    let mut total = 0f64;
    let mut tokens = 0usize;
    for seq in seqs {
        total += params.logprob_response(seq.prompt(), seq.gold(), &spec)?;
        tokens += seq.gold().len();
    }
    Ok(-total / tokens as f64)
}

fn exact_match(params: &ModelParams, seqs: &[&TrainSeq], stop: Option<u32>) -> Result<f64> {
    let mut hits = 0usize;
    for seq in seqs {
        let gold = seq.gold();
        let max_new = (gold.len() + 2).min(params.config.max_seq_len - seq.loss_from);
        let out = params.greedy_generate(seq.prompt(), &InterventionSpec::empty(), max_new, stop)?;
        if out == gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / seqs.len() as f64)
}

/// Train a fresh model on the given sequences. Deterministic for a fixed
/// seed: same seed, same sequences, bit-identical checkpoint.
pub fn train_toy(
    config: ModelConfig,
    seqs: &[TrainSeq],
    hyper: &TrainingHyperparams,
) -> Result<TrainOutcome> {
    config.validate()?;
    if seqs.is_empty() {
        return Err(GcmError::Input("empty training set".into()));
    }
    for s in seqs {
        if s.loss_from == 0 || s.loss_from >= s.tokens.len() {
            return Err(GcmError::Input("loss_from must split prompt|response".into()));
        }
        if s.tokens.len() > config.max_seq_len {
            return Err(GcmError::Input(format!(
                "training sequence length {} exceeds max_seq_len {}",
                s.tokens.len(),
                config.max_seq_len
            )));
        }
    }

    let mut params = ModelParams::random(config, crate::rng::derive_seed(hyper.seed, "init"))?;
    // Zero the residual-writing projections at start; stabilizes early steps.
    for layer in &mut params.layers {
        layer.wo.data.fill(0.0);
        layer.w2.data.fill(0.0);
    }

    let initial_loss = eval_loss(&params, seqs)?;

    let mut m = ModelParams::zeros(config)?;
    let mut v = ModelParams::zeros(config)?;
    let mut step = 0u64;
    let mut rng = crate::rng::substream(hyper.seed, "train-shuffle");
    let mut order: Vec<usize> = (0..seqs.len()).collect();

    let n_val = ((seqs.len() as f64 * hyper.val_fraction) as usize)
        .max(hyper.val_min)
        .min(seqs.len());
    let val_idx: Vec<usize> = {
        let mut idx: Vec<usize> = (0..seqs.len()).collect();
        let mut vrng = crate::rng::substream(hyper.seed, "train-val");
        idx.shuffle(&mut vrng);
        idx.truncate(n_val);
        idx
    };
    let val_slice: Vec<&TrainSeq> = val_idx.iter().map(|&i| &seqs[i]).collect();

    let mut epoch_losses = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..hyper.max_epochs {
        // Warmup then cosine decay to 5% of the peak rate.
        let lr = if epoch < hyper.warmup_epochs {
            hyper.lr * (epoch + 1) as f64 / hyper.warmup_epochs as f64
        } else {
            let t = (epoch - hyper.warmup_epochs) as f64
                / (hyper.max_epochs - hyper.warmup_epochs).max(1) as f64;
            let floor = 0.05 * hyper.lr;
            floor + (hyper.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        };
        order.shuffle(&mut rng);
        let mut epoch_loss = 0f64;
        let mut n_batches = 0usize;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&TrainSeq> = chunk.iter().map(|&i| &seqs[i]).collect();
            let (loss, mut grads) = batch_loss_and_grads(&params, &batch)?;
            epoch_loss += loss;
            n_batches += 1;

            // Global-norm clip.
            let norm: f64 = grads
                .blocks()
                .iter()
                .map(|b| b.iter().map(|&g| (g as f64).powi(2)).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > hyper.grad_clip {
                let s = (hyper.grad_clip / norm) as f32;
                for b in grads.blocks_mut() {
                    for g in b.iter_mut() {
                        *g *= s;
                    }
                }
            }

            step += 1;
            let bc1 = 1.0 - hyper.beta1.powi(step as i32);
            let bc2 = 1.0 - hyper.beta2.powi(step as i32);
            for (((p, g), mb), vb) in params
                .blocks_mut()
                .into_iter()
                .zip(grads.blocks())
                .zip(m.blocks_mut())
                .zip(v.blocks_mut())
            {
                for i in 0..p.len() {
                    let gi = g[i] as f64;
                    let mi = hyper.beta1 * mb[i] as f64 + (1.0 - hyper.beta1) * gi;
                    let vi = hyper.beta2 * vb[i] as f64 + (1.0 - hyper.beta2) * gi * gi;
                    mb[i] = mi as f32;
                    vb[i] = vi as f32;
                    let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + hyper.adam_eps);
                    p[i] = (p[i] as f64 - update) as f32;
                }
            }
        }
        epoch_losses.push(epoch_loss / n_batches as f64);
        epochs_run = epoch + 1;

        if epochs_run % hyper.check_every == 0 {
            let acc = exact_match(&params, &val_slice, hyper.stop_token)?;
            eprintln!(
                "epoch {epochs_run}: loss {:.4}, val exact-match {acc:.3}",
                epoch_losses[epoch]
            );
            if acc == 1.0 {
                break;
            }
        } else {
            eprintln!("epoch {epochs_run}: loss {:.4}", epoch_losses[epoch]);
        }
    }

    params.validate_finite().map_err(|e| {
        GcmError::Training(format!("diverged after {epochs_run} epochs: {e}"))
    })?;
    let val_exact_match = exact_match(&params, &val_slice, hyper.stop_token)?;
    if val_exact_match < hyper.target_exact_match {
        return Err(GcmError::Training(format!(
            "non-convergence: validation exact-match {:.4} < {:.2} after {} epochs \
             (initial loss {:.4}, final loss {:.4})",
            val_exact_match,
            hyper.target_exact_match,
            epochs_run,
            initial_loss,
            epoch_losses.last().copied().unwrap_or(f64::NAN),
        )));
    }

    Ok(TrainOutcome { params, initial_loss, epoch_losses, epochs_run, val_exact_match })
}
