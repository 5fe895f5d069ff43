use super::*;
use crate::data::{pair_from_query, EOS, VOCAB_SIZE};
use crate::tensor::log_softmax_f64;
use rand::Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 32,
        vocab_size: VOCAB_SIZE,
        max_seq_len: 32,
    }
}

fn small_model(seed: u64) -> ModelParams {
    ModelParams::random(small_config(), seed).unwrap()
}

fn tokens(seed: u64, len: usize) -> Vec<u32> {
    let mut rng = crate::rng::substream(seed, "model-test-tokens");
    (0..len).map(|_| rng.gen_range(0..VOCAB_SIZE as u32)).collect()
}

#[test]
fn zero_params_give_zero_logits_uniform_softmax() {
    let params = ModelParams::zeros(small_config()).unwrap();
    let (logits, _) = params.forward_with_cache(&tokens(1, 6), &InterventionSpec::empty()).unwrap();
    assert!(logits.data.iter().all(|&v| v == 0.0));
    let lsm = log_softmax_f64(logits.row(0));
    let want = (1.0 / VOCAB_SIZE as f64).ln();
    assert!(lsm.iter().all(|&l| (l - want).abs() < 1e-9));
}

#[test]
fn empty_spec_matches_no_hook_forward() {
    let params = small_model(2);
    let toks = tokens(3, 8);
    let (a, _) = params.forward_with_cache(&toks, &InterventionSpec::empty()).unwrap();
    let (b, _) = params.forward_with_cache(&toks, &InterventionSpec::default()).unwrap();
    assert_eq!(a.data, b.data);
}

#[test]
fn self_patch_is_bit_identical() {
    let params = small_model(4);
    let toks = tokens(5, 9);
    let (base, cache) = params.forward_with_cache(&toks, &InterventionSpec::empty()).unwrap();
    // Replace every head at every position with its own cached value.
    let mut entries = Vec::new();
    for layer in 0..params.config.n_layers {
        for head in 0..params.config.n_heads {
            for pos in 0..toks.len() {
                entries.push(Intervention {
                    head: HeadId::new(layer, head),
                    position: pos,
                    vector: cache.get(layer, head, pos).to_vec(),
                    mode: InterventionMode::Replace,
                    scale: 1.0,
                });
            }
        }
    }
    let spec = InterventionSpec { entries, ..Default::default() };
    let (patched, patched_cache) = params.forward_with_cache(&toks, &spec).unwrap();
    assert_eq!(base.data, patched.data);
    assert_eq!(cache, patched_cache);
}

#[test]
fn add_mode_scale_linearity_is_exact() {
    let params = small_model(6);
    let toks = tokens(7, 7);
    let mut rng = crate::rng::substream(8, "vec");
    let v: Vec<f32> = (0..params.config.d_head).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let v2: Vec<f32> = v.iter().map(|&x| 2.0 * x).collect();
    let mk = |vector: Vec<f32>, scale: f32| InterventionSpec {
        entries: vec![Intervention {
            head: HeadId::new(1, 0),
            position: 2,
            vector,
            mode: InterventionMode::Add,
            scale,
        }],
        ..Default::default()
    };
    let (a, _) = params.forward_with_cache(&toks, &mk(v.clone(), 2.0)).unwrap();
    let (b, _) = params.forward_with_cache(&toks, &mk(v2, 1.0)).unwrap();
    assert_eq!(a.data, b.data);
}

#[test]
fn causality_logits_ignore_suffix() {
    let params = small_model(9);
    let mut toks = tokens(10, 10);
    let (a, _) = params.forward_with_cache(&toks, &InterventionSpec::empty()).unwrap();
    // Change the last token; logits at earlier positions must not move.
    toks[9] = (toks[9] + 1) % VOCAB_SIZE as u32;
    let (b, _) = params.forward_with_cache(&toks, &InterventionSpec::empty()).unwrap();
    for pos in 0..9 {
        assert_eq!(a.row(pos), b.row(pos), "position {pos}");
    }
    assert_ne!(a.row(9), b.row(9));
}

#[test]
fn intervention_after_prompt_rejected_for_scoring() {
    let params = small_model(11);
    let prompt = tokens(12, 5);
    let resp = tokens(13, 3);
    let spec = InterventionSpec {
        entries: vec![Intervention {
            head: HeadId::new(0, 0),
            position: 6, // inside the response
            vector: vec![0.0; params.config.d_head],
            mode: InterventionMode::Add,
            scale: 1.0,
        }],
        ..Default::default()
    };
    assert!(params.logprob_response(&prompt, &resp, &spec).is_err());
}

#[test]
fn out_of_range_inputs_rejected() {
    let params = small_model(14);
    let spec = InterventionSpec::empty();
    assert!(params.forward_with_cache(&[], &spec).is_err());
    assert!(params.forward_with_cache(&[VOCAB_SIZE as u32], &spec).is_err());
    assert!(params.logprob_response(&[1, 2], &[], &spec).is_err());
    let too_long = tokens(15, 33);
    assert!(params.forward_with_cache(&too_long, &spec).is_err());
}

#[test]
fn zero_weight_logprob_is_uniform() {
    let params = ModelParams::zeros(small_config()).unwrap();
    let prompt = tokens(16, 4);
    let resp = tokens(17, 5);
    let lp = params.logprob_response(&prompt, &resp, &InterventionSpec::empty()).unwrap();
    let want = 5.0 * (1.0 / VOCAB_SIZE as f64).ln();
    assert!((lp - want).abs() < 1e-9, "{lp} vs {want}");
}

#[test]
fn logprob_matches_per_token_recompute_oracle() {
    let params = small_model(18);
    let prompt = tokens(19, 5);
    let resp = tokens(20, 6);
    let spec = InterventionSpec::empty();
    let got = params.logprob_response(&prompt, &resp, &spec).unwrap();
    // Oracle: full forward, then per-token log-softmax picks.
    let mut all = prompt.clone();
    all.extend_from_slice(&resp);
    let (logits, _) = params.forward_with_cache(&all, &spec).unwrap();
    let mut want = 0f64;
    for (i, &t) in resp.iter().enumerate() {
        want += log_softmax_f64(logits.row(prompt.len() - 1 + i))[t as usize];
    }
    assert!((got - want).abs() < 1e-9);
}

#[test]
fn packed_pair_scoring_matches_two_causal_runs() {
    let params = small_model(21);
    let pair = pair_from_query(&[4, 7, 5, 9]);
    let spec = InterventionSpec::empty();
    let mut passes = Passes::default();
    let (la, lb) = params
        .score_pair(&pair.p_orig, &pair.r_contrast, &pair.r_orig, &spec, &mut passes)
        .unwrap();
    assert_eq!(passes, Passes { forwards: 1, backwards: 0 });
    let wa = params.logprob_response(&pair.p_orig, &pair.r_contrast, &spec).unwrap();
    let wb = params.logprob_response(&pair.p_orig, &pair.r_orig, &spec).unwrap();
    // Same math, different mask bookkeeping; allow only tiny drift.
    assert!((la - wa).abs() < 1e-6, "{la} vs {wa}");
    assert!((lb - wb).abs() < 1e-6, "{lb} vs {wb}");
}

#[test]
fn packed_pair_cache_matches_prompt_run_at_prompt_positions() {
    let params = small_model(22);
    let pair = pair_from_query(&[6, 6, 8]);
    let spec = InterventionSpec::empty();
    let (_, prompt_cache) = params.forward_with_cache(&pair.p_orig, &spec).unwrap();
    let input = SeqInput::packed_pair(&pair.p_orig, &pair.r_contrast, &pair.r_orig);
    let mut passes = Passes::default();
    let (_, packed_cache) = params.forward_trace(&input, &spec, &mut passes).unwrap();
    for layer in 0..params.config.n_layers {
        for head in 0..params.config.n_heads {
            for pos in 0..pair.p_orig.len() {
                assert_eq!(
                    prompt_cache.get(layer, head, pos),
                    packed_cache.get(layer, head, pos)
                );
            }
        }
    }
}

#[test]
fn greedy_generate_contracts() {
    let params = small_model(23);
    let prompt = tokens(24, 5);
    let spec = InterventionSpec::empty();
    let empty = params.greedy_generate(&prompt, &spec, 0, Some(EOS)).unwrap();
    assert!(empty.is_empty());
    let a = params.greedy_generate(&prompt, &spec, 8, Some(EOS)).unwrap();
    let b = params.greedy_generate(&prompt, &spec, 8, Some(EOS)).unwrap();
    assert_eq!(a, b);
    // Zero params: every logit ties, so the lowest token id (0) wins.
    let zero = ModelParams::zeros(small_config()).unwrap();
    let out = zero.greedy_generate(&prompt, &spec, 3, None).unwrap();
    assert_eq!(out, vec![0, 0, 0]);
}

#[test]
fn site_switch_pre_and_post_projection_agree_on_add() {
    // Adding v at the head-output site equals adding v·Wo_h at the
    // contribution site.
    let params = small_model(25);
    let toks = tokens(26, 6);
    let head = HeadId::new(1, 1);
    let dh = params.config.d_head;
    let d = params.config.d_model;
    let mut rng = crate::rng::substream(27, "postwo");
    let v: Vec<f32> = (0..dh).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let pre = InterventionSpec {
        entries: vec![Intervention {
            head,
            position: 3,
            vector: v.clone(),
            mode: InterventionMode::Add,
            scale: 1.0,
        }],
        ..Default::default()
    };
    // v · Wo_h rows for this head.
    let mut vw = vec![0f32; d];
    for (i, &vi) in v.iter().enumerate() {
        let row = params.layers[1].wo.row(head.head * dh + i);
        for (o, &w) in vw.iter_mut().zip(row) {
            *o += vi * w;
        }
    }
    let post = InterventionSpec {
        site: InterventionSite::HeadContribution,
        entries: vec![Intervention {
            head,
            position: 3,
            vector: vw,
            mode: InterventionMode::Add,
            scale: 1.0,
        }],
        ..Default::default()
    };
    let (a, _) = params.forward_with_cache(&toks, &pre).unwrap();
    let (b, _) = params.forward_with_cache(&toks, &post).unwrap();
    for (x, y) in a.data.iter().zip(&b.data) {
        assert!((x - y).abs() < 2e-4, "{x} vs {y}");
    }
}

// ── Gradient fidelity ───────────────────────────────────────────────────────

/// Stratified coordinate sample: a few coordinates from every weight block.
fn sample_coords(params: &ModelParams, per_block: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = crate::rng::substream(seed, "fd-coords");
    let mut coords = Vec::new();
    for (bi, block) in params.blocks().iter().enumerate() {
        for _ in 0..per_block.min(block.len()) {
            coords.push((bi, rng.gen_range(0..block.len())));
        }
    }
    coords
}

#[test]
fn end_to_end_logprob_gradient_matches_fd() {
    let params = small_model(30);
    let pair = pair_from_query(&[4, 9, 5]);
    let spec = InterventionSpec::empty();
    let (_, grads) = grad_logprob_response(&params, &pair.p_orig, &pair.r_contrast, &spec).unwrap();
    let coords = sample_coords(&params, 3, 31);
    let h = 1e-3f32;
    let mut worst = 0f64;
    for (bi, off) in coords {
        // FD probes go through the f64 reference forward; the floor keeps
        // near-zero gradient coordinates from amplifying probe truncation.
        let eval = |delta: f32| -> f64 {
            let mut p = params.clone();
            p.blocks_mut()[bi][off] += delta;
            crate::oracle::logprob_response_f64(&p, &pair.p_orig, &pair.r_contrast, &spec).unwrap()
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
        let an = grads.blocks()[bi][off] as f64;
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
        worst = worst.max(rel);
        assert!(rel <= 1e-3, "block {bi} offset {off}: fd {fd} vs analytic {an} (rel {rel:.2e})");
    }
    eprintln!("worst relative error {worst:.3e}");
}

#[test]
fn site_gradients_match_intervention_fd() {
    // dJ/dz probed by nudging z through an add-mode intervention.
    let params = small_model(32);
    let pair = pair_from_query(&[5, 8, 7]);
    let mut passes = Passes::default();
    let (j0, site_grads, _) =
        grad_pair_objective(&params, &pair.p_orig, &pair.r_contrast, &pair.r_orig, &mut passes)
            .unwrap();
    assert_eq!(passes, Passes { forwards: 1, backwards: 1 });
    let _ = j0;
    let h = 1e-2f32;
    let mut rng = crate::rng::substream(33, "site-fd");
    for _ in 0..20 {
        let layer = rng.gen_range(0..params.config.n_layers);
        let head = rng.gen_range(0..params.config.n_heads);
        let pos = rng.gen_range(0..pair.p_orig.len());
        let i = rng.gen_range(0..params.config.d_head);
        let eval = |delta: f32| -> f64 {
            let mut vector = vec![0.0; params.config.d_head];
            vector[i] = delta;
            let spec = InterventionSpec {
                entries: vec![Intervention {
                    head: HeadId::new(layer, head),
                    position: pos,
                    vector,
                    mode: InterventionMode::Add,
                    scale: 1.0,
                }],
                ..Default::default()
            };
            let mut p = Passes::default();
            let (lc, lo) = params
                .score_pair(&pair.p_orig, &pair.r_contrast, &pair.r_orig, &spec, &mut p)
                .unwrap();
            lc - lo
        };
        let fd = (eval(h) - eval(-h)) as f64 / (2.0 * h as f64);
        let an = site_grads.get(layer, head, pos)[i] as f64;
        let m = fd.abs().max(an.abs());
        if m > 1e-3 {
            let rel = (fd - an).abs() / m;
            assert!(rel <= 5e-2, "({layer},{head},{pos},{i}): fd {fd} vs {an}");
        }
    }
}

#[test]
fn edit_gradients_match_fd() {
    // R/W/b gradients of the low-rank edit probed by parameter nudges.
    let params = small_model(34);
    let pair = pair_from_query(&[4, 5, 6]);
    let rank = 3;
    let dh = params.config.d_head;
    let mut rng = crate::rng::substream(35, "edit-fd");
    let mut r = crate::tensor::Tensor2D::zeros(rank, dh);
    for v in r.data.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let mut w = crate::tensor::Tensor2D::zeros(rank, dh);
    for v in w.data.iter_mut() {
        *v = rng.gen_range(-0.5..0.5);
    }
    let b: Vec<f32> = (0..rank).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let head = HeadId::new(1, 0);

    let nll = |r: &crate::tensor::Tensor2D, w: &crate::tensor::Tensor2D, b: &[f32]| -> f64 {
        let spec = InterventionSpec {
            edits: vec![LowRankEdit {
                head,
                max_position: pair.p_orig.len(),
                r: r.clone(),
                w: w.clone(),
                b: b.to_vec(),
                normalize: false,
                scale: 1.0,
            }],
            ..Default::default()
        };
        -crate::oracle::logprob_response_f64(&params, &pair.p_orig, &pair.r_contrast, &spec)
            .unwrap()
    };

    // Analytic grads via the backward pass.
    let spec = InterventionSpec {
        edits: vec![LowRankEdit {
            head,
            max_position: pair.p_orig.len(),
            r: r.clone(),
            w: w.clone(),
            b: b.clone(),
            normalize: false,
            scale: 1.0,
        }],
        ..Default::default()
    };
    let mut tokens = pair.p_orig.clone();
    tokens.extend_from_slice(&pair.r_contrast);
    let mut passes = Passes::default();
    let (trace, _) = params.forward_trace(&SeqInput::causal(tokens), &spec, &mut passes).unwrap();
    let mut dlogits =
        crate::tensor::Tensor2D::zeros(trace.logits.rows, trace.logits.cols);
    accumulate_response_dlogits(
        &trace.logits,
        pair.p_orig.len(),
        &pair.r_contrast,
        -1.0,
        &mut dlogits,
    );
    let result = params.backward_trace(&trace, &spec, &dlogits, &mut passes).unwrap();
    let eg = &result.edit_grads[0];

    let h = 1e-3f32;
    let check = |fd: f64, an: f64, what: &str| {
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
        assert!(rel <= 1e-3, "{what}: fd {fd} vs analytic {an}");
    };
    for _ in 0..12 {
        let a = rng.gen_range(0..rank);
        let i = rng.gen_range(0..dh);
        let mut rp = r.clone();
        *rp.at_mut(a, i) += h;
        let mut rm = r.clone();
        *rm.at_mut(a, i) -= h;
        check(
            (nll(&rp, &w, &b) - nll(&rm, &w, &b)) / (2.0 * h as f64),
            eg.dr.at(a, i) as f64,
            "dR",
        );
        let mut wp = w.clone();
        *wp.at_mut(a, i) += h;
        let mut wm = w.clone();
        *wm.at_mut(a, i) -= h;
        check(
            (nll(&r, &wp, &b) - nll(&r, &wm, &b)) / (2.0 * h as f64),
            eg.dw.at(a, i) as f64,
            "dW",
        );
    }
    for a in 0..rank {
        let mut bp = b.clone();
        bp[a] += h;
        let mut bm = b.clone();
        bm[a] -= h;
        check(
            (nll(&r, &w, &bp) - nll(&r, &w, &bm)) / (2.0 * h as f64),
            eg.db[a] as f64,
            "db",
        );
    }
}

#[test]
fn training_descends_and_is_deterministic() {
    // Tiny task: echo a 3-token query under a 2-layer model.
    let mut seqs = Vec::new();
    for probe in crate::data::gen_echo_probes(24, 40) {
        let mut toks = probe.prompt.clone();
        toks.extend_from_slice(&probe.answer);
        seqs.push(TrainSeq::new(toks, probe.prompt.len()));
    }
    let hyper = TrainingHyperparams {
        max_epochs: 60,
        lr: 4e-3,
        batch_size: 8,
        seed: 7,
        val_min: 16,
        stop_token: Some(EOS),
        target_exact_match: 0.99,
        ..Default::default()
    };
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_head: 16,
        d_mlp: 64,
        vocab_size: VOCAB_SIZE,
        max_seq_len: 32,
    };
    let a = train_toy(cfg, &seqs, &hyper).unwrap();
    assert!(a.epoch_losses[0] < a.initial_loss, "first epoch must descend");
    assert!(a.val_exact_match >= 0.99);
    let b = train_toy(cfg, &seqs, &hyper).unwrap();
    assert_eq!(a.params, b.params, "same seed must give a bit-identical checkpoint");
    let c = train_toy(cfg, &seqs, &TrainingHyperparams { seed: 8, ..hyper.clone() }).unwrap();
    assert_ne!(a.params, c.params);
}
