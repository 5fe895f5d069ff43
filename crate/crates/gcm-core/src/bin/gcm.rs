//! Command-line entry point: dataset generation, training, localization,
//! steering, grid sweeps, significance tests, and report rendering, all
//! seeded and manifest-stamped for bit-identical re-runs.

use clap::{Args, Parser, Subcommand};
use gcm_core::data::{self, Split, TaskDataset, EOS, VOCAB_SIZE};
use gcm_core::error::GcmError;
use gcm_core::harness::{
    self, compare_methods, load_grid_csv, run_sweep, save_grid_csv, SweepConfig,
};
use gcm_core::judge::judge_response;
use gcm_core::localize::{
    load_score_csv, save_score_csv, select_top_k, AttributionSign, LocalizeMethod,
};
use gcm_core::manifest::RunManifest;
use gcm_core::model::{
    load_checkpoint, save_checkpoint, train_toy, ModelConfig, TrainingHyperparams,
};
use gcm_core::steer::{
    apply_plan, build_diff_means_plan, build_mean_plan, load_plan, normalize_plan, save_plan,
    train_reft, ReftHyperparams, SteerMethod, SteeringPlan,
};
use serde::Deserialize;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "gcm", version, about = "Localize and steer concept-mediating attention heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset (contrastive mode-switch pairs or echo probes).
    GenData(GenDataArgs),
    /// Train the toy model on one or more datasets.
    Train(TrainArgs),
    /// Rank attention heads with one localization method.
    Localize(LocalizeArgs),
    /// Build a steering plan from a score table and evaluate it.
    Steer(SteerArgs),
    /// Run the (localizer, steerer, alpha, k) grid sweep.
    Sweep(SweepArgs),
    /// Wilcoxon + BH significance tests between grids.
    Stats(StatsArgs),
    /// Render a grid CSV as csv, json, or svg heatmaps.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task: "mode-switch" or "echo".
    #[arg(long, default_value = "mode-switch")]
    task: String,
    #[arg(long, default_value_t = 50)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split for mode-switch data: held_in or held_out.
    #[arg(long, default_value = "held_in")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat JSON config; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset(s); repeatable.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_mlp: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Auxiliary mode-free echo sequences mixed into training.
    #[arg(long)]
    echo_seqs: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainFileConfig {
    seed: Option<u64>,
    n_layers: Option<usize>,
    n_heads: Option<usize>,
    d_model: Option<usize>,
    d_mlp: Option<usize>,
    max_seq_len: Option<usize>,
    max_epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    echo_seqs: Option<usize>,
}

#[derive(Args)]
struct LocalizeArgs {
    /// act_patch | attrib_patch | knockout | iti_probe | random
    #[arg(long)]
    method: String,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Attribution sign: "printed" or "patch" (gradient toward the patch).
    #[arg(long, default_value = "printed")]
    attribution_sign: String,
}

#[derive(Args)]
struct SteerArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Score table CSV from `localize` (not needed when --plan is given).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// mean | diff_means | reft
    #[arg(long, default_value = "diff_means")]
    method: String,
    #[arg(long, default_value_t = 1.0)]
    alpha: f32,
    /// Fraction of heads to steer, in (0, 1].
    #[arg(long, default_value_t = 0.05)]
    topk: f64,
    /// Dataset the plan is built from.
    #[arg(long)]
    data: PathBuf,
    /// Optional evaluation dataset (defaults to the build dataset).
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Optional echo-probe JSONL for capability retention.
    #[arg(long)]
    retention: Option<PathBuf>,
    /// Load a previously saved plan instead of building one.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Normalize applied edit vectors (default for reft).
    #[arg(long)]
    normalize: bool,
    /// Apply reft as an extracted additive vector instead of the edit.
    #[arg(long)]
    reft_extracted: bool,
    #[arg(long, default_value_t = 4)]
    reft_rank: usize,
    #[arg(long, default_value_t = 40)]
    reft_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (plan.json, results.jsonl, summary.json, manifest).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Flat JSON config; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated steering factors, e.g. "1,2,3".
    #[arg(long)]
    alphas: Option<String>,
    /// Comma-separated head fractions, e.g. "0.01,0.05,1.0".
    #[arg(long)]
    ks: Option<String>,
    /// Comma-separated localizers.
    #[arg(long)]
    localizers: Option<String>,
    /// Comma-separated steerers.
    #[arg(long)]
    steerers: Option<String>,
    /// Worker threads (default: GCM_JOBS or one per core).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    reft_epochs: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SweepFileConfig {
    seed: Option<u64>,
    alphas: Option<Vec<f32>>,
    ks: Option<Vec<f64>>,
    localizers: Option<Vec<String>>,
    steerers: Option<Vec<String>>,
    jobs: Option<usize>,
    reft_epochs: Option<usize>,
}

#[derive(Args)]
struct StatsArgs {
    /// Grid CSVs, referenced by file stem in --compare.
    #[arg(long, required = true)]
    grid: Vec<PathBuf>,
    /// Comparisons "stemA>stemB"; repeatable.
    #[arg(long, required = true)]
    compare: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    q: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    grid: PathBuf,
    /// csv | json | svg
    #[arg(long)]
    format: String,
    /// Output file (csv/json) or directory (svg).
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout with success status.
            if e.use_stderr() {
                eprint!("{e}");
                std::process::exit(1);
            }
            print!("{e}");
            std::process::exit(0);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a, &argv),
        Command::Train(a) => cmd_train(a, &argv),
        Command::Localize(a) => cmd_localize(a, &argv),
        Command::Steer(a) => cmd_steer(a, &argv),
        Command::Sweep(a) => cmd_sweep(a, &argv),
        Command::Stats(a) => cmd_stats(a, &argv),
        Command::Report(a) => cmd_report(a, &argv),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        let code = match e {
            GcmError::Input(_) | GcmError::Validation(_) | GcmError::Parse { .. }
            | GcmError::Degenerate(_) => 2,
            GcmError::Io(_) | GcmError::Json(_) | GcmError::Training(_) | GcmError::Shape(_) => 3,
        };
        std::process::exit(code);
    }
}

type CmdResult = gcm_core::Result<()>;

fn parse_split(s: &str) -> gcm_core::Result<Split> {
    match s {
        "held_in" | "held-in" => Ok(Split::HeldIn),
        "held_out" | "held-out" => Ok(Split::HeldOut),
        _ => Err(GcmError::Input(format!("unknown split '{s}'"))),
    }
}

fn cmd_gen_data(a: GenDataArgs, argv: &[String]) -> CmdResult {
    match a.task.as_str() {
        "mode-switch" | "mode_switch" => {
            let split = parse_split(&a.split)?;
            let ds = data::gen_mode_switch(a.n, a.seed, split)?;
            data::save_jsonl(&ds, &a.out)?;
            RunManifest::new("gen-data", argv)
                .seed(a.seed)
                .output("dataset", &a.out)
                .fingerprint("dataset", &ds.fingerprint())
                .write_for(&a.out)?;
            println!("wrote {} pairs ({split}) to {}", ds.pairs.len(), a.out.display());
        }
        "echo" => {
            let probes = data::gen_echo_probes(a.n, a.seed);
            data::save_echo_jsonl(&probes, &a.out)?;
            RunManifest::new("gen-data", argv)
                .seed(a.seed)
                .output("probes", &a.out)
                .write_for(&a.out)?;
            println!("wrote {} echo probes to {}", probes.len(), a.out.display());
        }
        other => return Err(GcmError::Input(format!("unknown task '{other}'"))),
    }
    Ok(())
}

fn load_datasets(paths: &[PathBuf]) -> gcm_core::Result<Vec<TaskDataset>> {
    paths.iter().map(|p| data::load_jsonl(p)).collect()
}

fn cmd_train(a: TrainArgs, argv: &[String]) -> CmdResult {
    let file: TrainFileConfig = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => TrainFileConfig::default(),
    };
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let config = ModelConfig {
        n_layers: a.n_layers.or(file.n_layers).unwrap_or(4),
        n_heads: a.n_heads.or(file.n_heads).unwrap_or(4),
        d_model: a.d_model.or(file.d_model).unwrap_or(64),
        d_head: 0, // filled below
        d_mlp: a.d_mlp.or(file.d_mlp).unwrap_or(128),
        vocab_size: VOCAB_SIZE,
        max_seq_len: a.max_seq_len.or(file.max_seq_len).unwrap_or(32),
    };
    let config = ModelConfig { d_head: config.d_model / config.n_heads.max(1), ..config };
    let hyper = TrainingHyperparams {
        seed,
        max_epochs: a.max_epochs.or(file.max_epochs).unwrap_or(80),
        lr: a.lr.or(file.lr).unwrap_or(3e-3),
        batch_size: a.batch_size.or(file.batch_size).unwrap_or(32),
        stop_token: Some(EOS),
        ..Default::default()
    };
    let datasets = load_datasets(&a.data)?;
    let echo = a.echo_seqs.or(file.echo_seqs).unwrap_or(500);
    let seqs = harness::training_sequences(&datasets, echo, seed);
    eprintln!(
        "training on {} sequences ({} datasets, {} echo)",
        seqs.len(),
        datasets.len(),
        echo
    );
    let outcome = train_toy(config, &seqs, &hyper)?;
    save_checkpoint(&outcome.params, &a.out)?;
    let mut manifest = RunManifest::new("train", argv).seed(seed).output("checkpoint", &a.out);
    for (i, (p, ds)) in a.data.iter().zip(&datasets).enumerate() {
        manifest = manifest
            .input(&format!("data{i}"), p)
            .fingerprint(&format!("data{i}"), &ds.fingerprint());
    }
    manifest.write_for(&a.out)?;
    println!(
        "trained {} epochs; initial loss {:.4}, final loss {:.4}, val exact-match {:.4}",
        outcome.epochs_run,
        outcome.initial_loss,
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN),
        outcome.val_exact_match
    );
    Ok(())
}

fn parse_attribution_sign(s: &str) -> gcm_core::Result<AttributionSign> {
    match s {
        "printed" => Ok(AttributionSign::AsPrinted),
        "patch" => Ok(AttributionSign::PatchDirection),
        _ => Err(GcmError::Input(format!("unknown attribution sign '{s}'"))),
    }
}

fn cmd_localize(a: LocalizeArgs, argv: &[String]) -> CmdResult {
    let params = load_checkpoint(&a.ckpt)?;
    let dataset = data::load_jsonl(&a.data)?;
    let method = LocalizeMethod::from_tag(&a.method)?;
    let sign = parse_attribution_sign(&a.attribution_sign)?;
    let table = harness::localizer_scores(&params, &dataset, method, a.seed, sign)?;
    save_score_csv(&table, &params.config, &a.out)?;
    RunManifest::new("localize", argv)
        .seed(a.seed)
        .input("checkpoint", &a.ckpt)
        .input("dataset", &a.data)
        .fingerprint("dataset", &dataset.fingerprint())
        .output("scores", &a.out)
        .write_for(&a.out)?;
    println!("wrote {} head scores to {}", table.scores.len(), a.out.display());
    Ok(())
}

fn cmd_steer(a: SteerArgs, argv: &[String]) -> CmdResult {
    let params = load_checkpoint(&a.ckpt)?;
    let build_ds = data::load_jsonl(&a.data)?;
    std::fs::create_dir_all(&a.out)?;

    let plan: SteeringPlan = if let Some(plan_path) = &a.plan {
        load_plan(plan_path)?
    } else {
        let scores_path = a
            .scores
            .as_ref()
            .ok_or_else(|| GcmError::Input("--scores or --plan required".into()))?;
        let table = load_score_csv(scores_path, &params.config)?;
        let selection = select_top_k(&table, &params.config, a.topk)?;
        let method = SteerMethod::from_tag(&a.method)?;
        let plan = match method {
            SteerMethod::Mean => build_mean_plan(&params, &build_ds, &selection, a.alpha)?,
            SteerMethod::DiffMeans => {
                build_diff_means_plan(&params, &build_ds, &selection, a.alpha)?
            }
            SteerMethod::Reft => {
                let hyper = ReftHyperparams {
                    rank: a.reft_rank,
                    epochs: a.reft_epochs,
                    seed: a.seed,
                    ..Default::default()
                };
                let outcome = train_reft(&params, &build_ds, &selection, &hyper)?;
                let caches = gcm_core::steer::PromptCaches::collect(&params, &build_ds)?;
                SteeringPlan {
                    method: SteerMethod::Reft,
                    alpha: a.alpha,
                    heads: selection,
                    template_len: caches.template_len,
                    d_head: params.config.d_head,
                    vectors: Vec::new(),
                    normalized: true,
                    reft: Some(outcome.module),
                    reft_extracted: a.reft_extracted,
                }
            }
        };
        if a.normalize && method != SteerMethod::Reft {
            normalize_plan(plan)
        } else {
            plan
        }
    };

    let plan_path = a.out.join("plan.json");
    let plan = if plan.reft_extracted {
        // Materialize the extracted vectors so the saved plan is standalone.
        let module = plan.reft.clone().expect("validated");
        let vectors = plan
            .heads
            .heads
            .iter()
            .map(|h| {
                let m = module.heads.iter().find(|m| m.head == *h).expect("module head");
                let v = gcm_core::steer::extract_reft_vector(m);
                let mut block = Vec::new();
                for _ in 0..plan.template_len {
                    block.extend_from_slice(&v);
                }
                block
            })
            .collect();
        SteeringPlan { vectors, ..plan }
    } else {
        plan
    };
    save_plan(&plan, &plan_path)?;

    // Evaluate on the eval dataset (or the build set).
    let eval_ds = match &a.eval {
        Some(p) => data::load_jsonl(p)?,
        None => build_ds.clone(),
    };
    let baselines = harness::unsteered_baselines(&params, &eval_ds)?;
    let results_path = a.out.join("results.jsonl");
    let mut results = std::io::BufWriter::new(std::fs::File::create(&results_path)?);
    let mut verdicts = Vec::new();
    for (pair, baseline) in eval_ds.pairs.iter().zip(&baselines) {
        let max_new = 2 * (pair.p_orig.len().saturating_sub(3)) + 3;
        let max_new = max_new.min(params.config.max_seq_len - pair.p_orig.len());
        let steered = apply_plan(&params, &pair.p_orig, &plan, max_new, Some(EOS))?;
        let v = judge_response(&pair.p_orig, &steered, baseline)?;
        let line = serde_json::json!({
            "prompt": pair.p_orig,
            "steered": steered,
            "baseline": baseline,
            "concept": v.concept_pass,
            "relevance": v.relevance_pass,
            "fluency": v.fluency_pass,
            "success": v.success,
        });
        serde_json::to_writer(&mut results, &line)?;
        results.write_all(b"\n")?;
        verdicts.push(v);
    }
    results.flush()?;
    let rate = gcm_core::judge::success_rate(&verdicts)?;

    let retention = match &a.retention {
        Some(path) => {
            let probes = data::load_echo_jsonl(path)?;
            Some(harness::capability_retention(&params, Some(&plan), &probes)?)
        }
        None => None,
    };

    let summary = serde_json::json!({
        "method": plan.method.tag(),
        "alpha": plan.alpha,
        "k": plan.heads.k,
        "heads": plan.heads.heads.iter().map(|h| (h.layer, h.head)).collect::<Vec<_>>(),
        "n": eval_ds.pairs.len(),
        "success_rate": rate,
        "retention": retention,
    });
    let summary_path = a.out.join("summary.json");
    std::fs::write(&summary_path, format!("{}\n", serde_json::to_string_pretty(&summary)?))?;

    let mut manifest = RunManifest::new("steer", argv)
        .seed(a.seed)
        .input("checkpoint", &a.ckpt)
        .input("build_data", &a.data)
        .fingerprint("build_data", &build_ds.fingerprint())
        .output("plan", &plan_path)
        .output("results", &results_path)
        .output("summary", &summary_path);
    if let Some(p) = &a.eval {
        manifest = manifest.input("eval_data", p).fingerprint("eval_data", &eval_ds.fingerprint());
    }
    manifest.write_for(&a.out)?;
    println!("success_rate {rate:.4} over {} prompts", eval_ds.pairs.len());
    Ok(())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> gcm_core::Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim())
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse::<T>()
                .map_err(|_| GcmError::Input(format!("bad {what} entry '{x}'")))
        })
        .collect()
}

fn cmd_sweep(a: SweepArgs, argv: &[String]) -> CmdResult {
    let params = load_checkpoint(&a.ckpt)?;
    let dataset = data::load_jsonl(&a.data)?;
    let file: SweepFileConfig = match &a.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => SweepFileConfig::default(),
    };

    let mut config = SweepConfig {
        seed: a.seed.or(file.seed).unwrap_or(0),
        ..Default::default()
    };
    if let Some(s) = a.alphas.as_deref() {
        config.alphas = parse_list(s, "alpha")?;
    } else if let Some(v) = file.alphas {
        config.alphas = v;
    }
    if let Some(s) = a.ks.as_deref() {
        config.ks = parse_list(s, "k")?;
    } else if let Some(v) = file.ks {
        config.ks = v;
    }
    let parse_locs = |items: Vec<String>| -> gcm_core::Result<Vec<LocalizeMethod>> {
        items.iter().map(|t| LocalizeMethod::from_tag(t)).collect()
    };
    if let Some(s) = a.localizers.as_deref() {
        config.localizers = parse_locs(parse_list::<String>(s, "localizer")?)?;
    } else if let Some(v) = file.localizers {
        config.localizers = parse_locs(v)?;
    }
    let parse_steer = |items: Vec<String>| -> gcm_core::Result<Vec<SteerMethod>> {
        items.iter().map(|t| SteerMethod::from_tag(t)).collect()
    };
    if let Some(s) = a.steerers.as_deref() {
        config.steerers = parse_steer(parse_list::<String>(s, "steerer")?)?;
    } else if let Some(v) = file.steerers {
        config.steerers = parse_steer(v)?;
    }
    let env_jobs = std::env::var("GCM_JOBS").ok().and_then(|v| v.parse().ok());
    config.jobs = a.jobs.or(file.jobs).or(env_jobs).unwrap_or(0);
    if let Some(e) = a.reft_epochs.or(file.reft_epochs) {
        config.reft.epochs = e;
    }

    std::fs::create_dir_all(&a.out)?;
    eprintln!("sweeping {} cells", config.n_cells());
    let started = std::time::Instant::now();
    let outcome = run_sweep(&params, &dataset, &config)?;
    let grid_path = a.out.join("grid.csv");
    save_grid_csv(&outcome.cells, &grid_path)?;
    RunManifest::new("sweep", argv)
        .seed(config.seed)
        .input("checkpoint", &a.ckpt)
        .input("dataset", &a.data)
        .fingerprint("dataset", &dataset.fingerprint())
        .output("grid", &grid_path)
        .write_for(&a.out)?;
    println!(
        "swept {} cells in {:.1}s ({} failures) -> {}",
        outcome.cells.len(),
        started.elapsed().as_secs_f64(),
        outcome.failures.len(),
        grid_path.display()
    );
    Ok(())
}

fn cmd_stats(a: StatsArgs, argv: &[String]) -> CmdResult {
    let mut grids = std::collections::BTreeMap::new();
    for path in &a.grid {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| GcmError::Input(format!("bad grid path {}", path.display())))?
            .to_string();
        grids.insert(stem, load_grid_csv(path)?);
    }
    let mut comparisons = Vec::new();
    for spec in &a.compare {
        let (lhs, rhs) = spec
            .split_once('>')
            .ok_or_else(|| GcmError::Input(format!("comparison '{spec}' must be 'A>B'")))?;
        let a_cells = grids
            .get(lhs.trim())
            .ok_or_else(|| GcmError::Input(format!("no grid named '{lhs}'")))?;
        let b_cells = grids
            .get(rhs.trim())
            .ok_or_else(|| GcmError::Input(format!("no grid named '{rhs}'")))?;
        comparisons.push((spec.clone(), a_cells.as_slice(), b_cells.as_slice()));
    }
    let report = compare_methods(&comparisons, a.q)?;
    std::fs::write(&a.out, format!("{}\n", serde_json::to_string_pretty(&report)?))?;
    let mut manifest = RunManifest::new("stats", argv).output("report", &a.out);
    for path in &a.grid {
        manifest = manifest.input(
            path.file_stem().and_then(|s| s.to_str()).unwrap_or("grid"),
            path,
        );
    }
    manifest.write_for(&a.out)?;
    for c in &report.comparisons {
        println!(
            "{}: n={} raw_p={:?} fdr_p={:?} reject={} degenerate={}",
            c.comparison, c.n_pairs, c.raw_p, c.fdr_p, c.reject, c.degenerate
        );
    }
    Ok(())
}

fn cmd_report(a: ReportArgs, argv: &[String]) -> CmdResult {
    let cells = load_grid_csv(&a.grid)?;
    match a.format.as_str() {
        "csv" => {
            save_grid_csv(&cells, &a.out)?;
            RunManifest::new("report", argv)
                .input("grid", &a.grid)
                .output("csv", &a.out)
                .write_for(&a.out)?;
        }
        "json" => {
            std::fs::write(&a.out, format!("{}\n", serde_json::to_string_pretty(&cells)?))?;
            RunManifest::new("report", argv)
                .input("grid", &a.grid)
                .output("json", &a.out)
                .write_for(&a.out)?;
        }
        "svg" => {
            std::fs::create_dir_all(&a.out)?;
            let mut manifest = RunManifest::new("report", argv).input("grid", &a.grid);
            let mut groups: std::collections::BTreeMap<(String, String), Vec<_>> =
                std::collections::BTreeMap::new();
            for c in &cells {
                groups
                    .entry((c.localizer.tag().into(), c.steerer.tag().into()))
                    .or_default()
                    .push(c.clone());
            }
            for ((loc, st), group) in &groups {
                let svg = harness::heatmap_svg(group)?;
                let path = a.out.join(format!("heatmap_{loc}_{st}.svg"));
                std::fs::write(&path, svg)?;
                manifest = manifest.output(&format!("heatmap_{loc}_{st}"), &path);
            }
            manifest.write_for(&a.out)?;
        }
        other => return Err(GcmError::Input(format!("unknown format '{other}'"))),
    }
    println!("report written to {}", a.out.display());
    Ok(())
}
