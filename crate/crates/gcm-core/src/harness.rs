//! The experiment harness: grid sweeps over (localizer, steerer, alpha, k),
//! held-in/held-out evaluation, capability retention, method comparisons
//! with Wilcoxon + BH, and CSV/JSON/SVG reporting.

use crate::data::{EchoProbe, Split, TaskDataset, EOS};
use crate::error::{GcmError, Result};
use crate::judge::{judge_response, success_rate, JudgeVerdict};
use crate::localize::{
    rank_activation_patching, rank_attribution, rank_iti_probe, rank_knockout, rank_random,
    select_top_k, AttributionSign, HeadScoreTable, LocalizeMethod,
};
use crate::model::ModelParams;
use crate::rng::derive_seed;
use crate::stats::{bh_fdr, wilcoxon_one_sided};
use crate::steer::{
    apply_plan, build_diff_means_plan_cached, build_mean_plan_cached, train_reft, PromptCaches,
    ReftHyperparams, SteerMethod, SteeringPlan,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Grid sweep configuration. Defaults: alpha 1..=10, twelve k thresholds
/// (0.01..0.09, 0.1, 0.5, 1.0), the three mediation localizers, and all
/// three steering methods — 1,080 cells.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub alphas: Vec<f32>,
    pub ks: Vec<f64>,
    pub localizers: Vec<LocalizeMethod>,
    pub steerers: Vec<SteerMethod>,
    pub seed: u64,
    /// Worker threads for cell evaluation; 0 means one per core.
    pub jobs: usize,
    pub reft: ReftHyperparams,
    /// Sign used when the attribution localizer ranks heads.
    pub attribution_sign: AttributionSign,
}

pub fn default_alphas() -> Vec<f32> {
    (1..=10).map(|a| a as f32).collect()
}

pub fn default_ks() -> Vec<f64> {
    let mut ks: Vec<f64> = (1..=9).map(|i| i as f64 / 100.0).collect();
    ks.extend([0.1, 0.5, 1.0]);
    ks
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alphas: default_alphas(),
            ks: default_ks(),
            localizers: vec![
                LocalizeMethod::ActPatch,
                LocalizeMethod::AttribPatch,
                LocalizeMethod::Knockout,
            ],
            steerers: vec![SteerMethod::Mean, SteerMethod::DiffMeans, SteerMethod::Reft],
            seed: 0,
            jobs: 0,
            reft: ReftHyperparams::default(),
            attribution_sign: AttributionSign::PatchDirection,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty()
            || self.ks.is_empty()
            || self.localizers.is_empty()
            || self.steerers.is_empty()
        {
            return Err(GcmError::Input("sweep lists must be nonempty".into()));
        }
        for &a in &self.alphas {
            if !(a.is_finite() && a > 0.0) {
                return Err(GcmError::Input(format!("bad alpha {a}")));
            }
        }
        for &k in &self.ks {
            if !(k > 0.0 && k <= 1.0) {
                return Err(GcmError::Input(format!("bad k {k}")));
            }
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.alphas.len() * self.ks.len() * self.localizers.len() * self.steerers.len()
    }
}

/// One grid cell outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCellResult {
    pub localizer: LocalizeMethod,
    pub steerer: SteerMethod,
    pub alpha: f32,
    pub k: f64,
    pub split: Split,
    pub seed: u64,
    pub n: usize,
    pub success_rate: f64,
}

impl GridCellResult {
    /// Pairing key for method comparisons: same steerer, alpha, k, split.
    pub fn pair_key(&self) -> (SteerMethod, String, String, Split) {
        (self.steerer, format!("{}", self.alpha), format!("{}", self.k), self.split)
    }
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub cells: Vec<GridCellResult>,
    /// Cell label -> error message, for cells that failed.
    pub failures: Vec<(String, String)>,
}

/// Concatenated (prompt, response) training sequences for both members of
/// every pair, plus `echo_seqs` mode-free copy sequences.
pub fn training_sequences(
    datasets: &[TaskDataset],
    echo_seqs: usize,
    seed: u64,
) -> Vec<crate::model::TrainSeq> {
    let mut seqs = Vec::new();
    for ds in datasets {
        for pair in &ds.pairs {
            for (p, r) in [(&pair.p_orig, &pair.r_orig), (&pair.p_contrast, &pair.r_contrast)] {
                let mut tokens = p.clone();
                tokens.extend_from_slice(r);
                seqs.push(crate::model::TrainSeq::new(tokens, p.len()));
            }
        }
    }
    for probe in crate::data::gen_echo_probes(echo_seqs, derive_seed(seed, "train-echo")) {
        let mut tokens = probe.prompt.clone();
        tokens.extend_from_slice(&probe.answer);
        seqs.push(crate::model::TrainSeq::new(tokens, probe.prompt.len()));
    }
    seqs
}

/// Compute the score table for one localizer over the dataset.
pub fn localizer_scores(
    params: &ModelParams,
    dataset: &TaskDataset,
    method: LocalizeMethod,
    seed: u64,
    sign: AttributionSign,
) -> Result<HeadScoreTable> {
    match method {
        LocalizeMethod::ActPatch => rank_activation_patching(params, dataset),
        LocalizeMethod::AttribPatch => rank_attribution(params, dataset, sign),
        LocalizeMethod::Knockout => rank_knockout(params, dataset),
        LocalizeMethod::ItiProbe => rank_iti_probe(params, dataset, derive_seed(seed, "iti")),
        LocalizeMethod::Random => Ok(rank_random(&params.config, derive_seed(seed, "random"))),
    }
}

fn generation_budget(prompt_len: usize, max_seq: usize) -> usize {
    // Query length k = prompt_len - 3; allow 2k + 3 so the fluency bound
    // (content within 2k plus EOS) stays decidable.
    let k = prompt_len.saturating_sub(3);
    (2 * k + 3).min(max_seq.saturating_sub(prompt_len))
}

/// Steer every original prompt of the dataset under the plan and judge the
/// outputs against the unsteered baselines.
pub fn evaluate_plan(
    params: &ModelParams,
    dataset: &TaskDataset,
    plan: &SteeringPlan,
    baselines: &[Vec<u32>],
) -> Result<Vec<JudgeVerdict>> {
    let mut verdicts = Vec::with_capacity(dataset.pairs.len());
    for (pair, baseline) in dataset.pairs.iter().zip(baselines) {
        let max_new = generation_budget(pair.p_orig.len(), params.config.max_seq_len);
        let steered = apply_plan(params, &pair.p_orig, plan, max_new, Some(EOS))?;
        verdicts.push(judge_response(&pair.p_orig, &steered, baseline)?);
    }
    Ok(verdicts)
}

/// Unsteered greedy baselines for every original prompt.
pub fn unsteered_baselines(params: &ModelParams, dataset: &TaskDataset) -> Result<Vec<Vec<u32>>> {
    dataset
        .pairs
        .iter()
        .map(|pair| {
            let max_new = generation_budget(pair.p_orig.len(), params.config.max_seq_len);
            params.greedy_generate(
                &pair.p_orig,
                &crate::model::InterventionSpec::empty(),
                max_new,
                Some(EOS),
            )
        })
        .collect()
}

/// Build the plan for one (localizer-scores, steerer, alpha, k) choice.
/// ReFT modules are trained per (scores, k) group by the caller and passed in.
fn build_plan(
    caches: &PromptCaches,
    params: &ModelParams,
    table: &HeadScoreTable,
    steerer: SteerMethod,
    alpha: f32,
    k: f64,
    reft_module: Option<&crate::steer::ReftModule>,
) -> Result<SteeringPlan> {
    let selection = select_top_k(table, &params.config, k)?;
    match steerer {
        SteerMethod::Mean => build_mean_plan_cached(caches, params, &selection, alpha),
        SteerMethod::DiffMeans => build_diff_means_plan_cached(caches, params, &selection, alpha),
        SteerMethod::Reft => {
            let module = reft_module
                .ok_or_else(|| GcmError::Input("reft cell without trained module".into()))?;
            let plan = SteeringPlan {
                method: SteerMethod::Reft,
                alpha,
                heads: selection,
                template_len: caches.template_len,
                d_head: params.config.d_head,
                vectors: Vec::new(),
                normalized: true,
                reft: Some(module.clone()),
                reft_extracted: false,
            };
            plan.validate()?;
            Ok(plan)
        }
    }
}

/// Run the full grid. Cells are independent; failures are recorded per cell
/// and the sweep continues. Deterministic for a fixed seed: per-cell state
/// derives from `hash(seed, cell key)` and results sort by cell key.
pub fn run_sweep(
    params: &ModelParams,
    dataset: &TaskDataset,
    config: &SweepConfig,
) -> Result<SweepOutcome> {
    config.validate()?;
    if dataset.pairs.is_empty() {
        return Err(GcmError::Input("empty dataset".into()));
    }

    let caches = PromptCaches::collect(params, dataset)?;
    let baselines = unsteered_baselines(params, dataset)?;

    // Score tables once per localizer.
    let mut tables: BTreeMap<&'static str, HeadScoreTable> = BTreeMap::new();
    for &loc in &config.localizers {
        let table =
            localizer_scores(params, dataset, loc, config.seed, config.attribution_sign)?;
        tables.insert(loc.tag(), table);
    }

    // ReFT modules once per (localizer, k); seeded per group.
    let mut reft_modules: BTreeMap<(String, String), crate::steer::ReftModule> = BTreeMap::new();
    if config.steerers.contains(&SteerMethod::Reft) {
        let groups: Vec<(LocalizeMethod, f64)> = config
            .localizers
            .iter()
            .flat_map(|&loc| config.ks.iter().map(move |&k| (loc, k)))
            .collect();
        let trained: Vec<Result<((String, String), crate::steer::ReftModule)>> = groups
            .par_iter()
            .map(|&(loc, k)| {
                let table = &tables[loc.tag()];
                let selection = select_top_k(table, &params.config, k)?;
                let hyper = ReftHyperparams {
                    seed: derive_seed(config.seed, &format!("reft:{}:{}", loc.tag(), k)),
                    ..config.reft.clone()
                };
                let outcome = train_reft(params, dataset, &selection, &hyper)?;
                Ok(((loc.tag().to_string(), format!("{k}")), outcome.module))
            })
            .collect();
        for t in trained {
            let ((loc, k), module) = t?;
            reft_modules.insert((loc, k), module);
        }
    }

    struct Cell {
        localizer: LocalizeMethod,
        steerer: SteerMethod,
        alpha: f32,
        k: f64,
    }
    let mut cells = Vec::with_capacity(config.n_cells());
    for &localizer in &config.localizers {
        for &steerer in &config.steerers {
            for &alpha in &config.alphas {
                for &k in &config.ks {
                    cells.push(Cell { localizer, steerer, alpha, k });
                }
            }
        }
    }

    let eval_cell = |cell: &Cell| -> Result<GridCellResult> {
        let table = &tables[cell.localizer.tag()];
        let module = reft_modules.get(&(cell.localizer.tag().to_string(), format!("{}", cell.k)));
        let plan =
            build_plan(&caches, params, table, cell.steerer, cell.alpha, cell.k, module)?;
        let verdicts = evaluate_plan(params, dataset, &plan, &baselines)?;
        Ok(GridCellResult {
            localizer: cell.localizer,
            steerer: cell.steerer,
            alpha: cell.alpha,
            k: cell.k,
            split: dataset.split,
            seed: config.seed,
            n: dataset.pairs.len(),
            success_rate: success_rate(&verdicts)?,
        })
    };

    let results: Vec<(usize, Result<GridCellResult>)> = if config.jobs == 1 {
        cells.iter().enumerate().map(|(i, c)| (i, eval_cell(c))).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.jobs)
            .build()
            .map_err(|e| GcmError::Input(format!("thread pool: {e}")))?;
        pool.install(|| {
            cells
                .par_iter()
                .enumerate()
                .map(|(i, c)| (i, eval_cell(c)))
                .collect()
        })
    };

    let mut ok = Vec::new();
    let mut failures = Vec::new();
    let mut ordered = results;
    ordered.sort_by_key(|(i, _)| *i);
    for ((i, res), cell) in ordered.into_iter().zip(&cells) {
        let _ = i;
        let label = format!(
            "{}/{}/alpha={}/k={}",
            cell.localizer.tag(),
            cell.steerer.tag(),
            cell.alpha,
            cell.k
        );
        match res {
            Ok(r) => ok.push(r),
            Err(e) => failures.push((label, e.to_string())),
        }
    }
    for (label, err) in &failures {
        eprintln!("warning: sweep cell {label} failed: {err}");
    }
    Ok(SweepOutcome { cells: ok, failures })
}

/// Evaluate one plan (built from held-in data) on the held-out split.
pub fn eval_held_out(
    params: &ModelParams,
    plan: &SteeringPlan,
    held_out: &TaskDataset,
    localizer: LocalizeMethod,
    seed: u64,
) -> Result<GridCellResult> {
    let baselines = unsteered_baselines(params, held_out)?;
    let verdicts = evaluate_plan(params, held_out, plan, &baselines)?;
    Ok(GridCellResult {
        localizer,
        steerer: plan.method,
        alpha: plan.alpha,
        k: plan.heads.k,
        split: held_out.split,
        seed,
        n: held_out.pairs.len(),
        success_rate: success_rate(&verdicts)?,
    })
}

/// Greedy exact-match accuracy on mode-free echo probes under the plan.
pub fn capability_retention(
    params: &ModelParams,
    plan: Option<&SteeringPlan>,
    probes: &[EchoProbe],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(GcmError::Input("empty probe set".into()));
    }
    let mut hits = 0usize;
    for probe in probes {
        let max_new =
            (probe.answer.len() + 2).min(params.config.max_seq_len - probe.prompt.len());
        let out = match plan {
            Some(p) => apply_plan(params, &probe.prompt, p, max_new, Some(EOS))?,
            None => params.greedy_generate(
                &probe.prompt,
                &crate::model::InterventionSpec::empty(),
                max_new,
                Some(EOS),
            )?,
        };
        if out == probe.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / probes.len() as f64)
}

// ── Method comparisons ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub comparison: String,
    pub n_pairs: usize,
    pub raw_p: Option<f64>,
    pub fdr_p: Option<f64>,
    pub reject: bool,
    /// True when every paired delta was zero (no test possible).
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestReport {
    pub q: f64,
    pub comparisons: Vec<ComparisonResult>,
}

/// One-sided Wilcoxon (A > B) on paired cell success rates for each named
/// comparison, BH-corrected across the whole report.
pub fn compare_methods(
    comparisons: &[(String, &[GridCellResult], &[GridCellResult])],
    q: f64,
) -> Result<TestReport> {
    let mut partial: Vec<(String, usize, Option<f64>, bool)> = Vec::new();
    for (label, a, b) in comparisons {
        let mut bmap: BTreeMap<(SteerMethod, String, String, Split), f64> = BTreeMap::new();
        for cell in *b {
            if bmap.insert(cell.pair_key(), cell.success_rate).is_some() {
                return Err(GcmError::Input(format!(
                    "{label}: duplicate cell key in baseline grid"
                )));
            }
        }
        if a.len() != bmap.len() {
            return Err(GcmError::Input(format!(
                "{label}: grids have {} vs {} cells",
                a.len(),
                bmap.len()
            )));
        }
        let mut deltas = Vec::with_capacity(a.len());
        for cell in *a {
            let other = bmap.get(&cell.pair_key()).ok_or_else(|| {
                GcmError::Input(format!(
                    "{label}: no matching cell for key {:?}",
                    cell.pair_key()
                ))
            })?;
            deltas.push(cell.success_rate - other);
        }
        match wilcoxon_one_sided(&deltas) {
            Ok(p) => partial.push((label.clone(), deltas.len(), Some(p), false)),
            Err(GcmError::Degenerate(_)) => {
                partial.push((label.clone(), deltas.len(), None, true))
            }
            Err(e) => return Err(e),
        }
    }

    let tested: Vec<f64> = partial.iter().filter_map(|(_, _, p, _)| *p).collect();
    let (adjusted, reject) = bh_fdr(&tested, q)?;
    let mut it = adjusted.into_iter().zip(reject);
    let comparisons = partial
        .into_iter()
        .map(|(comparison, n_pairs, raw_p, degenerate)| {
            if let Some(p) = raw_p {
                let (fdr, rej) = it.next().expect("aligned");
                ComparisonResult {
                    comparison,
                    n_pairs,
                    raw_p: Some(p),
                    fdr_p: Some(fdr),
                    reject: rej,
                    degenerate,
                }
            } else {
                ComparisonResult {
                    comparison,
                    n_pairs,
                    raw_p: None,
                    fdr_p: None,
                    reject: false,
                    degenerate,
                }
            }
        })
        .collect();
    Ok(TestReport { q, comparisons })
}

// ── Reporting ───────────────────────────────────────────────────────────────

pub const GRID_CSV_HEADER: &str = "localizer,steerer,alpha,k,split,seed,n,success_rate";

pub fn save_grid_csv(cells: &[GridCellResult], path: &Path) -> Result<()> {
    let mut out = String::from(GRID_CSV_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.localizer.tag(),
            c.steerer.tag(),
            c.alpha,
            c.k,
            c.split,
            c.seed,
            c.n,
            c.success_rate
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_grid_csv(path: &Path) -> Result<Vec<GridCellResult>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == GRID_CSV_HEADER => {}
        other => {
            return Err(GcmError::Parse {
                line: 1,
                msg: format!("unexpected header {:?}", other.map(|(_, h)| h)),
            })
        }
    }
    let mut cells = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split(',').collect();
        if p.len() != 8 {
            return Err(GcmError::Parse { line: idx + 1, msg: "expected 8 columns".into() });
        }
        let bad = |msg: &str| GcmError::Parse { line: idx + 1, msg: msg.into() };
        cells.push(GridCellResult {
            localizer: LocalizeMethod::from_tag(p[0]).map_err(|e| bad(&e.to_string()))?,
            steerer: SteerMethod::from_tag(p[1]).map_err(|e| bad(&e.to_string()))?,
            alpha: p[2].parse().map_err(|_| bad("bad alpha"))?,
            k: p[3].parse().map_err(|_| bad("bad k"))?,
            split: match p[4] {
                "held_in" => Split::HeldIn,
                "held_out" => Split::HeldOut,
                _ => return Err(bad("bad split")),
            },
            seed: p[5].parse().map_err(|_| bad("bad seed"))?,
            n: p[6].parse().map_err(|_| bad("bad n"))?,
            success_rate: p[7].parse().map_err(|_| bad("bad success_rate"))?,
        });
    }
    Ok(cells)
}

/// One heatmap per (localizer, steerer): x = k, y = alpha, cell shade =
/// success rate. Returns the SVG text.
pub fn heatmap_svg(cells: &[GridCellResult]) -> Result<String> {
    if cells.is_empty() {
        return Err(GcmError::Input("no cells to plot".into()));
    }
    let loc = cells[0].localizer;
    let st = cells[0].steerer;
    if cells.iter().any(|c| c.localizer != loc || c.steerer != st) {
        return Err(GcmError::Input("heatmap needs a single (localizer, steerer)".into()));
    }
    let mut ks: Vec<f64> = cells.iter().map(|c| c.k).collect();
    ks.sort_by(f64::total_cmp);
    ks.dedup();
    let mut alphas: Vec<f32> = cells.iter().map(|c| c.alpha).collect();
    alphas.sort_by(f32::total_cmp);
    alphas.dedup();

    let cw = 46;
    let ch = 26;
    let left = 70;
    let top = 50;
    let width = left + cw * ks.len() + 20;
    let height = top + ch * alphas.len() + 40;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"monospace\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{left}\" y=\"20\" font-size=\"13\">{} + {} steering success</text>\n",
        loc.tag(),
        st.tag()
    ));
    for (yi, &alpha) in alphas.iter().rev().enumerate() {
        let y = top + yi * ch;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">a={}</text>\n",
            left - 6,
            y + ch / 2 + 4,
            alpha
        ));
        for (xi, &k) in ks.iter().enumerate() {
            let x = left + xi * cw;
            let rate = cells
                .iter()
                .find(|c| c.alpha == alpha && c.k == k)
                .map(|c| c.success_rate)
                .unwrap_or(f64::NAN);
            let (fill, label) = if rate.is_nan() {
                ("#cccccc".to_string(), "-".to_string())
            } else {
                // Dark blue (0.0) to warm yellow (1.0).
                let r = (32.0 + textual_clamp(rate) * 221.0) as u8;
                let g = (42.0 + textual_clamp(rate) * 180.0) as u8;
                let b = (90.0 - textual_clamp(rate) * 60.0) as u8;
                (format!("#{r:02x}{g:02x}{b:02x}"), format!("{:.2}", rate))
            };
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cw}\" height=\"{ch}\" fill=\"{fill}\" \
                 stroke=\"white\"/>\n"
            ));
            let text_fill = if rate < 0.5 { "#ffffff" } else { "#000000" };
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" fill=\"{text_fill}\">{label}</text>\n",
                x + cw / 2,
                y + ch / 2 + 4
            ));
        }
    }
    for (xi, &k) in ks.iter().enumerate() {
        let x = left + xi * cw;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">k={}</text>\n",
            x + cw / 2,
            top + alphas.len() * ch + 16,
            k
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn textual_clamp(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}
