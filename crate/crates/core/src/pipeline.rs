//! The analysis pipeline as library calls: analyze a trace set, derive a
//! plan from a report, evaluate plans against random controls, and run the
//! whole train/capture/analyze/plan/evaluate loop over several seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::byte_tokens;
use crate::error::{Error, Result};
use crate::policy::{random_plan, PolicyRegistry, PruningPlan, DEFAULT_RHO, LOWEST_FRACTION};
use crate::report::{csv_table, format_float, layers_to_csv, write_json_file, AnalysisReport, LayerRecord, ReportConfig};
use crate::score::rank_layers;
use crate::stats::{compute_layer_stats, StatsConfig};
use crate::toy::{capture_traceset, perplexity, train, write_checkpoint_file, SkipSet, ToyCheckpoint, ToyModelConfig};
use crate::trace::{write_trace_file, ActivationPoint, TraceSet};
use crate::TOOL_VERSION;

pub const RETENTION_DEFINITION: &str = "baseline_perplexity / pruned_perplexity";
pub const UNTRAINED_CAVEAT: &str =
    "train_steps = 0: the model is untrained, so rankings and perplexities reflect the random initialization only";

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeOptions {
    pub stats: StatsConfig,
    pub policy: String,
    pub parameter: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions {
            stats: StatsConfig::default(),
            policy: LOWEST_FRACTION.to_string(),
            parameter: DEFAULT_RHO,
        }
    }
}

/// Statistics, scores, ranks and a plan for one trace set.
pub fn analyze(set: &TraceSet, options: &AnalyzeOptions, registry: &PolicyRegistry) -> Result<AnalysisReport> {
    let policy = registry.get(&options.policy)?;
    let stats = compute_layer_stats(set, &options.stats)?;
    let entries = rank_layers(&stats, &options.stats)?;
    let plan = policy.select(&entries, options.parameter)?;
    Ok(AnalysisReport {
        tool_version: TOOL_VERSION.to_string(),
        model_id: set.model_id.clone(),
        activation_point: set.activation_point,
        layer_count: set.layer_count(),
        config: ReportConfig {
            epsilon: options.stats.epsilon,
            sparsity_floor: options.stats.sparsity_floor,
            policy: policy.name().to_string(),
            parameter_name: policy.parameter_name().to_string(),
            parameter: options.parameter,
        },
        layers: stats.iter().zip(&entries).map(|(s, e)| LayerRecord::new(s, e)).collect(),
        plan,
    })
}

/// Path of the CSV table written next to a JSON report.
pub fn csv_path_for(json_path: &Path) -> PathBuf {
    json_path.with_extension("csv")
}

/// Writes the report as canonical JSON and its layer table as CSV next to it.
pub fn write_report(report: &AnalysisReport, json_path: &Path) -> Result<PathBuf> {
    write_json_file(report, json_path)?;
    let csv = csv_path_for(json_path);
    std::fs::write(&csv, layers_to_csv(&report.layers)?).map_err(|e| Error::file(&csv, e))?;
    Ok(csv)
}

/// Re-plans from the scores stored in a report.
pub fn plan_from_report(
    report: &AnalysisReport,
    registry: &PolicyRegistry,
    policy: &str,
    parameter: f64,
) -> Result<PruningPlan> {
    report.check()?;
    registry.get(policy)?.select(&report.entries(), parameter)
}

/// Random plans of `size` layers, one per seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomControl {
    pub size: usize,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub policy: String,
    pub pruned_layers: Vec<usize>,
    pub perplexity: f64,
    pub retention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomRun {
    pub seed: u64,
    pub pruned_layers: Vec<usize>,
    pub perplexity: f64,
    pub retention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomSummary {
    pub size: usize,
    pub runs: Vec<RandomRun>,
    pub median_perplexity: f64,
    pub median_retention: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvalReport {
    pub tool_version: String,
    pub model_id: String,
    pub heldout_tokens: usize,
    pub retention_definition: String,
    pub baseline_perplexity: f64,
    pub plan: Option<PlanOutcome>,
    pub random_control: Option<RandomSummary>,
    /// Whether the plan's perplexity is at most the random median; present
    /// only when both were evaluated.
    pub plan_at_or_below_random_median: Option<bool>,
}

/// Median of a non-empty list; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    })
}

fn skip_of(plan: &PruningPlan, ckpt: &ToyCheckpoint) -> Result<SkipSet> {
    plan.check(ckpt.config.n_layers)?;
    SkipSet::new(plan.pruned_layers.iter().copied(), ckpt.config.n_layers)
}

/// Baseline perplexity, perplexity under `plan`, and the distribution over
/// random same-size plans.
pub fn prune_eval(
    ckpt: &ToyCheckpoint,
    heldout: &[u32],
    plan: Option<&PruningPlan>,
    random: Option<&RandomControl>,
) -> Result<PruneEvalReport> {
    let skips = plan.map(|p| skip_of(p, ckpt)).transpose()?;
    if let Some(r) = random {
        if r.seeds.is_empty() {
            return Err(Error::Usage("random control needs at least one seed".into()));
        }
        if r.size > ckpt.config.n_layers {
            return Err(Error::Plan(format!(
                "cannot prune {} of {} layers",
                r.size, ckpt.config.n_layers
            )));
        }
    }
    let baseline = perplexity(ckpt, heldout, &SkipSet::none())?;
    let plan_outcome = match (plan, skips) {
        (Some(plan), Some(skip)) => {
            let ppl = perplexity(ckpt, heldout, &skip)?;
            Some(PlanOutcome {
                policy: plan.policy.clone(),
                pruned_layers: plan.pruned_layers.clone(),
                perplexity: ppl,
                retention: baseline / ppl,
            })
        }
        _ => None,
    };
    let random_control = random
        .map(|r| -> Result<RandomSummary> {
            let runs = r
                .seeds
                .iter()
                .map(|&seed| {
                    let plan = random_plan(ckpt.config.n_layers, r.size, seed)?;
                    let ppl = perplexity(ckpt, heldout, &skip_of(&plan, ckpt)?)?;
                    Ok(RandomRun {
                        seed,
                        pruned_layers: plan.pruned_layers,
                        perplexity: ppl,
                        retention: baseline / ppl,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let ppls: Vec<f64> = runs.iter().map(|r| r.perplexity).collect();
            let retentions: Vec<f64> = runs.iter().map(|r| r.retention).collect();
            Ok(RandomSummary {
                size: r.size,
                median_perplexity: median(&ppls)?,
                median_retention: median(&retentions)?,
                runs,
            })
        })
        .transpose()?;
    let verdict = match (&plan_outcome, &random_control) {
        (Some(p), Some(r)) => Some(p.perplexity <= r.median_perplexity),
        _ => None,
    };
    Ok(PruneEvalReport {
        tool_version: TOOL_VERSION.to_string(),
        model_id: ckpt.model_id(),
        heldout_tokens: heldout.len(),
        retention_definition: RETENTION_DEFINITION.to_string(),
        baseline_perplexity: baseline,
        plan: plan_outcome,
        random_control,
        plan_at_or_below_random_median: verdict,
    })
}

/// Seeds of the random-control plans for experiment seed `seed`.
pub fn random_control_seeds(seed: u64, count: usize) -> Vec<u64> {
    (1..=count as u64).map(|j| seed.wrapping_mul(1000).wrapping_add(j)).collect()
}

/// Splits a token stream into a training prefix and a held-out suffix of
/// `ceil(len * fraction)` tokens.
pub fn split_heldout(tokens: &[u32], fraction: f64) -> Result<(&[u32], &[u32])> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!("held-out fraction must be in (0, 1), got {fraction}")));
    }
    let heldout = ((tokens.len() as f64) * fraction).ceil() as usize;
    Ok(tokens.split_at(tokens.len() - heldout.min(tokens.len())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOptions {
    /// Model and training settings; `seed` is replaced per run.
    pub model: ToyModelConfig,
    pub seeds: Vec<u64>,
    pub analyze: AnalyzeOptions,
    pub point: ActivationPoint,
    /// A second capture point analyzed and evaluated for comparison only.
    pub compare_point: Option<ActivationPoint>,
    pub random_controls: usize,
    /// Tokens from the start of the training split used for capture.
    pub calibration_tokens: usize,
    pub heldout_fraction: f64,
    /// At most this many tokens from the start of the held-out split are scored.
    pub max_heldout_tokens: usize,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        ExperimentOptions {
            model: ToyModelConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            analyze: AnalyzeOptions::default(),
            point: ActivationPoint::BlockUpdate,
            compare_point: Some(ActivationPoint::BlockOutput),
            random_controls: 5,
            calibration_tokens: 2048,
            heldout_fraction: 0.1,
            max_heldout_tokens: 8192,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointComparison {
    pub activation_point: ActivationPoint,
    pub pruned_layers: Vec<usize>,
    pub perplexity: f64,
    pub retention: f64,
    pub at_or_below_random_median: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub final_train_loss: Option<f64>,
    pub baseline_perplexity: f64,
    pub pruned_layers: Vec<usize>,
    pub avss_perplexity: f64,
    pub avss_retention: f64,
    pub random_perplexities: Vec<f64>,
    pub random_median_perplexity: f64,
    pub random_median_retention: f64,
    pub avss_at_or_below_random_median: bool,
    pub comparison: Option<PointComparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: usize,
    /// Seeds where the AVSS plan's perplexity is at most the random median.
    pub wins: usize,
    pub median_avss_retention: f64,
    pub median_random_retention: f64,
    pub comparison_wins: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub tool_version: String,
    pub model: ToyModelConfig,
    pub activation_point: ActivationPoint,
    pub epsilon: f64,
    pub sparsity_floor: f64,
    pub policy: String,
    pub parameter: f64,
    pub random_controls: usize,
    pub calibration_tokens: usize,
    pub heldout_tokens: usize,
    pub retention_definition: String,
    pub seeds: Vec<SeedRecord>,
    pub aggregate: Aggregate,
    pub caveats: Vec<String>,
}

pub const PLOT_CSV_HEADER: [&str; 6] = ["seed", "layer_index", "norm_avss", "cumulative_avss", "rank", "pruned"];

fn plot_rows(seed: u64, report: &AnalysisReport) -> Vec<Vec<String>> {
    report
        .layers
        .iter()
        .map(|r| {
            vec![
                seed.to_string(),
                r.layer_index.to_string(),
                format_float(r.norm_avss),
                format_float(r.cumulative_avss),
                r.rank.to_string(),
                u8::from(report.plan.pruned_layers.contains(&r.layer_index)).to_string(),
            ]
        })
        .collect()
}

fn stage<T>(name: &'static str, seed: u64, result: Result<T>) -> Result<T> {
    result.map_err(|source| Error::Stage {
        stage: name,
        seed,
        source: Box::new(source),
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::file(path, e))
}

/// Per-seed train, capture, analyze, plan and prune-eval with a random
/// control, followed by an aggregate summary.
///
/// Writes under `out_dir`: `seed-{s}/` holding `model.avckpt`,
/// `trace.avtrace`, `report.json`, `report.csv`, `plan.json` and
/// `prune_eval.json` (plus `report_{point}.json` for the comparison point),
/// and at the top level `summary.json` and `plot.csv`. The outputs are a pure
/// function of the corpus and the options.
pub fn run_experiment(corpus: &[u8], options: &ExperimentOptions, out_dir: &Path) -> Result<ExperimentSummary> {
    if options.seeds.is_empty() {
        return Err(Error::Usage("no seeds given".into()));
    }
    if options.calibration_tokens == 0 {
        return Err(Error::Usage("calibration_tokens must be positive".into()));
    }
    options.model.check()?;
    let registry = PolicyRegistry::with_builtins();
    registry.get(&options.analyze.policy)?;
    let tokens = byte_tokens(corpus);
    let (train_split, heldout_split) = split_heldout(&tokens, options.heldout_fraction)?;
    let heldout = &heldout_split[..heldout_split.len().min(options.max_heldout_tokens)];
    let calibration = &train_split[..train_split.len().min(options.calibration_tokens)];
    create_dir(out_dir)?;

    let mut records = Vec::with_capacity(options.seeds.len());
    let mut plot = Vec::new();
    for &seed in &options.seeds {
        let dir = out_dir.join(format!("seed-{seed}"));
        stage("setup", seed, create_dir(&dir))?;
        let config = ToyModelConfig {
            seed,
            ..options.model.clone()
        };
        let ckpt = stage("train", seed, train(&config, train_split))?;
        stage("train", seed, write_checkpoint_file(&ckpt, &dir.join("model.avckpt")))?;

        let set = stage("capture", seed, capture_traceset(&ckpt, calibration, options.point))?;
        stage("capture", seed, write_trace_file(&set, &dir.join("trace.avtrace")))?;

        let report = stage("analyze", seed, analyze(&set, &options.analyze, &registry))?;
        drop(set);
        stage("analyze", seed, write_report(&report, &dir.join("report.json")))?;
        stage("plan", seed, write_json_file(&report.plan, &dir.join("plan.json")))?;

        let control = RandomControl {
            size: report.plan.pruned_layers.len(),
            seeds: random_control_seeds(seed, options.random_controls),
        };
        let random = (options.random_controls > 0).then_some(&control);
        let eval = stage("prune-eval", seed, prune_eval(&ckpt, heldout, Some(&report.plan), random))?;
        stage("prune-eval", seed, write_json_file(&eval, &dir.join("prune_eval.json")))?;
        let outcome = eval.plan.as_ref().expect("plan was evaluated");
        let (random_ppls, random_median_ppl, random_median_ret) = match &eval.random_control {
            Some(r) => (
                r.runs.iter().map(|run| run.perplexity).collect(),
                r.median_perplexity,
                r.median_retention,
            ),
            None => (Vec::new(), f64::NAN, f64::NAN),
        };

        let comparison = match options.compare_point.filter(|&p| p != options.point) {
            Some(point) => {
                let set = stage("capture", seed, capture_traceset(&ckpt, calibration, point))?;
                let alt = stage("analyze", seed, analyze(&set, &options.analyze, &registry))?;
                drop(set);
                stage(
                    "analyze",
                    seed,
                    write_json_file(&alt, &dir.join(format!("report_{}.json", point.as_str()))),
                )?;
                let skip = stage("prune-eval", seed, skip_of(&alt.plan, &ckpt))?;
                let ppl = stage("prune-eval", seed, perplexity(&ckpt, heldout, &skip))?;
                Some(PointComparison {
                    activation_point: point,
                    pruned_layers: alt.plan.pruned_layers.clone(),
                    perplexity: ppl,
                    retention: eval.baseline_perplexity / ppl,
                    at_or_below_random_median: ppl <= random_median_ppl,
                })
            }
            None => None,
        };

        plot.extend(plot_rows(seed, &report));
        records.push(SeedRecord {
            seed,
            final_train_loss: ckpt.train_loss_history.last().copied(),
            baseline_perplexity: eval.baseline_perplexity,
            pruned_layers: outcome.pruned_layers.clone(),
            avss_perplexity: outcome.perplexity,
            avss_retention: outcome.retention,
            random_perplexities: random_ppls,
            random_median_perplexity: random_median_ppl,
            random_median_retention: random_median_ret,
            avss_at_or_below_random_median: outcome.perplexity <= random_median_ppl,
            comparison,
        });
    }

    let retentions: Vec<f64> = records.iter().map(|r| r.avss_retention).collect();
    let random_retentions: Vec<f64> = records.iter().map(|r| r.random_median_retention).collect();
    let comparison_wins = records
        .iter()
        .map(|r| r.comparison.as_ref().map(|c| usize::from(c.at_or_below_random_median)))
        .sum::<Option<usize>>();
    let aggregate = Aggregate {
        seeds: records.len(),
        wins: records.iter().filter(|r| r.avss_at_or_below_random_median).count(),
        median_avss_retention: median(&retentions)?,
        median_random_retention: median(&random_retentions)?,
        comparison_wins,
    };
    let mut caveats = Vec::new();
    if options.model.train_steps == 0 {
        caveats.push(UNTRAINED_CAVEAT.to_string());
    }
    let summary = ExperimentSummary {
        tool_version: TOOL_VERSION.to_string(),
        model: options.model.clone(),
        activation_point: options.point,
        epsilon: options.analyze.stats.epsilon,
        sparsity_floor: options.analyze.stats.sparsity_floor,
        policy: options.analyze.policy.clone(),
        parameter: options.analyze.parameter,
        random_controls: options.random_controls,
        calibration_tokens: calibration.len(),
        heldout_tokens: heldout.len(),
        retention_definition: RETENTION_DEFINITION.to_string(),
        seeds: records,
        aggregate,
        caveats,
    };
    write_json_file(&summary, &out_dir.join("summary.json"))?;
    let plot_path = out_dir.join("plot.csv");
    std::fs::write(&plot_path, csv_table(&PLOT_CSV_HEADER, plot)?).map_err(|e| Error::file(&plot_path, e))?;
    Ok(summary)
}
