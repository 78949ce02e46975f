use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avss_core::corpus::byte_tokens;
use avss_core::pipeline::{self, AnalyzeOptions, ExperimentOptions, RandomControl};
use avss_core::policy::{PolicyRegistry, PruningPlan, DEFAULT_RHO, LOWEST_FRACTION};
use avss_core::report::{read_json_file, write_json_file, AnalysisReport};
use avss_core::stats::{StatsConfig, DEFAULT_EPSILON, DEFAULT_SPARSITY_FLOOR};
use avss_core::toy::{capture_traceset, read_checkpoint_file, train, write_checkpoint_file, ToyModelConfig};
use avss_core::trace::{read_trace_file, write_trace_file, ActivationPoint};
use avss_core::{Error, Result};

#[derive(Parser)]
#[command(name = "avss", version, about = "Rank transformer layers by activation variance over sparsity and prune the lowest")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-layer statistics, scores and a plan from an AVTRACE file.
    Analyze {
        trace: PathBuf,
        #[command(flatten)]
        selection: Selection,
        #[command(flatten)]
        stats: StatsArgs,
        /// Report path (JSON); the per-layer table is written next to it as CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive a pruning plan from an analysis report.
    Plan {
        report: PathBuf,
        #[command(flatten)]
        selection: Selection,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perplexity of a checkpoint before and after pruning.
    PruneEval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out text, tokenized as bytes.
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Also evaluate random plans pruning this many layers (defaults to
        /// the plan's size when a plan is given).
        #[arg(long, num_args = 0..=1, default_missing_value = "plan")]
        random: Option<String>,
        /// Seeds of the random plans, e.g. `1,2,3` or `1-5`.
        #[arg(long, default_value = "1-5")]
        seeds: String,
        /// Score at most this many held-out tokens.
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, capture, analyze, plan and prune-evaluate once per seed.
    RunExperiment {
        /// Training text; the last tenth is held out for evaluation.
        #[arg(long)]
        corpus: PathBuf,
        /// Model override such as `train_steps=100` (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Seeds, e.g. `1,2,3` or `1-5`.
        #[arg(long, default_value = "1-5")]
        seeds: String,
        #[command(flatten)]
        selection: Selection,
        #[command(flatten)]
        stats: StatsArgs,
        /// Capture point used for the plan.
        #[arg(long, default_value = "block-update")]
        point: ActivationPoint,
        /// Capture point analyzed alongside for comparison; `none` disables it.
        #[arg(long, default_value = "block-output")]
        compare_point: String,
        #[arg(long, default_value_t = 5)]
        random_controls: usize,
        #[arg(long, default_value_t = 2048)]
        calibration_tokens: usize,
        #[arg(long, default_value_t = 8192)]
        max_heldout_tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an AVTRACE file; prints one violation per line.
    Validate { trace: PathBuf },
    /// Train a toy model on a text file.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Capture per-layer activations of a toy model into an AVTRACE file.
    Capture {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text whose bytes are run through the model.
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long, default_value = "block-update")]
        point: ActivationPoint,
        #[arg(long)]
        max_tokens: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Selection {
    /// Selection policy.
    #[arg(long, default_value = LOWEST_FRACTION)]
    policy: String,
    /// Prune fraction for lowest-fraction.
    #[arg(long, default_value_t = DEFAULT_RHO)]
    rho: f64,
    /// Score mass budget for cumulative-mass.
    #[arg(long)]
    mass: Option<f64>,
}

impl Selection {
    fn parameter(&self, registry: &PolicyRegistry) -> Result<f64> {
        let (flag, value) = match registry.get(&self.policy)?.parameter_name() {
            "mass" => (
                "--mass",
                self.mass
                    .ok_or_else(|| Error::Usage(format!("policy `{}` needs --mass", self.policy)))?,
            ),
            _ => ("--rho", self.rho),
        };
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Usage(format!("{flag} must lie in [0, 1], got {value}")));
        }
        Ok(value)
    }

    fn options(&self, registry: &PolicyRegistry, stats: StatsConfig) -> Result<AnalyzeOptions> {
        Ok(AnalyzeOptions {
            stats,
            policy: self.policy.clone(),
            parameter: self.parameter(registry)?,
        })
    }
}

#[derive(Args)]
struct StatsArgs {
    /// Sparsity threshold: |a| < epsilon counts as inactive.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    epsilon: f64,
    /// Lower clamp on sparsity in the score denominator.
    #[arg(long, default_value_t = DEFAULT_SPARSITY_FLOOR)]
    sparsity_floor: f64,
}

impl StatsArgs {
    fn config(&self) -> Result<StatsConfig> {
        StatsConfig::new(self.epsilon, self.sparsity_floor).map_err(|e| Error::Usage(e.to_string()))
    }
}

/// Parses `1,2,7-9` into `[1, 2, 7, 8, 9]`.
fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::Usage(format!("bad seed list `{spec}` (expected e.g. 1,2,3 or 1-5)"));
    let mut seeds = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn read_tokens(path: &Path, limit: Option<usize>) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut tokens = byte_tokens(&bytes);
    if let Some(n) = limit {
        tokens.truncate(n);
    }
    Ok(tokens)
}

fn model_config(overrides: &[String]) -> Result<ToyModelConfig> {
    let mut config = ToyModelConfig::default();
    for o in overrides {
        config.apply_override(o)?;
    }
    config.check().map_err(|e| Error::Usage(e.to_string()))?;
    Ok(config)
}

fn run(command: Command) -> Result<()> {
    let registry = PolicyRegistry::with_builtins();
    match command {
        Command::Analyze {
            trace,
            selection,
            stats,
            out,
        } => {
            let options = selection.options(&registry, stats.config()?)?;
            let set = read_trace_file(&trace)?;
            let report = pipeline::analyze(&set, &options, &registry)?;
            let csv = pipeline::write_report(&report, &out)?;
            println!("wrote {} and {}", out.display(), csv.display());
        }
        Command::Plan { report, selection, out } => {
            let parameter = selection.parameter(&registry)?;
            let report: AnalysisReport = read_json_file(&report)?;
            let plan = pipeline::plan_from_report(&report, &registry, &selection.policy, parameter)?;
            write_json_file(&plan, &out)?;
            println!("pruned {:?}; wrote {}", plan.pruned_layers, out.display());
        }
        Command::PruneEval {
            checkpoint,
            heldout,
            plan,
            random,
            seeds,
            max_tokens,
            out,
        } => {
            let ckpt = read_checkpoint_file(&checkpoint)?;
            let heldout = read_tokens(&heldout, max_tokens)?;
            let plan: Option<PruningPlan> = plan.map(|p| read_json_file(&p)).transpose()?;
            let control = match random.as_deref() {
                None => None,
                Some(size) => {
                    let size = match (size, &plan) {
                        ("plan", Some(p)) => p.pruned_layers.len(),
                        ("plan", None) => return Err(Error::Usage("--random needs a layer count when no --plan is given".into())),
                        (n, _) => n.parse().map_err(|_| Error::Usage(format!("bad --random count `{n}`")))?,
                    };
                    Some(RandomControl {
                        size,
                        seeds: parse_seeds(&seeds)?,
                    })
                }
            };
            if plan.is_none() && control.is_none() {
                return Err(Error::Usage("give --plan, --random or both".into()));
            }
            let report = pipeline::prune_eval(&ckpt, &heldout, plan.as_ref(), control.as_ref())?;
            write_json_file(&report, &out)?;
            println!("baseline perplexity {:.4}", report.baseline_perplexity);
            if let Some(p) = &report.plan {
                println!("plan {:?}: perplexity {:.4}, retention {:.4}", p.pruned_layers, p.perplexity, p.retention);
            }
            if let Some(r) = &report.random_control {
                println!(
                    "random ({} plans of {}): median perplexity {:.4}, median retention {:.4}",
                    r.runs.len(),
                    r.size,
                    r.median_perplexity,
                    r.median_retention
                );
            }
        }
        Command::RunExperiment {
            corpus,
            overrides,
            seeds,
            selection,
            stats,
            point,
            compare_point,
            random_controls,
            calibration_tokens,
            max_heldout_tokens,
            out,
        } => {
            let compare_point = match compare_point.as_str() {
                "none" => None,
                other => Some(other.parse()?),
            };
            let options = ExperimentOptions {
                model: model_config(&overrides)?,
                seeds: parse_seeds(&seeds)?,
                analyze: selection.options(&registry, stats.config()?)?,
                point,
                compare_point,
                random_controls,
                calibration_tokens,
                max_heldout_tokens,
                ..ExperimentOptions::default()
            };
            let text = std::fs::read(&corpus).map_err(|e| Error::Data(format!("{}: {e}", corpus.display())))?;
            let summary = pipeline::run_experiment(&text, &options, &out)?;
            for s in &summary.seeds {
                println!(
                    "seed {}: baseline {:.4}, pruned {:?} -> {:.4} (retention {:.4}), random median {:.4}",
                    s.seed,
                    s.baseline_perplexity,
                    s.pruned_layers,
                    s.avss_perplexity,
                    s.avss_retention,
                    s.random_median_perplexity
                );
            }
            println!(
                "{} of {} seeds at or below the random median; wrote {}",
                summary.aggregate.wins,
                summary.aggregate.seeds,
                out.join("summary.json").display()
            );
            for caveat in &summary.caveats {
                println!("caveat: {caveat}");
            }
        }
        Command::Validate { trace } => {
            read_trace_file(&trace)?;
        }
        Command::Train { corpus, overrides, out } => {
            let config = model_config(&overrides)?;
            let tokens = read_tokens(&corpus, None)?;
            let ckpt = train(&config, &tokens)?;
            write_checkpoint_file(&ckpt, &out)?;
            if let Some(loss) = ckpt.train_loss_history.last() {
                println!("final train loss {loss:.4}");
            }
            println!("wrote {}", out.display());
        }
        Command::Capture {
            checkpoint,
            tokens,
            point,
            max_tokens,
            out,
        } => {
            let ckpt = read_checkpoint_file(&checkpoint)?;
            let tokens = read_tokens(&tokens, max_tokens)?;
            let set = capture_traceset(&ckpt, &tokens, point)?;
            write_trace_file(&set, &out)?;
            println!("wrote {} ({} layers x {} samples)", out.display(), set.layer_count(), tokens.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    // validate reports violations as its output; other commands treat them as errors
    let listing = matches!(cli.command, Command::Validate { .. });
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Validation(violations)) => {
            for v in &violations {
                if listing {
                    println!("{v}");
                } else {
                    eprintln!("{v}");
                }
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
