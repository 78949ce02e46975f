//! Runs the default five-seed pruning experiment on the bundled corpus.
//!
//! `cargo run --release -p avss-core --example experiment -- OUT_DIR [key=value ...]`

use std::path::{Path, PathBuf};

use avss_core::pipeline::{run_experiment, ExperimentOptions};

fn main() -> Result<(), avss_core::Error> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "experiment-out".into()));
    let mut options = ExperimentOptions::default();
    for assignment in args {
        options.model.apply_override(&assignment)?;
    }
    let corpus_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("data/corpus.txt");
    let corpus = std::fs::read(&corpus_path).expect("bundled corpus");
    let summary = run_experiment(&corpus, &options, &out)?;
    for s in &summary.seeds {
        println!(
            "seed {}: baseline {:.3}  avss {:?} {:.3}  random median {:.3}  {:?}",
            s.seed, s.baseline_perplexity, s.pruned_layers, s.avss_perplexity, s.random_median_perplexity, s.comparison
        );
    }
    println!("wins {}/{}", summary.aggregate.wins, summary.aggregate.seeds);
    Ok(())
}
