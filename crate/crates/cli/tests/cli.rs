use std::path::Path;
use std::process::{Command, Output};

use avss_core::pipeline::{ExperimentSummary, PruneEvalReport, UNTRAINED_CAVEAT};
use avss_core::policy::PruningPlan;
use avss_core::report::{layers_from_csv, read_json_file, write_json_file, AnalysisReport};
use avss_core::toy::{init_checkpoint, perplexity, write_checkpoint_file, SkipSet, ToyModelConfig};
use avss_core::trace::{write_trace, write_trace_file, ActivationPoint, Dtype, LayerTrace, TraceSet};

fn avss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avss")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Two layers of four samples: variances 2 and 2, sparsities 0.5 and 0.25.
fn fixture(dir: &Path) -> std::path::PathBuf {
    let set = TraceSet::new(
        "fixture",
        ActivationPoint::BlockOutput,
        Dtype::F64,
        vec![
            LayerTrace::from_f64(0, 4, 1, vec![0.0, 0.0, 2.0, -2.0]),
            LayerTrace::from_f64(1, 4, 1, vec![0.0, 2.0, 2.0, 4.0]),
        ],
    )
    .unwrap();
    let path = dir.join("fixture.avtrace");
    write_trace_file(&set, &path).unwrap();
    path
}

#[test]
fn analyze_fixture_scores_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let trace = fixture(dir.path());
    let out = dir.path().join("report.json");
    let run = avss(&["analyze", s(&trace), "--rho", "0.5", "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));

    let report: AnalysisReport = read_json_file(&out).unwrap();
    let avss: Vec<f64> = report.layers.iter().map(|l| l.avss).collect();
    let norm: Vec<f64> = report.layers.iter().map(|l| l.norm_avss).collect();
    assert_eq!(avss, vec![4.0, 8.0]);
    assert!((norm[0] - 1.0 / 3.0).abs() <= 1e-15 && (norm[1] - 2.0 / 3.0).abs() <= 1e-15);
    assert_eq!(report.plan.pruned_layers, vec![0]);

    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(layers_from_csv(&csv).unwrap(), report.layers);
}

#[test]
fn repeated_analysis_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let trace = fixture(dir.path());
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        assert_eq!(code(&avss(&["analyze", s(&trace), "--out", s(out)])), 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.csv")).unwrap(),
        std::fs::read(dir.path().join("b.csv")).unwrap()
    );
}

#[test]
fn plan_from_report_with_both_policies() {
    let dir = tempfile::tempdir().unwrap();
    let trace = fixture(dir.path());
    let report = dir.path().join("report.json");
    assert_eq!(code(&avss(&["analyze", s(&trace), "--out", s(&report)])), 0);

    let plan_path = dir.path().join("plan.json");
    let cases: [(&[&str], Vec<usize>); 4] = [
        (&["--rho", "0.5"], vec![0]),
        (&["--rho", "0"], vec![]),
        (&["--rho", "1"], vec![0, 1]),
        (&["--policy", "cumulative-mass", "--mass", "0.5"], vec![0]),
    ];
    for (extra, want) in cases {
        let mut args = vec!["plan", s(&report), "--out", s(&plan_path)];
        args.extend_from_slice(extra);
        let run = avss(&args);
        assert_eq!(code(&run), 0, "{extra:?}: {}", String::from_utf8_lossy(&run.stderr));
        let plan: PruningPlan = read_json_file(&plan_path).unwrap();
        assert_eq!(plan.pruned_layers, want, "{extra:?}");
        assert_eq!(plan.pruned_layers.len() + plan.kept_layers.len(), 2);
    }
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let trace = fixture(dir.path());
    let out = dir.path().join("r.json");
    for args in [
        vec!["analyze", s(&trace), "--policy", "no-such-policy", "--out", s(&out)],
        vec!["analyze", s(&trace), "--policy", "cumulative-mass", "--out", s(&out)],
        vec!["analyze", s(&trace), "--rho", "1.5", "--out", s(&out)],
        vec!["analyze", s(&trace), "--epsilon", "-1", "--out", s(&out)],
        vec!["no-such-command"],
        vec!["analyze"],
    ] {
        let run = avss(&args);
        assert_eq!(code(&run), 1, "{args:?}: {}", String::from_utf8_lossy(&run.stderr));
    }
    assert!(!out.exists());
    assert_eq!(code(&avss(&["--help"])), 0);
}

#[test]
fn validate_reports_problems_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let good = fixture(dir.path());
    let run = avss(&["validate", s(&good)]);
    assert_eq!(code(&run), 0);
    assert!(run.stdout.is_empty());

    let bytes = std::fs::read(&good).unwrap();
    let truncated = dir.path().join("truncated.avtrace");
    std::fs::write(&truncated, &bytes[..bytes.len() - 3]).unwrap();
    let run = avss(&["validate", s(&truncated)]);
    assert_eq!(code(&run), 2);

    let bad_magic = dir.path().join("magic.avtrace");
    let mut b = bytes.clone();
    b[0] = b'X';
    std::fs::write(&bad_magic, &b).unwrap();
    assert_eq!(code(&avss(&["validate", s(&bad_magic)])), 2);

    // NaN written bypassing the writer's own checks by patching the buffer
    let mut set_bytes = Vec::new();
    let set = TraceSet::new(
        "nan",
        ActivationPoint::BlockOutput,
        Dtype::F64,
        vec![
            LayerTrace::from_f64(0, 2, 1, vec![1.0, 2.0]),
            LayerTrace::from_f64(1, 2, 1, vec![3.0, 12345.0]),
        ],
    )
    .unwrap();
    write_trace(&set, &mut set_bytes).unwrap();
    let needle = 12345.0f64.to_le_bytes();
    let at = set_bytes.windows(8).position(|w| w == needle).unwrap();
    set_bytes[at..at + 8].copy_from_slice(&f64::NAN.to_le_bytes());
    let nan = dir.path().join("nan.avtrace");
    std::fs::write(&nan, &set_bytes).unwrap();
    let run = avss(&["validate", s(&nan)]);
    assert_eq!(code(&run), 2);
    let text = String::from_utf8_lossy(&run.stdout);
    assert!(text.contains("layer 1") && text.contains("non_finite") && text.contains("1"), "{text}");
}

fn small_model(dir: &Path) -> (ToyConfigPaths, avss_core::toy::ToyCheckpoint) {
    let cfg = ToyModelConfig {
        vocab_size: 256,
        context_len: 8,
        d_model: 8,
        n_heads: 2,
        n_layers: 3,
        seed: 9,
        learning_rate: 1e-3,
        train_steps: 0,
        batch_size: 1,
        tie_head: false,
    };
    let ckpt = init_checkpoint(&cfg).unwrap();
    let model = dir.join("model.avckpt");
    write_checkpoint_file(&ckpt, &model).unwrap();
    let heldout = dir.join("heldout.txt");
    std::fs::write(&heldout, "the quick brown fox jumps over the lazy dog, again and again.").unwrap();
    (ToyConfigPaths { model, heldout }, ckpt)
}

struct ToyConfigPaths {
    model: std::path::PathBuf,
    heldout: std::path::PathBuf,
}

fn plan(pruned: Vec<usize>, layer_count: usize) -> PruningPlan {
    PruningPlan {
        policy: "lowest-fraction".into(),
        parameter: pruned.len() as f64 / layer_count as f64,
        layer_count,
        kept_layers: (0..layer_count).filter(|i| !pruned.contains(i)).collect(),
        pruned_layers: pruned,
        tie_break: "lower index pruned first".into(),
    }
}

#[test]
fn prune_eval_empty_and_full_plans() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, ckpt) = small_model(dir.path());
    let heldout: Vec<u32> = std::fs::read(&paths.heldout).unwrap().into_iter().map(u32::from).collect();

    for (pruned, skip) in [(vec![], SkipSet::none()), (vec![0, 1, 2], SkipSet::all(3))] {
        let plan_path = dir.path().join("plan.json");
        write_json_file(&plan(pruned.clone(), 3), &plan_path).unwrap();
        let out = dir.path().join("eval.json");
        let run = avss(&[
            "prune-eval",
            "--checkpoint",
            s(&paths.model),
            "--heldout",
            s(&paths.heldout),
            "--plan",
            s(&plan_path),
            "--random",
            "--seeds",
            "1-3",
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
        let report: PruneEvalReport = read_json_file(&out).unwrap();
        let outcome = report.plan.unwrap();
        assert_eq!(outcome.perplexity, perplexity(&ckpt, &heldout, &skip).unwrap());
        assert_eq!(report.baseline_perplexity, perplexity(&ckpt, &heldout, &SkipSet::none()).unwrap());
        let random = report.random_control.unwrap();
        assert_eq!(random.runs.len(), 3);
        assert!(random.runs.iter().all(|r| r.pruned_layers.len() == pruned.len()));
        if pruned.is_empty() {
            assert_eq!(outcome.retention, 1.0);
        } else {
            // every random plan of size 3 is the full plan
            assert_eq!(random.median_perplexity, outcome.perplexity);
            assert_eq!(report.plan_at_or_below_random_median, Some(true));
        }
    }
}

#[test]
fn prune_eval_rejects_mismatched_plan() {
    let dir = tempfile::tempdir().unwrap();
    let (paths, _) = small_model(dir.path());
    let plan_path = dir.path().join("plan.json");
    write_json_file(&plan(vec![0], 5), &plan_path).unwrap();
    let run = avss(&[
        "prune-eval",
        "--checkpoint",
        s(&paths.model),
        "--heldout",
        s(&paths.heldout),
        "--plan",
        s(&plan_path),
        "--out",
        s(&dir.path().join("eval.json")),
    ]);
    assert_eq!(code(&run), 2, "{}", String::from_utf8_lossy(&run.stderr));
}

#[test]
fn train_capture_analyze_round() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    std::fs::write(&corpus, "abcabcabd ".repeat(200)).unwrap();
    let model = dir.path().join("m.avckpt");
    let settings = ["--set", "d_model=16", "--set", "n_layers=2", "--set", "context_len=16", "--set", "train_steps=5"];
    let mut args = vec!["train", "--corpus", s(&corpus), "--out", s(&model)];
    args.extend_from_slice(&settings);
    let run = avss(&args);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));

    let trace = dir.path().join("t.avtrace");
    let run = avss(&[
        "capture",
        "--checkpoint",
        s(&model),
        "--tokens",
        s(&corpus),
        "--max-tokens",
        "64",
        "--out",
        s(&trace),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(code(&avss(&["validate", s(&trace)])), 0);
    let report = dir.path().join("r.json");
    assert_eq!(code(&avss(&["analyze", s(&trace), "--out", s(&report)])), 0);
    let report: AnalysisReport = read_json_file(&report).unwrap();
    assert_eq!(report.layer_count, 2);
    assert_eq!(report.activation_point, ActivationPoint::BlockUpdate);
}

#[test]
fn untrained_experiment_carries_caveat_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/corpus.txt");
    let run = avss(&[
        "run-experiment",
        "--corpus",
        s(&corpus),
        "--set",
        "d_model=16",
        "--set",
        "n_layers=4",
        "--set",
        "train_steps=0",
        "--seeds",
        "1",
        "--calibration-tokens",
        "128",
        "--max-heldout-tokens",
        "256",
        "--random-controls",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let summary: ExperimentSummary = read_json_file(&out.join("summary.json")).unwrap();
    assert!(summary.caveats.iter().any(|c| c == UNTRAINED_CAVEAT));
    assert_eq!(summary.seeds.len(), 1);
    assert_eq!(summary.seeds[0].pruned_layers.len(), 1);

    let plot = std::fs::read_to_string(out.join("plot.csv")).unwrap();
    let rows: Vec<Vec<String>> = plot.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);
    let last: f64 = rows[3][3].parse().unwrap();
    assert!((last - 1.0).abs() <= 1e-12);
    let pruned: Vec<&str> = rows.iter().map(|r| r[5].as_str()).collect();
    assert_eq!(pruned.iter().filter(|p| **p == "1").count(), 1);
}
