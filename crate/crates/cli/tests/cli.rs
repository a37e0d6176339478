//! End-to-end tests of the command-line surface: exit codes, file outputs,
//! determinism, and the freeze contracts as seen through model files.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ucnn_core::model::Model;
use ucnn_core::synth::{generate, write_csvs, SynthConfig};

const BIN: &str = env!("CARGO_BIN_EXE_ucnn");

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

/// Small three-instrument dataset plus one held-out instrument; one epoch
/// trainings keep the suite fast.
fn fixture(max_epochs: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let cfg = SynthConfig {
        n_days: 330,
        n_instruments: 3,
        seed: 9,
        ..Default::default()
    };
    let data = generate(&cfg, 1);
    write_csvs(&data, &root).unwrap();

    let n = data.dates.len();
    let config = root.join("run.toml");
    let text = format!(
        "version = 1\n\
         seed = 11\n\
         out_dir = \"{out}\"\n\
         [data]\n\
         instrument_dir = \"{inst}\"\n\
         aux_dir = \"{aux}\"\n\
         pool = [\"M00\", \"M01\", \"M02\"]\n\
         new = [\"NEW0\"]\n\
         [split]\n\
         train_end = \"{train_end}\"\n\
         val_fraction = 0.25\n\
         test_start = \"{test_start}\"\n\
         test_end = \"{test_end}\"\n\
         [architecture]\n\
         dropout = 0.1\n\
         [train]\n\
         max_epochs = {max_epochs}\n\
         batch_size = 32\n\
         patience = 5\n\
         learning_rate = 0.002\n",
        out = root.join("run").display(),
        inst = root.join("instruments").display(),
        aux = root.join("aux").display(),
        train_end = data.dates[n - 13],
        test_start = data.dates[n - 10],
        test_end = data.dates[n - 1],
    );
    std::fs::write(&config, text).unwrap();
    Fixture { dir, root, config }
}

fn ucnn(config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

#[test]
fn featurize_writes_feature_and_sample_files() {
    let fx = fixture(1);
    let out = ucnn(&fx.config, &["featurize"]);
    assert_ok(&out);
    for inst in ["M00", "M01", "M02", "NEW0"] {
        let csv = fx.root.join(format!("run/features/{inst}.features.csv"));
        let header = std::fs::read_to_string(&csv).unwrap();
        let cols = header.lines().next().unwrap().split(',').count();
        assert_eq!(cols, 83, "{inst}: date + 82 features");
        assert!(fx.root.join(format!("run/features/{inst}.samples.bin")).is_file());
    }
}

#[test]
fn featurize_reruns_are_byte_identical() {
    let fx = fixture(1);
    assert_ok(&ucnn(&fx.config, &["featurize"]));
    let path = fx.root.join("run/features/M00.samples.bin");
    let first = std::fs::read(&path).unwrap();
    assert_ok(&ucnn(&fx.config, &["featurize"]));
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn featurize_missing_aux_file_exits_2_naming_it() {
    let fx = fixture(1);
    std::fs::remove_file(fx.root.join("aux/DGS10.csv")).unwrap();
    let out = ucnn(&fx.config, &["featurize"]);
    assert_eq!(exit_code(&out), 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("DGS10.csv"), "stderr: {stderr}");
}

#[test]
fn train_base_writes_three_stage_models() {
    let fx = fixture(1);
    assert_ok(&ucnn(&fx.config, &["featurize"]));
    assert_ok(&ucnn(&fx.config, &["train-base"]));
    for depth in 2..=4 {
        let path = fx.root.join(format!("run/models/base-depth{depth}.ucnn"));
        let model = Model::load(&path).unwrap();
        assert_eq!(model.depth, depth);
        assert!(fx
            .root
            .join(format!("run/models/base-depth{depth}.metrics.csv"))
            .is_file());
    }
    assert!(fx.root.join("run/models/base.ucnn").is_file());
}

#[test]
fn train_base_same_seed_is_byte_identical() {
    let fx = fixture(1);
    assert_ok(&ucnn(&fx.config, &["featurize"]));
    assert_ok(&ucnn(&fx.config, &["train-base"]));
    let path = fx.root.join("run/models/base.ucnn");
    let first = std::fs::read(&path).unwrap();
    assert_ok(&ucnn(&fx.config, &["train-base"]));
    assert_eq!(first, std::fs::read(&path).unwrap());
}

#[test]
fn train_base_depth_only_writes_single_model() {
    let fx = fixture(1);
    assert_ok(&ucnn(&fx.config, &["featurize"]));
    assert_ok(&ucnn(&fx.config, &["train-base", "--depth-only", "2"]));
    let model = Model::load(&fx.root.join("run/models/base-depth2.ucnn")).unwrap();
    assert_eq!(model.depth, 2);
    assert!(!fx.root.join("run/models/base-depth3.ucnn").exists());
}

#[test]
fn finetune_partial_keeps_base_prefix_bits() {
    let fx = fixture(1);
    assert_ok(&ucnn(&fx.config, &["featurize"]));
    assert_ok(&ucnn(&fx.config, &["train-base"]));
    let base_path = fx.root.join("run/models/base.ucnn");
    assert_ok(&ucnn(
        &fx.config,
        &["finetune", "--base", base_path.to_str().unwrap(), "--mode", "partial"],
    ));
    let base = Model::load(&base_path).unwrap();
    let tuned = Model::load(&fx.root.join("run/models/NEW0.partial.ucnn")).unwrap();
    // All trainable layers except the output dense are bit-identical.
    assert_eq!(
        base.prefix_weights_hash(base.depth - 1),
        tuned.prefix_weights_hash(tuned.depth - 1)
    );
    assert!(fx.root.join("run/reports/NEW0__P_pred.csv").is_file());
}

#[test]
fn finetune_complete_zero_epochs_only_changes_metadata() {
    let fx = fixture(0);
    assert_ok(&ucnn(&fx.config, &["featurize"]));
    assert_ok(&ucnn(&fx.config, &["train-base"]));
    let base_path = fx.root.join("run/models/base.ucnn");
    assert_ok(&ucnn(
        &fx.config,
        &["finetune", "--base", base_path.to_str().unwrap(), "--mode", "complete"],
    ));
    let base = Model::load(&base_path).unwrap();
    let tuned = Model::load(&fx.root.join("run/models/NEW0.complete.ucnn")).unwrap();
    assert_eq!(base.params(), tuned.params());
    assert_eq!(tuned.metadata.provenance, "C pred");
}

#[test]
fn finetune_unknown_mode_is_usage_error() {
    let fx = fixture(1);
    let out = ucnn(
        &fx.config,
        &["finetune", "--base", "x.ucnn", "--mode", "sideways"],
    );
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn evaluate_missing_model_exits_2() {
    let fx = fixture(1);
    assert_ok(&ucnn(&fx.config, &["featurize"]));
    let out = ucnn(
        &fx.config,
        &["evaluate", "--model", "nope.ucnn", "--instrument", "M00"],
    );
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn evaluate_twice_identical_output() {
    let fx = fixture(1);
    assert_ok(&ucnn(&fx.config, &["featurize"]));
    assert_ok(&ucnn(&fx.config, &["train-base", "--depth-only", "2"]));
    let model = fx.root.join("run/models/base-depth2.ucnn");
    let args = [
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--instrument",
        "M00",
        "--tag",
        "B pred",
    ];
    let a = ucnn(&fx.config, &args);
    assert_ok(&a);
    let b = ucnn(&fx.config, &args);
    assert_eq!(a.stdout, b.stdout);
    let report = std::fs::read_to_string(fx.root.join("run/reports/M00__B_pred.csv")).unwrap();
    assert!(report.starts_with("instrument,model,macro_f"));
}

#[test]
fn predict_writes_probability_rows() {
    let fx = fixture(1);
    assert_ok(&ucnn(&fx.config, &["featurize"]));
    assert_ok(&ucnn(&fx.config, &["train-base", "--depth-only", "2"]));
    let model = fx.root.join("run/models/base-depth2.ucnn");
    assert_ok(&ucnn(
        &fx.config,
        &["predict", "--model", model.to_str().unwrap(), "--instrument", "NEW0"],
    ));
    let csv = std::fs::read_to_string(fx.root.join("run/predictions/NEW0.csv")).unwrap();
    assert!(csv.starts_with("date,probability,predicted\n"));
    assert!(csv.lines().count() > 1);
}

#[test]
fn report_empty_dir_exits_1() {
    let fx = fixture(1);
    let out = ucnn(&fx.config, &["report"]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn report_aggregates_and_tallies() {
    let fx = fixture(1);
    assert_ok(&ucnn(&fx.config, &["featurize"]));
    assert_ok(&ucnn(&fx.config, &["train-base"]));
    let base = fx.root.join("run/models/base.ucnn");
    for mode in ["partial", "complete"] {
        assert_ok(&ucnn(
            &fx.config,
            &["finetune", "--base", base.to_str().unwrap(), "--mode", mode],
        ));
    }
    // Also score the untuned base on the same instrument so the tally grid
    // is complete across three algorithms.
    assert_ok(&ucnn(
        &fx.config,
        &[
            "evaluate",
            "--model",
            base.to_str().unwrap(),
            "--instrument",
            "NEW0",
            "--tag",
            "B pred",
        ],
    ));
    let out = ucnn(&fx.config, &["report"]);
    assert_ok(&out);
    let summary = std::fs::read_to_string(fx.root.join("run/report/summary.csv")).unwrap();
    assert!(summary.lines().next().unwrap().contains("B pred"));
    assert!(summary.lines().last().unwrap().starts_with("Average,"));
    let tally = std::fs::read_to_string(fx.root.join("run/report/best_count.csv")).unwrap();
    let total: f64 = tally
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9, "one instrument, tally {total}");
}
