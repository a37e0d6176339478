//! Implementations of the pipeline subcommands.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use ucnn_core::dataio::{
    self, featurize_and_split, load_aux_csv, load_instrument_csv, read_samples_bin,
    write_samples_bin, AuxSeries, DatasetSplit,
};
use ucnn_core::eval::{self, EvalReport, REPORT_CSV_HEADER};
use ucnn_core::features::FeatureError;
use ucnn_core::model::{build_subcnn, Model};
use ucnn_core::tensor::Tensor;
use ucnn_core::training::{
    self, fine_tune_complete, fine_tune_partial, layerwise_train, stage_seed, TrainConfig,
};

use crate::config::RunConfig;
use crate::{CliError, FinetuneMode};

fn io_err(context: &str, e: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("{context}: {e}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| io_err(&format!("creating {}", parent.display()), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(&format!("writing {}", path.display()), e))
}

/// Loads every `*.csv` in the auxiliary directory, keyed by file stem.
fn load_aux_dir(cfg: &RunConfig) -> Result<Vec<AuxSeries>, CliError> {
    let mut paths: Vec<_> = std::fs::read_dir(&cfg.aux_dir)
        .map_err(|e| io_err(&format!("reading {}", cfg.aux_dir.display()), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::usage(format!("bad aux file name {}", path.display())))?
            .to_string();
        out.push(load_aux_csv(&path, &name).map_err(|e| CliError::usage(e.to_string()))?);
    }
    Ok(out)
}

fn load_split(cfg: &RunConfig, instrument: &str) -> Result<DatasetSplit, CliError> {
    let path = cfg.samples_bin(instrument);
    let bytes = std::fs::read(&path).map_err(|e| {
        io_err(
            &format!("reading {} (run `featurize` first?)", path.display()),
            e,
        )
    })?;
    read_samples_bin(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn featurize(cfg: &RunConfig) -> Result<(), CliError> {
    let aux = load_aux_dir(cfg)?;
    let mut instruments: Vec<String> = cfg.pool.clone();
    instruments.extend(cfg.new.iter().cloned());

    for inst in &instruments {
        let series = load_instrument_csv(&cfg.instrument_csv(inst), inst)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let raw = dataio::build_raw_series(&series, &aux)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let (matrix, split) =
            featurize_and_split(&raw, &cfg.split, cfg.arch.window).map_err(|e| match e {
                dataio::DataError::Feature(FeatureError::MissingSource {
                    source_name, ..
                }) => CliError::usage(format!(
                    "{e} (expected file {})",
                    cfg.aux_dir.join(format!("{source_name}.csv")).display()
                )),
                dataio::DataError::EmptyPartition { .. } => CliError::degenerate(e.to_string()),
                other => CliError::usage(other.to_string()),
            })?;

        write_file(
            &cfg.features_dir().join(format!("{inst}.features.csv")),
            matrix.to_csv().as_bytes(),
        )?;
        write_file(&cfg.samples_bin(inst), &write_samples_bin(&split))?;

        println!(
            "{inst}: {} rows, {} valid, samples train/val/test = {}/{}/{} (discarded {})",
            matrix.n_rows(),
            matrix.n_valid_rows(),
            split.train.len(),
            split.validation.len(),
            split.test.len(),
            split.provenance.discarded,
        );
    }
    Ok(())
}

fn pooled_sets(
    cfg: &RunConfig,
) -> Result<(ucnn_core::features::SampleSet, ucnn_core::features::SampleSet), CliError> {
    let mut splits = Vec::new();
    for inst in &cfg.pool {
        splits.push(load_split(cfg, inst)?);
    }
    let train = ucnn_core::features::SampleSet::concat(
        &splits.iter().map(|s| &s.train).collect::<Vec<_>>(),
    );
    let val = ucnn_core::features::SampleSet::concat(
        &splits.iter().map(|s| &s.validation).collect::<Vec<_>>(),
    );
    Ok((train, val))
}

pub fn train_base(cfg: &RunConfig, depth_only: Option<usize>) -> Result<(), CliError> {
    let (pool_train, pool_val) = pooled_sets(cfg)?;
    if pool_train.is_empty() {
        return Err(CliError::degenerate("pooled training set is empty"));
    }
    let train_cfg = TrainConfig { seed: cfg.seed(), ..cfg.train.clone() };

    if let Some(depth) = depth_only {
        let seed = stage_seed(train_cfg.seed, depth);
        let model = build_subcnn(&cfg.arch, depth, seed)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let (trained, report) = training::train(model, &pool_train, &pool_val, &train_cfg)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let path = cfg.models_dir().join(format!("base-depth{depth}.ucnn"));
        write_file(&path, &trained.serialize())?;
        write_file(
            &cfg.models_dir().join(format!("base-depth{depth}.metrics.csv")),
            report.to_csv().as_bytes(),
        )?;
        println!(
            "depth {depth}: best val macro-F {:?} -> {}",
            report.best_val_macro_f(),
            path.display()
        );
        return Ok(());
    }

    let outcome = layerwise_train(&cfg.arch, &pool_train, &pool_val, &train_cfg)
        .map_err(|e| CliError::usage(e.to_string()))?;
    for (model, record) in outcome.stage_models.iter().zip(&outcome.stage_records) {
        let path = cfg.models_dir().join(format!("base-depth{}.ucnn", record.depth));
        write_file(&path, &model.serialize())?;
        write_file(
            &cfg
                .models_dir()
                .join(format!("base-depth{}.metrics.csv", record.depth)),
            record.report.to_csv().as_bytes(),
        )?;
        println!(
            "depth {}: best val macro-F {:?} -> {}",
            record.depth,
            record.report.best_val_macro_f(),
            path.display()
        );
    }
    write_file(
        &cfg.models_dir().join("base.ucnn"),
        &outcome.model.serialize(),
    )?;
    println!("base predictor -> {}", cfg.models_dir().join("base.ucnn").display());
    Ok(())
}

/// Sanitized tag for use inside file names.
fn tag_slug(tag: &str) -> String {
    tag.replace(' ', "_")
}

fn eval_and_write(
    cfg: &RunConfig,
    model: &Model,
    split: &DatasetSplit,
    instrument: &str,
    tag: &str,
) -> Result<EvalReport, CliError> {
    if split.test.is_empty() {
        return Err(CliError::degenerate(format!("{instrument}: empty test split")));
    }
    let report = eval::evaluate_model(model, &split.test, tag)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let path = cfg
        .reports_dir()
        .join(format!("{instrument}__{}.csv", tag_slug(tag)));
    let content = format!("{REPORT_CSV_HEADER}\n{}\n", report.csv_row());
    write_file(&path, content.as_bytes())?;
    Ok(report)
}

fn worker_count() -> usize {
    std::env::var("UCNN_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

pub fn finetune(
    cfg: &RunConfig,
    base_path: &Path,
    instrument: &str,
    mode: FinetuneMode,
) -> Result<(), CliError> {
    let base = Model::load(base_path)
        .map_err(|e| io_err(&format!("loading {}", base_path.display()), e))?;

    let instruments: Vec<String> = if instrument == "all" {
        if cfg.new.is_empty() {
            return Err(CliError::degenerate(
                "no new instruments configured to fine-tune".to_string(),
            ));
        }
        cfg.new.clone()
    } else {
        vec![instrument.to_string()]
    };

    let train_cfg = TrainConfig { seed: cfg.seed(), ..cfg.train.clone() };
    let (mode_name, tag) = match mode {
        FinetuneMode::Partial => ("partial", "P pred"),
        FinetuneMode::Complete => ("complete", "C pred"),
    };

    // Fan out across instruments, each worker on its own copy of the base.
    let queue: Mutex<VecDeque<String>> = Mutex::new(instruments.iter().cloned().collect());
    let results: Mutex<Vec<(String, Result<f64, CliError>)>> = Mutex::new(Vec::new());
    let n_workers = worker_count().min(instruments.len()).max(1);

    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let inst = match queue.lock().unwrap().pop_front() {
                    Some(i) => i,
                    None => break,
                };
                let outcome = (|| -> Result<f64, CliError> {
                    let split = load_split(cfg, &inst)?;
                    let (tuned, report) = match mode {
                        FinetuneMode::Partial => {
                            fine_tune_partial(&base, &split.train, &split.validation, &train_cfg)
                        }
                        FinetuneMode::Complete => {
                            fine_tune_complete(&base, &split.train, &split.validation, &train_cfg)
                        }
                    }
                    .map_err(|e| CliError::usage(e.to_string()))?;
                    write_file(
                        &cfg.models_dir().join(format!("{inst}.{mode_name}.ucnn")),
                        &tuned.serialize(),
                    )?;
                    write_file(
                        &cfg
                            .models_dir()
                            .join(format!("{inst}.{mode_name}.metrics.csv")),
                        report.to_csv().as_bytes(),
                    )?;
                    let eval_report = eval_and_write(cfg, &tuned, &split, &inst, tag)?;
                    Ok(eval_report.macro_f)
                })();
                results.lock().unwrap().push((inst, outcome));
            });
        }
    });

    let mut results = results.into_inner().unwrap();
    results.sort_by(|a, b| a.0.cmp(&b.0));
    let mut first_err: Option<CliError> = None;
    for (inst, outcome) in results {
        match outcome {
            Ok(macro_f) => println!("{inst} ({tag}): test macro-F {macro_f:.4}"),
            Err(e) => {
                eprintln!("{inst}: {e}");
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn predict(cfg: &RunConfig, model_path: &Path, instrument: &str) -> Result<(), CliError> {
    let model = Model::load(model_path)
        .map_err(|e| io_err(&format!("loading {}", model_path.display()), e))?;
    let split = load_split(cfg, instrument)?;
    if split.test.is_empty() {
        return Err(CliError::degenerate(format!("{instrument}: empty test split")));
    }
    let mut out = String::from("date,probability,predicted\n");
    for s in &split.test.samples {
        let x = Tensor::new(
            vec![1, split.test.window_len, split.test.n_features],
            s.window.clone(),
        );
        let p = model
            .forward_sample(&x)
            .map_err(|e| CliError::usage(e.to_string()))?;
        out.push_str(&format!("{},{:.9},{}\n", s.label_date, p, u8::from(p > 0.5)));
    }
    let path = cfg.predictions_dir().join(format!("{instrument}.csv"));
    write_file(&path, out.as_bytes())?;
    println!("{} predictions -> {}", split.test.len(), path.display());
    Ok(())
}

pub fn evaluate(
    cfg: &RunConfig,
    model_path: &Path,
    instrument: &str,
    tag: Option<&str>,
) -> Result<(), CliError> {
    let model = Model::load(model_path)
        .map_err(|e| io_err(&format!("loading {}", model_path.display()), e))?;
    let split = load_split(cfg, instrument)?;
    let tag = tag
        .map(|t| t.to_string())
        .unwrap_or_else(|| model.metadata.provenance.clone());
    let report = eval_and_write(cfg, &model, &split, instrument, &tag)?;
    println!("{REPORT_CSV_HEADER}");
    println!("{}", report.csv_row());
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg.reports_dir();
    let mut paths: Vec<_> = match std::fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|x| x == "csv").unwrap_or(false))
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    let mut reports = Vec::new();
    for path in &paths {
        let text = std::fs::read_to_string(path)
            .map_err(|e| io_err(&format!("reading {}", path.display()), e))?;
        for line in text.lines().skip(1) {
            if let Some(r) = EvalReport::parse_csv_row(line) {
                reports.push(r);
            }
        }
    }
    if reports.is_empty() {
        return Err(CliError::degenerate(format!(
            "no report rows found under {}",
            dir.display()
        )));
    }

    let tables = eval::render_report(&reports);
    let out_dir = cfg.out_dir.join("report");
    write_file(&out_dir.join("summary.csv"), tables.csv.as_bytes())?;
    write_file(&out_dir.join("summary.txt"), tables.text.as_bytes())?;
    print!("{}", tables.text);

    match eval::best_count(&reports) {
        Ok(counts) => {
            let mut csv = String::from("algorithm,wins\n");
            println!("best-count tally:");
            for (algo, wins) in &counts {
                csv.push_str(&format!("{algo},{wins}\n"));
                println!("  {algo}: {wins}");
            }
            write_file(&out_dir.join("best_count.csv"), csv.as_bytes())?;
        }
        Err(e) => {
            eprintln!("skipping best-count tally: {e}");
        }
    }
    Ok(())
}
