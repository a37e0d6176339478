//! Generates a synthetic demo dataset plus a matching run config.
//!
//! Usage: cargo run --release -p ucnn-cli --example make_demo_data -- <dir>
//!
//! Writes `<dir>/instruments/*.csv`, `<dir>/aux/*.csv` and `<dir>/run.toml`,
//! ready for `ucnn --config <dir>/run.toml featurize`.

use ucnn_core::synth::{generate, write_csvs, SynthConfig};

fn main() {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "demo-data".to_string());
    let dir = std::path::PathBuf::from(dir);

    let cfg = SynthConfig { n_days: 800, n_instruments: 10, seed: 1, ..Default::default() };
    let dataset = generate(&cfg, 2);
    write_csvs(&dataset, &dir).expect("writing csv files");

    let n = dataset.dates.len();
    let train_end = dataset.dates[n - 120];
    let test_start = dataset.dates[n - 100];
    let test_end = dataset.dates[n - 1];
    let pool: Vec<String> = dataset
        .instruments
        .iter()
        .map(|i| format!("\"{}\"", i.instrument))
        .collect();
    let new: Vec<String> = dataset
        .held_out
        .iter()
        .map(|i| format!("\"{}\"", i.instrument))
        .collect();

    let config = format!(
        "version = 1\n\
         seed = 42\n\
         out_dir = \"{out}\"\n\
         \n\
         [data]\n\
         instrument_dir = \"{inst}\"\n\
         aux_dir = \"{aux}\"\n\
         pool = [{pool}]\n\
         new = [{new}]\n\
         \n\
         [split]\n\
         train_end = \"{train_end}\"\n\
         val_fraction = 0.25\n\
         test_start = \"{test_start}\"\n\
         test_end = \"{test_end}\"\n\
         \n\
         [train]\n\
         max_epochs = 15\n\
         batch_size = 64\n\
         patience = 4\n\
         learning_rate = 0.001\n",
        out = dir.join("run").display(),
        inst = dir.join("instruments").display(),
        aux = dir.join("aux").display(),
        pool = pool.join(", "),
        new = new.join(", "),
    );
    std::fs::write(dir.join("run.toml"), config).expect("writing run.toml");
    println!(
        "demo data in {}: {} pool + {} held-out instruments, {} days",
        dir.display(),
        dataset.instruments.len(),
        dataset.held_out.len(),
        n
    );
    println!("next: target/release/ucnn --config {} featurize", dir.join("run.toml").display());
}
