//! scratch: 5-seed acceptance run on fast-mixing fixture
use ucnn_core::dataio::read_samples_bin;
use ucnn_core::eval::evaluate_model;
use ucnn_core::features::SampleSet;
use ucnn_core::model::{build_base_cnn, ArchitectureConfig};
use ucnn_core::optim::OptimizerConfig;
use ucnn_core::training::{layerwise_train, train, TrainConfig};

fn main() {
    let mut train_sets = Vec::new();
    let mut val_sets = Vec::new();
    let mut test_sets = Vec::new();
    for i in 0..10 {
        let bytes = std::fs::read(format!("/tmp/demo/run/features/M{i:02}.samples.bin")).unwrap();
        let split = read_samples_bin(&bytes).unwrap();
        train_sets.push(split.train.clone());
        val_sets.push(split.validation.clone());
        test_sets.push(split.test.clone());
    }
    let tr = SampleSet::concat(&train_sets.iter().collect::<Vec<_>>());
    let val = SampleSet::concat(&val_sets.iter().collect::<Vec<_>>());
    let test = SampleSet::concat(&test_sets.iter().collect::<Vec<_>>());

    let drop = 0.5;
    let mut lws = Vec::new();
    let mut cvs = Vec::new();
    for seed in [1u64, 2, 3, 4, 5] {
        let arch = ArchitectureConfig { dropout_rate: drop, ..Default::default() };
        let cfg = TrainConfig {
            max_epochs: 60, batch_size: 32, patience: 15,
            optimizer: OptimizerConfig::adam(0.002), seed, dropout_rate: drop,
        };
        let t0 = std::time::Instant::now();
        let out = layerwise_train(&arch, &tr, &val, &cfg).unwrap();
        let lw = evaluate_model(&out.model, &test, "B").unwrap().macro_f;
        let (conv_m, _) = train(build_base_cnn(&arch, seed).unwrap(), &tr, &val, &cfg).unwrap();
        let cv = evaluate_model(&conv_m, &test, "C").unwrap().macro_f;
        let d2 = evaluate_model(&out.stage_models[0], &test, "2").unwrap().macro_f;
        let d3 = evaluate_model(&out.stage_models[1], &test, "3").unwrap().macro_f;
        println!("seed={seed}: d2 {d2:.4} d3 {d3:.4} d4 {lw:.4} | conv {cv:.4} ({:.0}s)", t0.elapsed().as_secs_f64());
        lws.push(lw);
        cvs.push(cv);
    }
    lws.sort_by(f64::total_cmp);
    cvs.sort_by(f64::total_cmp);
    println!("median d4 {:.4} conv {:.4}", lws[2], cvs[2]);
}
